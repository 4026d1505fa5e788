use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::library::{CandidateFunction, CandidateLibrary, ZERO};
use super::SymbolicError;
use crate::optim::{fit_affine_wrap, AffineSearch, OptimError, ZERO_VARIANCE};

/// R² values closer than this are treated as ties and ordered by complexity.
pub const R2_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub name: String,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r2: f64,
    pub complexity: u32,
}

/// Candidates ordered best-first, with the index of the one chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapResult {
    pub ranked: Vec<RankedCandidate>,
    pub chosen: usize,
}

impl SnapResult {
    pub fn best(&self) -> &RankedCandidate {
        &self.ranked[self.chosen]
    }

    pub fn top(&self, n: usize) -> &[RankedCandidate] {
        &self.ranked[..n.min(self.ranked.len())]
    }
}

/// Fits every library primitive to `(xs, ys)` and ranks them by R².
pub fn rank_candidates(
    xs: &[f64],
    ys: &[f64],
    library: &CandidateLibrary,
    search: &AffineSearch,
) -> Result<SnapResult, SymbolicError> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(SymbolicError::InvalidArg(format!(
            "need equal-length samples (at least 4), got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var < ZERO_VARIANCE {
        let zero = library
            .get(ZERO)
            .cloned()
            .unwrap_or_else(|| super::library::builtin(ZERO).expect("zero primitive"));
        return Ok(SnapResult {
            ranked: vec![RankedCandidate {
                name: zero.name().to_string(),
                a: 1.0,
                b: 0.0,
                c: 0.0,
                d: mean,
                r2: 1.0,
                complexity: zero.complexity(),
            }],
            chosen: 0,
        });
    }

    let fits: Vec<Option<RankedCandidate>> = library
        .functions()
        .par_iter()
        .map(|f| fit_one(f, xs, ys, search))
        .collect();
    let mut pool: Vec<RankedCandidate> = fits.into_iter().flatten().collect();
    if pool.is_empty() {
        return Err(SymbolicError::NoValidCandidate);
    }

    // selection order: highest R², then lowest complexity among near-ties,
    // then library order
    let mut ranked = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let top = pool.iter().map(|c| c.r2).fold(f64::NEG_INFINITY, f64::max);
        let pick = pool
            .iter()
            .enumerate()
            .filter(|(_, c)| c.r2 >= top - R2_TIE_TOLERANCE)
            .min_by_key(|(i, c)| (c.complexity, *i))
            .map(|(i, _)| i)
            .expect("nonempty pool");
        ranked.push(pool.remove(pick));
    }
    Ok(SnapResult { ranked, chosen: 0 })
}

fn fit_one(
    f: &CandidateFunction,
    xs: &[f64],
    ys: &[f64],
    search: &AffineSearch,
) -> Option<RankedCandidate> {
    if f.is_zero() {
        // c·0 + d: the mean predictor
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        return Some(RankedCandidate {
            name: f.name().to_string(),
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: mean,
            r2: 0.0,
            complexity: f.complexity(),
        });
    }
    match fit_affine_wrap(f, xs, ys, search) {
        Ok(fit) if fit.r2.is_finite() => Some(RankedCandidate {
            name: f.name().to_string(),
            a: fit.a,
            b: fit.b,
            c: fit.c,
            d: fit.d,
            r2: fit.r2,
            complexity: f.complexity(),
        }),
        Ok(_) | Err(OptimError::NoValidCandidate { .. }) => None,
        Err(e) => {
            log::debug!("candidate {} failed: {e}", f.name());
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn lib() -> CandidateLibrary {
        CandidateLibrary::builtin()
    }

    #[test]
    fn noisy_tanh_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let xs: Vec<f64> = (0..300).map(|_| rng.random_range(0.2..5.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.39 - 0.34 * (1.42 * x - 0.82).tanh() + noise.sample(&mut rng))
            .collect();
        let res = rank_candidates(&xs, &ys, &lib(), &AffineSearch::default()).unwrap();
        assert_eq!(res.best().name, "tanh", "{:?}", res.top(5));
        let n = ys.len() as f64;
        let ym = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - ym) * (y - ym)).sum::<f64>() / n;
        // with σ = 0.01 noise the attainable R² is capped near 1 - σ²/var(y) ≈ 0.9945
        let ceiling = 1.0 - 1e-4 / var;
        assert!(res.best().r2 > ceiling - 2e-3, "{:?} vs ceiling {ceiling}", res.best());
        let sig = res.ranked.iter().position(|c| c.name == "sigmoid").unwrap();
        assert!(sig > 0);
    }

    #[test]
    fn exact_line_prefers_identity() {
        let xs: Vec<f64> = (0..50).map(|i| 0.1 * i as f64 - 1.3).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0).collect();
        let res = rank_candidates(&xs, &ys, &lib(), &AffineSearch::default()).unwrap();
        assert_eq!(res.best().name, "x");
        assert!(res.best().r2 >= 1.0 - 1e-12);
        let sq = res.ranked.iter().position(|c| c.name == "x^2").unwrap();
        assert!(sq > 0);
    }

    #[test]
    fn decaying_exponential() {
        let xs: Vec<f64> = (0..100).map(|i| 0.05 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (-x).exp()).collect();
        let res = rank_candidates(&xs, &ys, &lib(), &AffineSearch::default()).unwrap();
        let exp = res.ranked.iter().find(|c| c.name == "exp").unwrap();
        let tanh = res.ranked.iter().find(|c| c.name == "tanh").unwrap();
        assert!(exp.r2 > 1.0 - 1e-9, "{exp:?}");
        assert!(tanh.r2 < exp.r2);
    }

    #[test]
    fn constant_data_snaps_to_zero() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let res = rank_candidates(&xs, &vec![0.0; 10], &lib(), &AffineSearch::default()).unwrap();
        assert_eq!(res.best().name, "0");
        assert_eq!(res.best().r2, 1.0);
    }

    #[test]
    fn ranking_is_sorted_and_winner_dominates() {
        let xs: Vec<f64> = (0..60).map(|i| 0.5 + 0.05 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 / x + 0.1 * x).collect();
        let res = rank_candidates(&xs, &ys, &lib(), &AffineSearch::default()).unwrap();
        let best = res.best().r2;
        for w in res.ranked.windows(2) {
            assert!(w[0].r2 >= w[1].r2 - R2_TIE_TOLERANCE);
        }
        for c in &res.ranked {
            assert!(best >= c.r2 - R2_TIE_TOLERANCE);
        }
    }

    #[test]
    fn empty_feasible_set() {
        let only_log = lib().subset(&["log"]);
        let xs = vec![-1000.0, -900.0, -800.0, -700.0, 800.0];
        let search = AffineSearch {
            signed: false,
            ..AffineSearch::default()
        };
        let err = rank_candidates(&xs, &[1.0, 2.0, 3.0, 4.0, 5.0], &only_log, &search).unwrap_err();
        assert_eq!(err, SymbolicError::NoValidCandidate);
    }

    /// Sample range (in the argument u = a·x + b) where each primitive is
    /// defined and non-degenerate.
    fn argument_range(name: &str) -> (f64, f64) {
        match name {
            "log" | "sqrt" | "1/sqrt" => (0.3, 3.0),
            "1/x" | "1/x^2" | "1/x^3" | "1/x^4" => (0.5, 2.5),
            "arcsin" => (-0.9, 0.7),
            "arctanh" => (-0.8, 0.6),
            "tan" => (-1.2, 0.9),
            "sign" => (-1.0, 2.0),
            "abs" => (-0.7, 2.0),
            "x^2" | "x^4" | "cosh" | "gaussian" => (-0.6, 1.8),
            _ => (-1.3, 1.6),
        }
    }

    #[test]
    fn affine_closure_recovers_each_primitive() {
        let library = lib();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for f in library.functions() {
            if f.is_zero() {
                continue;
            }
            let a = rng.random_range(0.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let b = rng.random_range(-2.0..2.0);
            let c = rng.random_range(0.5..2.0);
            let d = rng.random_range(-1.0..1.0);
            let (lo, hi) = argument_range(f.name());
            let us: Vec<f64> = (0..80).map(|i| lo + (hi - lo) * i as f64 / 79.0).collect();
            let xs: Vec<f64> = us.iter().map(|u| (u - b) / a).collect();
            let ys: Vec<f64> = us.iter().map(|&u| c * f.apply(u) + d).collect();
            let res = rank_candidates(&xs, &ys, &library, &AffineSearch::default()).unwrap();
            let own = res.ranked.iter().find(|r| r.name == f.name()).unwrap();
            assert!(own.r2 >= 1.0 - 1e-9, "{} own fit {own:?}", f.name());
            assert!(res.best().r2 >= 1.0 - 1e-9, "{}: winner {:?}", f.name(), res.best());
        }
    }
}
