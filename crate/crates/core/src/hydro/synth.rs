use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AridityModel, HydroError};
use crate::symbolic::ExpressionTree;

/// A paired series `y` against the aridity index `x`; `truth` is the
/// noiseless curve when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub truth: Option<Vec<f64>>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Inputs as single-feature rows.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.x.iter().map(|&v| vec![v]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: indices.iter().map(|&i| self.x[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            truth: self.truth.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthSource {
    Model(AridityModel),
    Expression(ExpressionTree),
}

impl SynthSource {
    pub fn eval(&self, phi: f64) -> Result<f64, HydroError> {
        match self {
            SynthSource::Model(m) => m.eval(phi),
            SynthSource::Expression(t) => t
                .eval(&[phi])
                .map_err(|e| HydroError::InvalidArg(format!("formula at phi = {phi}: {e}"))),
        }
    }
}

/// Draws `n` points with φ uniform on `[lo, hi)` and `y = f(φ) + N(0, σ²)`.
pub fn synth_generate(
    source: &SynthSource,
    n: usize,
    (lo, hi): (f64, f64),
    noise_sigma: f64,
    seed: u64,
) -> Result<Samples, HydroError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(HydroError::InvalidRange(lo, hi));
    }
    if n == 0 {
        return Err(HydroError::InvalidArg("n must be at least 1".into()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(HydroError::InvalidArg(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| HydroError::InvalidArg(e.to_string()))?;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        let phi = rng.random_range(lo..hi);
        let f = source.eval(phi)?;
        let e = noise.sample(&mut rng);
        x.push(phi);
        truth.push(f);
        y.push(f + e);
    }
    Ok(Samples { x, y, truth: Some(truth) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::parse_expression;

    fn kan_curve() -> SynthSource {
        SynthSource::Model(AridityModel::kan_fb())
    }

    #[test]
    fn noiseless_on_curve() {
        let s = synth_generate(&kan_curve(), 200, (0.2, 5.0), 0.0, 3).unwrap();
        for (x, y) in s.x.iter().zip(&s.y) {
            assert!((0.2..5.0).contains(x));
            assert_eq!(*y, AridityModel::kan_fb().eval(*x).unwrap());
        }
    }

    #[test]
    fn seeded() {
        let a = synth_generate(&kan_curve(), 50, (0.2, 5.0), 0.02, 11).unwrap();
        let b = synth_generate(&kan_curve(), 50, (0.2, 5.0), 0.02, 11).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&kan_curve(), 50, (0.2, 5.0), 0.02, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_level() {
        let s = synth_generate(&kan_curve(), 302, (0.2, 5.0), 0.02, 0).unwrap();
        let t = s.truth.as_ref().unwrap();
        let rmse = (s.y.iter().zip(t).map(|(y, f)| (y - f).powi(2)).sum::<f64>() / 302.0).sqrt();
        assert!((0.017..=0.023).contains(&rmse), "{rmse}");
    }

    #[test]
    fn expression_source() {
        let tree = parse_expression("0.39 - 0.34*tanh(1.42*x - 0.82)").unwrap();
        let a = synth_generate(&SynthSource::Expression(tree), 20, (0.2, 5.0), 0.01, 5).unwrap();
        let b = synth_generate(&kan_curve(), 20, (0.2, 5.0), 0.01, 5).unwrap();
        for (u, v) in a.y.iter().zip(&b.y) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_arguments() {
        assert_eq!(synth_generate(&kan_curve(), 10, (1.0, 1.0), 0.0, 0), Err(HydroError::InvalidRange(1.0, 1.0)));
        assert!(synth_generate(&kan_curve(), 0, (0.0, 1.0), 0.0, 0).is_err());
        assert!(synth_generate(&kan_curve(), 10, (0.0, 1.0), -1.0, 0).is_err());
        assert!(synth_generate(&kan_curve(), 10, (-1.0, 1.0), 0.0, 0).is_err());
    }
}
