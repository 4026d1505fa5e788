//! Uniform B-spline bases for KAN edge activations.
//!
//! A [`KnotGrid`] partitions `[domain_min, domain_max]` into `G` equal
//! intervals and pads `k` extension knots on each side with the same spacing,
//! giving `G + 2k + 1` knots and `G + k` basis functions of degree `k`.
//! Evaluation uses the Cox-de Boor recursion over the whole knot vector, so
//! inputs that fall into the extension region are extrapolated by the same
//! polynomials instead of being clamped.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ridge term added to the normal-equation diagonal in least-squares fits.
pub const RIDGE: f64 = 1e-8;
const REFINEMENT_STEPS: usize = 3;

/// Default polynomial degree of every spline.
pub const DEFAULT_ORDER: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("invalid domain: min {min} must be below max {max}")]
    InvalidDomain { min: f64, max: f64 },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("coefficient length {got} does not match basis count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("least-squares system is rank deficient")]
    RankDeficient,
}

/// Uniform knot vector for one spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    domain_min: f64,
    domain_max: f64,
    num_intervals: usize,
    order: usize,
    knots: Vec<f64>,
}

/// Trainable coefficients paired with a [`KnotGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplineCoeffs {
    pub values: Vec<f64>,
}

impl SplineCoeffs {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Builds a uniform grid over `[domain_min, domain_max]` with `num_intervals`
/// intervals and polynomial degree `order`.
pub fn make_grid(
    domain_min: f64,
    domain_max: f64,
    num_intervals: usize,
    order: usize,
) -> Result<KnotGrid, SplineError> {
    if !(domain_min < domain_max) || !domain_min.is_finite() || !domain_max.is_finite() {
        return Err(SplineError::InvalidDomain {
            min: domain_min,
            max: domain_max,
        });
    }
    if num_intervals < 1 {
        return Err(SplineError::InvalidArg(
            "num_intervals must be at least 1".into(),
        ));
    }
    let h = (domain_max - domain_min) / num_intervals as f64;
    let count = num_intervals + 2 * order + 1;
    let knots = (0..count)
        .map(|i| {
            let offset = i as isize - order as isize;
            // endpoints exactly, so the interior is [domain_min, domain_max] bit-for-bit
            if offset == 0 {
                domain_min
            } else if offset == num_intervals as isize {
                domain_max
            } else {
                domain_min + offset as f64 * h
            }
        })
        .collect();
    Ok(KnotGrid {
        domain_min,
        domain_max,
        num_intervals,
        order,
        knots,
    })
}

impl KnotGrid {
    pub fn domain_min(&self) -> f64 {
        self.domain_min
    }

    pub fn domain_max(&self) -> f64 {
        self.domain_max
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn spacing(&self) -> f64 {
        (self.domain_max - self.domain_min) / self.num_intervals as f64
    }

    pub fn basis_count(&self) -> usize {
        self.num_intervals + self.order
    }

    /// Same intervals and degree over a new domain.
    pub fn with_domain(&self, domain_min: f64, domain_max: f64) -> Result<KnotGrid, SplineError> {
        make_grid(domain_min, domain_max, self.num_intervals, self.order)
    }

    /// Index `j` of the degree-0 interval `[t_j, t_{j+1})` holding `x`. The
    /// last interval is closed on the right. `None` outside the knot span.
    fn interval_of(&self, x: f64) -> Option<usize> {
        let t = &self.knots;
        let last = t.len() - 1;
        if !(x >= t[0] && x <= t[last]) {
            return None;
        }
        if x == t[last] {
            return Some(last - 1);
        }
        // uniform spacing gives a direct guess; fix up for rounding at knots
        let h = self.spacing();
        let guess = ((x - t[0]) / h).floor();
        let mut j = if guess < 0.0 { 0 } else { (guess as usize).min(last - 1) };
        while j > 0 && x < t[j] {
            j -= 1;
        }
        while j + 1 < last && x >= t[j + 1] {
            j += 1;
        }
        Some(j)
    }

    /// Degree-wise Cox-de Boor tables restricted to the window of functions
    /// that can be nonzero at `x`. Returns the first index of the window,
    /// the degree-`k` values and (when requested) the degree-`k-1` values
    /// aligned so `prev[w]` is `B_{first+w, k-1}`.
    fn local_tables(&self, x: f64) -> Option<(usize, Vec<f64>, Vec<f64>)> {
        let j = self.interval_of(x)?;
        let k = self.order;
        let t = &self.knots;
        // window of degree-p functions: indices j-p ..= j, kept as a k+1 buffer
        // anchored at j-k (entries with negative index stay zero)
        let width = k + 1;
        let anchor = j as isize - k as isize;
        let mut cur = vec![0.0; width + 1];
        cur[k] = 1.0; // B_{j,0}
        let mut prev = vec![0.0; width + 1];
        for p in 1..=k {
            prev.copy_from_slice(&cur);
            for w in 0..width {
                let i = anchor + w as isize;
                if i < 0 {
                    cur[w] = 0.0;
                    continue;
                }
                let i = i as usize;
                if i + p + 1 >= t.len() {
                    cur[w] = 0.0;
                    continue;
                }
                let left = if prev[w] != 0.0 {
                    (x - t[i]) / (t[i + p] - t[i]) * prev[w]
                } else {
                    0.0
                };
                let right = if prev[w + 1] != 0.0 {
                    (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * prev[w + 1]
                } else {
                    0.0
                };
                cur[w] = left + right;
            }
        }
        if k == 0 {
            prev.iter_mut().for_each(|v| *v = 0.0);
        }
        Some((anchor.max(0) as usize, shift(cur, anchor), shift(prev, anchor)))
    }

    /// Values of all `G + k` basis functions at `x` (zero outside the knot span).
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let n = self.basis_count();
        let mut out = vec![0.0; n];
        if let Some((first, vals, _)) = self.local_tables(x) {
            for (w, v) in vals.into_iter().enumerate() {
                if first + w < n {
                    out[first + w] = v;
                }
            }
        }
        out
    }

    /// Nonzero window of the basis at `x` with first derivatives:
    /// `(first_index, values, derivatives)`.
    pub fn basis_local_with_derivative(&self, x: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let n = self.basis_count();
        let k = self.order;
        let t = &self.knots;
        match self.local_tables(x) {
            None => (0, Vec::new(), Vec::new()),
            Some((first, vals, prev)) => {
                let mut values = Vec::with_capacity(vals.len());
                let mut derivs = Vec::with_capacity(vals.len());
                for w in 0..vals.len() {
                    let i = first + w;
                    if i >= n {
                        break;
                    }
                    values.push(vals[w]);
                    if k == 0 {
                        derivs.push(0.0);
                        continue;
                    }
                    let kf = k as f64;
                    let a = prev.get(w).copied().unwrap_or(0.0);
                    let b = prev.get(w + 1).copied().unwrap_or(0.0);
                    let d = kf * a / (t[i + k] - t[i]) - kf * b / (t[i + k + 1] - t[i + 1]);
                    derivs.push(d);
                }
                (first, values, derivs)
            }
        }
    }
}

/// Drops the leading entries of a window that correspond to negative indices.
fn shift(mut buf: Vec<f64>, anchor: isize) -> Vec<f64> {
    if anchor < 0 {
        buf.drain(..(-anchor) as usize);
    }
    buf
}

/// Vector of `B_i(x)` for every basis function of `grid`.
pub fn basis_eval(grid: &KnotGrid, x: f64) -> Vec<f64> {
    grid.basis(x)
}

/// `Σ cᵢ Bᵢ(x)`.
pub fn spline_eval(grid: &KnotGrid, coeffs: &SplineCoeffs, x: f64) -> Result<f64, SplineError> {
    check_len(grid, coeffs)?;
    Ok(spline_eval_unchecked(grid, &coeffs.values, x))
}

pub(crate) fn spline_eval_unchecked(grid: &KnotGrid, coeffs: &[f64], x: f64) -> f64 {
    match grid.local_tables(x) {
        None => 0.0,
        Some((first, vals, _)) => vals
            .iter()
            .enumerate()
            .filter(|(w, _)| first + w < coeffs.len())
            .map(|(w, v)| v * coeffs[first + w])
            .sum(),
    }
}

fn check_len(grid: &KnotGrid, coeffs: &SplineCoeffs) -> Result<(), SplineError> {
    if coeffs.len() != grid.basis_count() {
        return Err(SplineError::LengthMismatch {
            expected: grid.basis_count(),
            got: coeffs.len(),
        });
    }
    Ok(())
}

/// Least-squares coefficients through the damped normal equations
/// `(AᵀA + RIDGE·I) c = Aᵀy`.
pub fn fit_coeffs_least_squares(
    grid: &KnotGrid,
    xs: &[f64],
    ys: &[f64],
) -> Result<SplineCoeffs, SplineError> {
    let n = grid.basis_count();
    if xs.len() != ys.len() {
        return Err(SplineError::InvalidArg(format!(
            "xs has {} samples but ys has {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < n {
        return Err(SplineError::InvalidArg(format!(
            "need at least {n} samples, got {}",
            xs.len()
        )));
    }
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut aty = DVector::<f64>::zeros(n);
    for (&x, &y) in xs.iter().zip(ys) {
        let b = grid.basis(x);
        for i in 0..n {
            if b[i] == 0.0 {
                continue;
            }
            aty[i] += b[i] * y;
            for j in 0..n {
                ata[(i, j)] += b[i] * b[j];
            }
        }
    }
    let mut damped = ata.clone();
    for i in 0..n {
        damped[(i, i)] += RIDGE;
    }
    let chol = damped.cholesky().ok_or(SplineError::RankDeficient)?;
    let mut c = chol.solve(&aty);
    // iterative refinement against the undamped system removes the ridge bias
    // on weakly supported edge coefficients
    for _ in 0..REFINEMENT_STEPS {
        let residual = &aty - &ata * &c;
        c += chol.solve(&residual);
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(SplineError::RankDeficient);
    }
    Ok(SplineCoeffs::new(c.iter().copied().collect()))
}

/// Re-expresses a spline on a grid with `new_num_intervals` over the same
/// domain by least squares against dense samples of the old spline.
pub fn extend_grid(
    grid: &KnotGrid,
    coeffs: &SplineCoeffs,
    new_num_intervals: usize,
) -> Result<(KnotGrid, SplineCoeffs), SplineError> {
    check_len(grid, coeffs)?;
    let new_grid = make_grid(
        grid.domain_min,
        grid.domain_max,
        new_num_intervals,
        grid.order,
    )?;
    let samples = (20 * new_grid.basis_count()).max(200);
    let xs: Vec<f64> = (0..samples)
        .map(|i| {
            grid.domain_min + (grid.domain_max - grid.domain_min) * i as f64 / (samples - 1) as f64
        })
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| spline_eval_unchecked(grid, &coeffs.values, x))
        .collect();
    let new_coeffs = fit_coeffs_least_squares(&new_grid, &xs, &ys)?;
    Ok((new_grid, new_coeffs))
}
