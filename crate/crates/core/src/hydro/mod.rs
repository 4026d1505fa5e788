//! Mean-annual water balance: aridity index, the fixed baseflow and direct
//! runoff formulas, refittable formula families, catchment tables and a
//! synthetic data generator.

mod data;
mod synth;

pub use data::{
    load_catchments, parse_catchments, write_predictions, CatchmentDataset, CatchmentRecord, DerivedRecord,
    LoadOptions, Target, REQUIRED_COLUMNS,
};
pub use synth::{synth_generate, Samples, SynthSource};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{bfgs_minimize_fg, OptimError, OptimOptions, OptimStatus};

/// φ above this is accepted but reported as suspicious.
pub const PHI_WARN_THRESHOLD: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HydroError {
    #[error("precipitation must be positive, got {0}")]
    NonpositivePrecipitation(f64),
    #[error("aridity index must be non-negative and finite, got {0}")]
    NegativePhi(f64),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("invalid range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("duplicate gauge_id `{id}` on line {line}")]
    DuplicateGaugeId { id: String, line: u64 },
    #[error("invariant violated: {}", .0.join("; "))]
    InvariantViolation(Vec<String>),
    #[error("dataset is empty")]
    Empty,
    #[error("io: {0}")]
    Io(String),
    #[error("optimizer failed ({source}); best so far {best:?}")]
    OptimizerFailure { source: OptimError, best: Vec<f64> },
}

/// φ = PET / P.
pub fn aridity_index(p: f64, pet: f64) -> Result<f64, HydroError> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(HydroError::NonpositivePrecipitation(p));
    }
    if !(pet >= 0.0) || !pet.is_finite() {
        return Err(HydroError::InvalidArg(format!("PET must be non-negative, got {pet}")));
    }
    Ok(pet / p)
}

fn check_phi(phi: f64) -> Result<(), HydroError> {
    if phi >= 0.0 && phi.is_finite() {
        Ok(())
    } else {
        Err(HydroError::NegativePhi(phi))
    }
}

/// Exponential baseflow fraction, `exp(−φ^1.71 − 0.873)^1.05`.
pub fn eval_original_fb(phi: f64) -> Result<f64, HydroError> {
    AridityModel::original_fb().eval(phi)
}

/// Exponential direct-runoff fraction, `exp(−φ^0.77 − 0.864)^1.06`.
pub fn eval_original_fd(phi: f64) -> Result<f64, HydroError> {
    AridityModel::original_fd().eval(phi)
}

/// KAN-discovered baseflow fraction, `0.39 − 0.34·tanh(1.42φ − 0.82)`.
pub fn eval_kan_fb(phi: f64) -> Result<f64, HydroError> {
    AridityModel::kan_fb().eval(phi)
}

/// Simplified baseflow fraction, `0.7573 − 0.7243·tanh φ`.
pub fn eval_kan_inspired_fb(phi: f64) -> Result<f64, HydroError> {
    AridityModel::kan_inspired_fb().eval(phi)
}

/// Baseflow depth in mm/yr, `47.13 + 1932.52·exp(−1.42(φ + 0.29)²)`.
#[allow(non_snake_case)]
pub fn eval_FB(phi: f64) -> Result<f64, HydroError> {
    AridityModel::fb().eval(phi)
}

/// `F_B(φ) − 47.13`, the gaussian part alone. In `f64` the sum rounds to
/// exactly 47.13 once this falls under half an ulp (φ ≳ 4.7), so decay
/// properties are only observable here.
#[allow(non_snake_case)]
pub fn eval_FB_excess(phi: f64) -> Result<f64, HydroError> {
    check_phi(phi)?;
    let (a, b, c) = (1.42, 0.29, 1932.52);
    Ok(c * (-a * (phi + b) * (phi + b)).exp())
}

/// Direct runoff depth in mm/yr, `616.82 − 418.39·arctan(2.84φ − 0.87)`.
///
/// Goes negative for φ beyond about 3.949; `clamp` floors it at zero.
#[allow(non_snake_case)]
pub fn eval_FD(phi: f64, clamp: bool) -> Result<f64, HydroError> {
    let v = AridityModel::fd().eval(phi)?;
    Ok(if clamp { v.max(0.0) } else { v })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    /// `exp(c·(b − φ^a))`, params `[a, b, c]`.
    OriginalExp,
    /// `c·tanh(aφ + b) + d`, params `[a, b, c, d]`.
    Tanh4,
    /// `a − b·tanh φ`, params `[a, b]`.
    Tanh2,
    /// `c·exp(−a(φ + b)²) + d`, params `[a, b, c, d]`.
    Gaussian3,
    /// `c·arctan(aφ + b) + d`, params `[a, b, c, d]`.
    Arctan4,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 5] = [
        ModelFamily::OriginalExp,
        ModelFamily::Tanh4,
        ModelFamily::Tanh2,
        ModelFamily::Gaussian3,
        ModelFamily::Arctan4,
    ];

    pub fn param_count(self) -> usize {
        match self {
            ModelFamily::OriginalExp => 3,
            ModelFamily::Tanh2 => 2,
            _ => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::OriginalExp => "original-exp",
            ModelFamily::Tanh4 => "tanh4",
            ModelFamily::Tanh2 => "tanh2",
            ModelFamily::Gaussian3 => "gaussian3",
            ModelFamily::Arctan4 => "arctan4",
        }
    }

    /// Formula value and its gradient with respect to the parameters.
    /// `phi` is assumed already validated.
    fn value_grad(self, p: &[f64], phi: f64) -> (f64, Vec<f64>) {
        match self {
            ModelFamily::OriginalExp => {
                let (a, b, c) = (p[0], p[1], p[2]);
                let s = phi.powf(a);
                let f = (c * (b - s)).exp();
                let ds_da = if phi > 0.0 { s * phi.ln() } else { 0.0 };
                (f, vec![-f * c * ds_da, f * c, f * (b - s)])
            }
            ModelFamily::Tanh4 => {
                let (a, b, c, d) = (p[0], p[1], p[2], p[3]);
                let t = (a * phi + b).tanh();
                let s = c * (1.0 - t * t);
                (c * t + d, vec![s * phi, s, t, 1.0])
            }
            ModelFamily::Tanh2 => {
                let t = phi.tanh();
                (p[0] - p[1] * t, vec![1.0, -t])
            }
            ModelFamily::Gaussian3 => {
                let (a, b, c, d) = (p[0], p[1], p[2], p[3]);
                let u = phi + b;
                let g = (-a * u * u).exp();
                (c * g + d, vec![-c * g * u * u, -2.0 * a * c * g * u, g, 1.0])
            }
            ModelFamily::Arctan4 => {
                let (a, b, c, d) = (p[0], p[1], p[2], p[3]);
                let u = a * phi + b;
                let w = c / (1.0 + u * u);
                (c * u.atan() + d, vec![w * phi, w, u.atan(), 1.0])
            }
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = HydroError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| HydroError::InvalidArg(format!("unknown model family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AridityModel {
    pub family: ModelFamily,
    pub params: Vec<f64>,
}

impl AridityModel {
    pub fn new(family: ModelFamily, params: Vec<f64>) -> Result<Self, HydroError> {
        if params.len() != family.param_count() {
            return Err(HydroError::InvalidArg(format!(
                "{family} takes {} parameters, got {}",
                family.param_count(),
                params.len()
            )));
        }
        Ok(Self { family, params })
    }

    fn fixed(family: ModelFamily, params: &[f64]) -> Self {
        Self { family, params: params.to_vec() }
    }

    pub fn original_fb() -> Self {
        Self::fixed(ModelFamily::OriginalExp, &[1.71, -0.873, 1.05])
    }

    pub fn original_fd() -> Self {
        Self::fixed(ModelFamily::OriginalExp, &[0.77, -0.864, 1.06])
    }

    pub fn kan_fb() -> Self {
        Self::fixed(ModelFamily::Tanh4, &[1.42, -0.82, -0.34, 0.39])
    }

    pub fn kan_inspired_fb() -> Self {
        Self::fixed(ModelFamily::Tanh2, &[0.7573, 0.7243])
    }

    /// Baseflow depth; `(−φ − 0.29)²` is written as `(φ + 0.29)²`.
    pub fn fb() -> Self {
        Self::fixed(ModelFamily::Gaussian3, &[1.42, 0.29, 1932.52, 47.13])
    }

    pub fn fd() -> Self {
        Self::fixed(ModelFamily::Arctan4, &[2.84, -0.87, -418.39, 616.82])
    }

    /// Looks up a named formula by its command-line name.
    pub fn named(name: &str) -> Option<Self> {
        Some(match name {
            "original_fb" => Self::original_fb(),
            "original_fd" => Self::original_fd(),
            "kan_fb" => Self::kan_fb(),
            "kan_inspired_fb" => Self::kan_inspired_fb(),
            "FB" => Self::fb(),
            "FD" => Self::fd(),
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 6] = ["original_fb", "original_fd", "kan_fb", "kan_inspired_fb", "FB", "FD"];

    pub fn eval(&self, phi: f64) -> Result<f64, HydroError> {
        check_phi(phi)?;
        Ok(self.family.value_grad(&self.params, phi).0)
    }

    pub fn eval_many(&self, phis: &[f64]) -> Result<Vec<f64>, HydroError> {
        phis.iter().map(|&p| self.eval(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricFit {
    pub model: AridityModel,
    pub rmse: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

/// Refits a formula family to `(xs, ys)` by BFGS from `x0`.
///
/// The mean squared error is minimized: it has the same minimizer as the
/// RMSE but stays smooth at an exact fit. Options default to a longer
/// iteration budget than [`OptimOptions::default`].
pub fn fit_parametric(
    family: ModelFamily,
    xs: &[f64],
    ys: &[f64],
    x0: &[f64],
    opts: Option<&OptimOptions>,
) -> Result<ParametricFit, HydroError> {
    let k = family.param_count();
    if x0.len() != k {
        return Err(HydroError::InvalidArg(format!("{family} takes {k} parameters, got {}", x0.len())));
    }
    if xs.len() != ys.len() || xs.len() < k {
        return Err(HydroError::InvalidArg(format!(
            "need equal-length samples (at least {k}), got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    for &x in xs {
        check_phi(x)?;
    }
    let default = OptimOptions { max_iters: 2000, ..OptimOptions::default() };
    let opts = opts.unwrap_or(&default);
    let n = xs.len() as f64;
    let objective = |p: &[f64]| {
        let mut sse = 0.0;
        let mut g = vec![0.0; k];
        for (&x, &y) in xs.iter().zip(ys) {
            let (f, df) = family.value_grad(p, x);
            let r = f - y;
            sse += r * r;
            for (gi, di) in g.iter_mut().zip(&df) {
                *gi += 2.0 * r * di;
            }
        }
        if !sse.is_finite() {
            return (f64::INFINITY, vec![0.0; k]);
        }
        g.iter_mut().for_each(|v| *v /= n);
        (sse / n, g)
    };
    let res = bfgs_minimize_fg(objective, x0, opts)
        .map_err(|e| HydroError::OptimizerFailure { source: e, best: x0.to_vec() })?;
    Ok(ParametricFit {
        model: AridityModel { family, params: res.x_star },
        rmse: res.f_star.max(0.0).sqrt(),
        iterations: res.iterations,
        status: res.status,
    })
}
