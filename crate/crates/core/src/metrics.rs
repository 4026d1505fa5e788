//! Goodness-of-fit statistics for paired observed/simulated series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("observed has {0} values but simulated has {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooShort(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{0} series has zero variance")]
    ZeroVariance(&'static str),
    #[error("{0} series has zero mean")]
    ZeroMean(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    observed: Vec<f64>,
    simulated: Vec<f64>,
}

impl PairedSeries {
    pub fn new(observed: Vec<f64>, simulated: Vec<f64>) -> Result<Self, MetricsError> {
        if observed.len() != simulated.len() {
            return Err(MetricsError::LengthMismatch(observed.len(), simulated.len()));
        }
        if observed.len() < 2 {
            return Err(MetricsError::TooShort(observed.len()));
        }
        if let Some(i) = observed
            .iter()
            .zip(&simulated)
            .position(|(o, s)| !o.is_finite() || !s.is_finite())
        {
            return Err(MetricsError::NonFinite(i));
        }
        Ok(Self { observed, simulated })
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn simulated(&self) -> &[f64] {
        &self.simulated
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn pearson(s: &PairedSeries) -> Result<f64, MetricsError> {
    let (o, p) = (&s.observed, &s.simulated);
    let (mo, mp) = (mean(o), mean(p));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in o.iter().zip(p) {
        sxy += (x - mo) * (y - mp);
        sxx += (x - mo) * (x - mo);
        syy += (y - mp) * (y - mp);
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("observed"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("simulated"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Nash–Sutcliffe efficiency.
pub fn nse(s: &PairedSeries) -> Result<f64, MetricsError> {
    let mo = mean(&s.observed);
    let sst: f64 = s.observed.iter().map(|o| (o - mo) * (o - mo)).sum();
    if sst == 0.0 {
        return Err(MetricsError::ZeroVariance("observed"));
    }
    let sse: f64 = s
        .observed
        .iter()
        .zip(&s.simulated)
        .map(|(o, p)| (o - p) * (o - p))
        .sum();
    Ok(1.0 - sse / sst)
}

/// Kling–Gupta efficiency, 2012 variant (γ is the ratio of coefficients of
/// variation, population standard deviations).
pub fn kge(s: &PairedSeries) -> Result<f64, MetricsError> {
    let (mo, mp) = (mean(&s.observed), mean(&s.simulated));
    if mo == 0.0 {
        return Err(MetricsError::ZeroMean("observed"));
    }
    if mp == 0.0 {
        return Err(MetricsError::ZeroMean("simulated"));
    }
    let r = pearson(s)?;
    let beta = mp / mo;
    let cv_o = variance(&s.observed).sqrt() / mo;
    let cv_p = variance(&s.simulated).sqrt() / mp;
    let gamma = cv_p / cv_o;
    Ok(1.0 - ((r - 1.0).powi(2) + (beta - 1.0).powi(2) + (gamma - 1.0).powi(2)).sqrt())
}

pub fn rmse(s: &PairedSeries) -> f64 {
    let sse: f64 = s
        .observed
        .iter()
        .zip(&s.simulated)
        .map(|(o, p)| (o - p) * (o - p))
        .sum();
    (sse / s.len() as f64).sqrt()
}

/// Squared Pearson correlation (not 1 − SSres/SStot).
pub fn r_squared(s: &PairedSeries) -> Result<f64, MetricsError> {
    let r = pearson(s)?;
    Ok(r * r)
}

/// All four statistics; undefined ones (e.g. constant predictions) are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub nse: Option<f64>,
    pub kge: Option<f64>,
    pub rmse: f64,
    pub r2: Option<f64>,
}

impl MetricSet {
    pub fn compute(s: &PairedSeries) -> Self {
        Self {
            nse: nse(s).ok(),
            kge: kge(s).ok(),
            rmse: rmse(s),
            r2: r_squared(s).ok(),
        }
    }
}
