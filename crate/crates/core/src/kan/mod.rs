//! Kolmogorov-Arnold networks: every edge carries its own learnable univariate
//! activation `ψ(x) = w_b·silu(x) + w_c·Σ cᵢBᵢ(x)` and every node sums its
//! incoming edges. Edges can be locked to an affine-wrapped symbolic
//! primitive `c·f(a·x + b) + d`, after which the network reads off as a
//! closed-form expression.

mod grad;
mod pipeline;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{make_grid, spline_eval_unchecked, KnotGrid, SplineCoeffs, SplineError, DEFAULT_ORDER};
use crate::optim::OptimError;
use crate::symbolic::{builtin, CandidateFunction, SymbolicError, ZERO};

pub use grad::{batch_rmse_loss, gradient, loss_and_gradient, penalty, regularized_loss, train, Penalty};
pub use pipeline::{extract_formula, prune, refine_affine, snap_all, snap_edge, Refined, DEFAULT_PRUNE_THRESHOLD};

/// Default weight of the sparsity penalty.
pub const DEFAULT_LAMBDA: f64 = 1e-3;
/// Spline domain before the network has seen data.
pub const DEFAULT_DOMAIN: (f64, f64) = (-3.0, 3.0);
const INIT_SCALE: f64 = 0.1;
/// Relative margin added on each side when grids are fitted to data.
const DOMAIN_MARGIN: f64 = 0.1;

/// `(layer, out_idx, in_idx)`.
pub type EdgeIndex = (usize, usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KanError {
    #[error("invalid shape {0:?}: need at least 2 entries, all ≥ 1")]
    InvalidShape(Vec<usize>),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("edge {edge:?}: {func} is undefined at {value}")]
    DomainViolation { edge: EdgeIndex, func: String, value: f64 },
    #[error("edge {0:?} does not exist")]
    NoSuchEdge(EdgeIndex),
    #[error("edge {0:?} is already locked")]
    AlreadyLocked(EdgeIndex),
    #[error("network has no locked edges to refine")]
    NoLockedEdges,
    #[error("unlocked edges remain: {0:?}")]
    UnlockedEdges(Vec<EdgeIndex>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
}

/// Affine-wrapped primitive an edge has been snapped to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LockRepr", into = "LockRepr")]
pub struct SymbolicLock {
    pub candidate: CandidateFunction,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

#[derive(Serialize, Deserialize)]
struct LockRepr {
    candidate: String,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl From<SymbolicLock> for LockRepr {
    fn from(l: SymbolicLock) -> Self {
        LockRepr {
            candidate: l.candidate.name().to_string(),
            a: l.a,
            b: l.b,
            c: l.c,
            d: l.d,
        }
    }
}

impl TryFrom<LockRepr> for SymbolicLock {
    type Error = String;

    fn try_from(r: LockRepr) -> Result<Self, String> {
        let candidate = builtin(&r.candidate).ok_or_else(|| format!("unknown candidate `{}`", r.candidate))?;
        Ok(SymbolicLock {
            candidate,
            a: r.a,
            b: r.b,
            c: r.c,
            d: r.d,
        })
    }
}

impl SymbolicLock {
    pub fn zero() -> Self {
        SymbolicLock {
            candidate: builtin(ZERO).expect("zero primitive"),
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        }
    }

    /// `c·f(a·x + b) + d`, or the offending argument.
    pub fn eval(&self, x: f64) -> Result<f64, f64> {
        let u = self.a * x + self.b;
        if !self.candidate.accepts(u) {
            return Err(u);
        }
        Ok(self.c * self.candidate.apply(u) + self.d)
    }
}

/// One learnable activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeActivation {
    pub w_b: f64,
    pub w_c: f64,
    pub grid: KnotGrid,
    pub coeffs: SplineCoeffs,
    /// When present, governs evaluation and the spline part is ignored.
    pub lock: Option<SymbolicLock>,
    /// Removed by pruning; the lock is the zero function and stays frozen.
    #[serde(default)]
    pub pruned: bool,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl EdgeActivation {
    pub fn is_locked(&self) -> bool {
        self.lock.is_some()
    }

    /// Number of flattened trainable parameters.
    pub fn param_count(&self) -> usize {
        if self.lock.is_some() {
            4
        } else {
            2 + self.coeffs.len()
        }
    }

    fn eval_raw(&self, x: f64) -> Result<f64, f64> {
        match &self.lock {
            Some(l) => l.eval(x),
            None => Ok(self.w_b * silu(x) + self.w_c * spline_eval_unchecked(&self.grid, &self.coeffs.values, x)),
        }
    }

    fn zero_lock(&mut self) {
        self.lock = Some(SymbolicLock::zero());
        self.pruned = true;
    }
}

/// `ψ(x)` for a single edge.
pub fn activation_eval(edge: &EdgeActivation, x: f64) -> Result<f64, KanError> {
    edge.eval_raw(x).map_err(|value| KanError::DomainViolation {
        edge: (0, 0, 0),
        func: edge.lock.as_ref().map(|l| l.candidate.name().to_string()).unwrap_or_default(),
        value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim × in_dim]`.
    pub edges: Vec<EdgeActivation>,
}

impl KanLayer {
    pub fn edge(&self, out_idx: usize, in_idx: usize) -> &EdgeActivation {
        &self.edges[out_idx * self.in_dim + in_idx]
    }

    pub fn edge_mut(&mut self, out_idx: usize, in_idx: usize) -> &mut EdgeActivation {
        &mut self.edges[out_idx * self.in_dim + in_idx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanNetwork {
    pub layers: Vec<KanLayer>,
    pub shape: Vec<usize>,
    pub rng_seed: u64,
    /// Set once the spline grids have been rescaled to observed inputs.
    #[serde(default)]
    pub grids_fitted: bool,
}

/// Fresh network with small random spline coefficients (deterministic in
/// `seed`) on cubic grids over [`DEFAULT_DOMAIN`].
pub fn init_network(shape: &[usize], grid_intervals: usize, seed: u64) -> Result<KanNetwork, KanError> {
    if shape.len() < 2 || shape.contains(&0) {
        return Err(KanError::InvalidShape(shape.to_vec()));
    }
    if grid_intervals < 1 {
        return Err(KanError::InvalidArg("grid_intervals must be ≥ 1".into()));
    }
    let grid = make_grid(DEFAULT_DOMAIN.0, DEFAULT_DOMAIN.1, grid_intervals, DEFAULT_ORDER)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
    let layers = shape
        .windows(2)
        .map(|w| {
            let (in_dim, out_dim) = (w[0], w[1]);
            let edges = (0..in_dim * out_dim)
                .map(|_| EdgeActivation {
                    w_b: 1.0,
                    w_c: 1.0,
                    grid: grid.clone(),
                    coeffs: SplineCoeffs::new((0..grid.basis_count()).map(|_| normal.sample(&mut rng)).collect()),
                    lock: None,
                    pruned: false,
                })
                .collect();
            KanLayer { in_dim, out_dim, edges }
        })
        .collect();
    Ok(KanNetwork {
        layers,
        shape: shape.to_vec(),
        rng_seed: seed,
        grids_fitted: false,
    })
}

impl KanNetwork {
    pub fn input_dim(&self) -> usize {
        self.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.shape.last().expect("validated shape")
    }

    pub fn edge(&self, (l, j, i): EdgeIndex) -> Result<&EdgeActivation, KanError> {
        let layer = self.layers.get(l).ok_or(KanError::NoSuchEdge((l, j, i)))?;
        if j >= layer.out_dim || i >= layer.in_dim {
            return Err(KanError::NoSuchEdge((l, j, i)));
        }
        Ok(layer.edge(j, i))
    }

    /// Every edge index in flattening order.
    pub fn edge_indices(&self) -> Vec<EdgeIndex> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for j in 0..layer.out_dim {
                for i in 0..layer.in_dim {
                    out.push((l, j, i));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.layers.iter().map(|l| l.edges.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.edges).map(|e| e.param_count()).sum()
    }

    /// Flattened parameters: layer-major, then `(out, in)`, then
    /// `[w_b, w_c, c₀…]` for spline edges or `[a, b, c, d]` for locked ones.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in self.layers.iter().flat_map(|l| &l.edges) {
            match &e.lock {
                Some(l) => out.extend([l.a, l.b, l.c, l.d]),
                None => {
                    out.push(e.w_b);
                    out.push(e.w_c);
                    out.extend(&e.coeffs.values);
                }
            }
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), KanError> {
        if p.len() != self.param_count() {
            return Err(KanError::DimMismatch(format!(
                "{} parameters given, network has {}",
                p.len(),
                self.param_count()
            )));
        }
        let mut k = 0;
        for e in self.layers.iter_mut().flat_map(|l| &mut l.edges) {
            match &mut e.lock {
                Some(l) => {
                    l.a = p[k];
                    l.b = p[k + 1];
                    l.c = p[k + 2];
                    l.d = p[k + 3];
                    k += 4;
                }
                None => {
                    e.w_b = p[k];
                    e.w_c = p[k + 1];
                    let n = e.coeffs.len();
                    e.coeffs.values.copy_from_slice(&p[k + 2..k + 2 + n]);
                    k += 2 + n;
                }
            }
        }
        Ok(())
    }

    /// Output vector for one input row.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, KanError> {
        if x.len() != self.input_dim() {
            return Err(KanError::DimMismatch(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            cur = layer_forward(l, layer, &cur, None)?;
        }
        Ok(cur)
    }

    /// Scalar output over a batch (the network must have one output).
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, KanError> {
        if self.output_dim() != 1 {
            return Err(KanError::DimMismatch(format!("{} outputs, expected 1", self.output_dim())));
        }
        xs.iter().map(|x| self.forward(x).map(|y| y[0])).collect()
    }

    /// Per-layer node values for each row: `trace[s][l]` is the input of
    /// layer `l` (the last entry is the output).
    pub(crate) fn trace(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>, KanError> {
        xs.iter()
            .map(|x| {
                if x.len() != self.input_dim() {
                    return Err(KanError::DimMismatch(format!(
                        "input has {} values, network expects {}",
                        x.len(),
                        self.input_dim()
                    )));
                }
                let mut nodes = vec![x.clone()];
                for (l, layer) in self.layers.iter().enumerate() {
                    let next = layer_forward(l, layer, nodes.last().expect("input"), None)?;
                    nodes.push(next);
                }
                Ok(nodes)
            })
            .collect()
    }

    /// Empirical `(input, output)` pairs of one edge over a batch.
    pub fn edge_samples(&self, idx: EdgeIndex, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), KanError> {
        let edge = self.edge(idx)?;
        let (l, _, i) = idx;
        let trace = self.trace(xs)?;
        let ins: Vec<f64> = trace.iter().map(|t| t[l][i]).collect();
        let outs = ins
            .iter()
            .map(|&x| edge.eval_raw(x).map_err(|value| violation(idx, edge, value)))
            .collect::<Result<Vec<f64>, KanError>>()?;
        Ok((ins, outs))
    }

    /// Rescales every spline grid, layer by layer, to the observed input
    /// range plus a 10% margin on each side. Coefficients are kept.
    pub fn fit_grids_to_data(&mut self, xs: &[Vec<f64>]) -> Result<(), KanError> {
        if xs.is_empty() {
            return Err(KanError::InvalidArg("empty batch".into()));
        }
        let mut cur: Vec<Vec<f64>> = xs.to_vec();
        for l in 0..self.layers.len() {
            let in_dim = self.layers[l].in_dim;
            for i in 0..in_dim {
                let (lo, hi) = cur
                    .iter()
                    .map(|r| r[i])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                let (lo, hi) = if hi - lo > 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
                    let m = DOMAIN_MARGIN * (hi - lo);
                    (lo - m, hi + m)
                } else {
                    (lo - 1.0, hi + 1.0)
                };
                let layer = &mut self.layers[l];
                for j in 0..layer.out_dim {
                    let e = layer.edge_mut(j, i);
                    e.grid = e.grid.with_domain(lo, hi)?;
                }
            }
            let layer = &self.layers[l];
            cur = cur
                .iter()
                .map(|x| layer_forward(l, layer, x, None))
                .collect::<Result<_, _>>()?;
        }
        self.grids_fitted = true;
        Ok(())
    }

    pub fn unlocked_edges(&self) -> Vec<EdgeIndex> {
        self.edge_indices()
            .into_iter()
            .filter(|&(l, j, i)| !self.layers[l].edge(j, i).is_locked())
            .collect()
    }

    pub fn to_json(&self) -> Result<String, KanError> {
        serde_json::to_string_pretty(self).map_err(|e| KanError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, KanError> {
        let net: KanNetwork = serde_json::from_str(s).map_err(|e| KanError::Checkpoint(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), KanError> {
        let bad = |m: String| Err(KanError::Checkpoint(m));
        if self.shape.len() < 2 || self.shape.contains(&0) || self.layers.len() + 1 != self.shape.len() {
            return bad(format!("inconsistent shape {:?}", self.shape));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_dim != self.shape[l]
                || layer.out_dim != self.shape[l + 1]
                || layer.edges.len() != layer.in_dim * layer.out_dim
            {
                return bad(format!("layer {l} does not match shape"));
            }
            for e in &layer.edges {
                if e.coeffs.len() != e.grid.basis_count() {
                    return bad(format!("layer {l}: coefficient count does not match grid"));
                }
                let finite = e.w_b.is_finite()
                    && e.w_c.is_finite()
                    && e.coeffs.values.iter().all(|v| v.is_finite())
                    && e.lock.as_ref().is_none_or(|k| [k.a, k.b, k.c, k.d].iter().all(|v| v.is_finite()));
                if !finite {
                    return bad(format!("layer {l}: non-finite parameter"));
                }
            }
        }
        Ok(())
    }
}

fn violation(idx: EdgeIndex, edge: &EdgeActivation, value: f64) -> KanError {
    KanError::DomainViolation {
        edge: idx,
        func: edge.lock.as_ref().map(|l| l.candidate.name().to_string()).unwrap_or_default(),
        value,
    }
}

/// Node sums of one layer; optionally records each edge output.
pub(crate) fn layer_forward(
    l: usize,
    layer: &KanLayer,
    x: &[f64],
    mut psi: Option<&mut Vec<f64>>,
) -> Result<Vec<f64>, KanError> {
    let mut out = vec![0.0; layer.out_dim];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, &xi) in x.iter().enumerate() {
            let e = layer.edge(j, i);
            let v = e.eval_raw(xi).map_err(|value| violation((l, j, i), e, value))?;
            if let Some(p) = psi.as_deref_mut() {
                p.push(v);
            }
            *o += v;
        }
    }
    Ok(out)
}
