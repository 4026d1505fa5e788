//! Post-training steps: prune, snap, refine, extract.

use super::grad::{edge_importances, loss_and_gradient};
use super::{EdgeIndex, KanError, KanNetwork, SymbolicLock};
use crate::optim::{bfgs_minimize_fg, AffineSearch, OptimOptions, OptimStatus};
use crate::symbolic::{rank_candidates, CandidateLibrary, ExpressionTree, SnapResult, SymbolicError};

/// Pruning threshold relative to the largest edge importance.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-2;

/// Zero-locks weak edges and hidden nodes.
///
/// Importance of an edge is its mean |ψ| over `xs`; anything below
/// `threshold × max importance` is removed, as is every edge of a hidden
/// node whose strongest incoming or strongest outgoing edge falls below it.
/// Input and output nodes are never removed and the shape is unchanged.
pub fn prune(net: &KanNetwork, threshold: f64, xs: &[Vec<f64>]) -> Result<KanNetwork, KanError> {
    if !(threshold >= 0.0) {
        return Err(KanError::InvalidArg(format!("threshold must be ≥ 0, got {threshold}")));
    }
    if xs.is_empty() {
        return Err(KanError::InvalidArg("empty batch".into()));
    }
    let imp = edge_importances(net, xs)?;
    if threshold == 0.0 {
        return Ok(net.clone());
    }
    let max = imp.iter().flatten().copied().fold(0.0, f64::max);
    let cut = threshold * max;
    let mut out = net.clone();
    let weak = |v: f64| v < cut;

    for (l, layer) in net.layers.iter().enumerate() {
        for j in 0..layer.out_dim {
            for i in 0..layer.in_dim {
                if weak(imp[l][j * layer.in_dim + i]) && !layer.edge(j, i).pruned {
                    out.layers[l].edge_mut(j, i).zero_lock();
                }
            }
        }
    }
    // hidden node h sits between layer h-1 (incoming) and layer h (outgoing)
    for h in 1..net.layers.len() {
        let (prev, next) = (&net.layers[h - 1], &net.layers[h]);
        for node in 0..prev.out_dim {
            let incoming = (0..prev.in_dim).map(|i| imp[h - 1][node * prev.in_dim + i]).fold(0.0, f64::max);
            let outgoing = (0..next.out_dim).map(|j| imp[h][j * next.in_dim + node]).fold(0.0, f64::max);
            if weak(incoming) || weak(outgoing) {
                for i in 0..prev.in_dim {
                    let e = out.layers[h - 1].edge_mut(node, i);
                    if !e.pruned {
                        e.zero_lock();
                    }
                }
                for j in 0..next.out_dim {
                    let e = out.layers[h].edge_mut(j, node);
                    if !e.pruned {
                        e.zero_lock();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fits every library primitive to the edge's empirical activation over
/// `xs` and locks the edge to the best one.
pub fn snap_edge(
    net: &KanNetwork,
    idx: EdgeIndex,
    library: &CandidateLibrary,
    xs: &[Vec<f64>],
    search: &AffineSearch,
) -> Result<(KanNetwork, SnapResult), KanError> {
    if net.edge(idx)?.is_locked() {
        return Err(KanError::AlreadyLocked(idx));
    }
    if xs.is_empty() {
        return Err(KanError::InvalidArg("empty batch".into()));
    }
    let (ins, outs) = net.edge_samples(idx, xs)?;
    let res = rank_candidates(&ins, &outs, library, search)?;
    let best = res.best();
    let candidate = library
        .get(&best.name)
        .cloned()
        .or_else(|| crate::symbolic::builtin(&best.name))
        .ok_or_else(|| SymbolicError::UnknownFunction(best.name.clone()))?;
    let mut out = net.clone();
    let (l, j, i) = idx;
    out.layers[l].edge_mut(j, i).lock = Some(SymbolicLock {
        candidate,
        a: best.a,
        b: best.b,
        c: best.c,
        d: best.d,
    });
    Ok((out, res))
}

/// Snaps every unlocked edge in flattening order; each snap sees the
/// already-locked upstream edges.
pub fn snap_all(
    net: &KanNetwork,
    library: &CandidateLibrary,
    xs: &[Vec<f64>],
    search: &AffineSearch,
) -> Result<(KanNetwork, Vec<(EdgeIndex, SnapResult)>), KanError> {
    let mut cur = net.clone();
    let mut results = Vec::new();
    for idx in net.unlocked_edges() {
        let (next, res) = snap_edge(&cur, idx, library, xs, search)?;
        cur = next;
        results.push((idx, res));
    }
    Ok((cur, results))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub net: KanNetwork,
    pub status: OptimStatus,
    pub rmse_before: f64,
    pub rmse_after: f64,
}

/// Re-optimizes `(a, b, c, d)` of every locked, unpruned edge with BFGS;
/// spline edges and pruned edges are frozen. The squared error is
/// minimized (same minimizer as RMSE, smooth at a perfect fit), and the
/// starting point is kept if nothing better is found.
pub fn refine_affine(
    net: &KanNetwork,
    xs: &[Vec<f64>],
    ys: &[f64],
    opts: &OptimOptions,
) -> Result<Refined, KanError> {
    let mut free = Vec::new();
    let mut off = 0;
    for e in net.layers.iter().flat_map(|l| &l.edges) {
        if e.is_locked() && !e.pruned {
            free.extend(off..off + 4);
        }
        off += e.param_count();
    }
    if free.is_empty() {
        return Err(KanError::NoLockedEdges);
    }
    let base = net.params();
    let (rmse0, _) = loss_and_gradient(net, xs, ys, 0.0)?;
    let objective = |z: &[f64]| {
        let mut p = base.clone();
        for (k, &v) in free.iter().zip(z) {
            p[*k] = v;
        }
        let mut trial = net.clone();
        if trial.set_params(&p).is_err() {
            return (f64::INFINITY, vec![0.0; z.len()]);
        }
        match loss_and_gradient(&trial, xs, ys, 0.0) {
            Ok((rmse, g)) => (rmse * rmse, free.iter().map(|&k| 2.0 * rmse * g[k]).collect()),
            Err(_) => (f64::INFINITY, vec![0.0; z.len()]),
        }
    };
    let z0: Vec<f64> = free.iter().map(|&k| base[k]).collect();
    let res = bfgs_minimize_fg(objective, &z0, opts)?;
    let mut out = net.clone();
    let mut rmse_after = rmse0;
    if res.f_star.is_finite() && res.f_star.sqrt() < rmse0 {
        let mut p = base.clone();
        for (k, &v) in free.iter().zip(&res.x_star) {
            p[*k] = v;
        }
        out.set_params(&p)?;
        rmse_after = res.f_star.sqrt();
    }
    Ok(Refined {
        net: out,
        status: res.status,
        rmse_before: rmse0,
        rmse_after,
    })
}

/// Closed-form expression of a fully locked network, constant-folded.
pub fn extract_formula(net: &KanNetwork) -> Result<ExpressionTree, KanError> {
    let unlocked = net.unlocked_edges();
    if !unlocked.is_empty() {
        return Err(KanError::UnlockedEdges(unlocked));
    }
    let mut nodes: Vec<ExpressionTree> = (0..net.input_dim()).map(ExpressionTree::Variable).collect();
    for layer in &net.layers {
        nodes = (0..layer.out_dim)
            .map(|j| {
                let terms = (0..layer.in_dim)
                    .map(|i| {
                        let lock = layer.edge(j, i).lock.as_ref().expect("checked locked");
                        if lock.candidate.is_zero() || lock.c == 0.0 {
                            ExpressionTree::Constant(lock.d)
                        } else {
                            ExpressionTree::apply(lock.candidate.clone(), lock.a, lock.b, lock.c, lock.d, nodes[i].clone())
                        }
                    })
                    .collect();
                ExpressionTree::Sum(terms).fold()
            })
            .collect();
    }
    let mut out = nodes;
    if out.len() == 1 {
        Ok(out.pop().expect("one output"))
    } else {
        Ok(ExpressionTree::Sum(out))
    }
}
