//! Losses and their reverse-mode gradients.

use super::{silu, silu_derivative, EdgeActivation, KanError, KanNetwork};
use crate::optim::{bfgs_minimize_fg, OptimOptions, OptimResult};

/// Unweighted sparsity terms: `l1 = Σ_e mean|ψ_e|`, and `entropy` summed
/// over layers of the entropy of that layer's normalized edge magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    pub l1: f64,
    pub entropy: f64,
}

impl Penalty {
    pub fn total(&self) -> f64 {
        self.l1 + self.entropy
    }
}

fn check_batch(net: &KanNetwork, xs: &[Vec<f64>], ys: &[f64]) -> Result<(), KanError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(KanError::DimMismatch(format!("{} input rows vs {} targets", xs.len(), ys.len())));
    }
    if net.output_dim() != 1 {
        return Err(KanError::DimMismatch(format!("{} outputs, expected 1", net.output_dim())));
    }
    Ok(())
}

/// Forward pass keeping node values and edge outputs per sample.
struct Tape {
    /// `nodes[s][l]`: input vector of layer `l` for sample `s`.
    nodes: Vec<Vec<Vec<f64>>>,
    /// `psi[s][l]`: row-major edge outputs of layer `l`.
    psi: Vec<Vec<Vec<f64>>>,
}

fn record(net: &KanNetwork, xs: &[Vec<f64>]) -> Result<Tape, KanError> {
    let mut nodes = Vec::with_capacity(xs.len());
    let mut psi = Vec::with_capacity(xs.len());
    for x in xs {
        if x.len() != net.input_dim() {
            return Err(KanError::DimMismatch(format!(
                "input has {} values, network expects {}",
                x.len(),
                net.input_dim()
            )));
        }
        let mut ns = vec![x.clone()];
        let mut ps = Vec::with_capacity(net.layers.len());
        for (l, layer) in net.layers.iter().enumerate() {
            let mut p = Vec::with_capacity(layer.edges.len());
            let next = super::layer_forward(l, layer, ns.last().expect("input"), Some(&mut p))?;
            ns.push(next);
            ps.push(p);
        }
        nodes.push(ns);
        psi.push(ps);
    }
    Ok(Tape { nodes, psi })
}

/// Per-edge mean |ψ| by layer.
fn magnitudes(net: &KanNetwork, tape: &Tape) -> Vec<Vec<f64>> {
    let n = tape.psi.len() as f64;
    net.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            (0..layer.edges.len())
                .map(|e| tape.psi.iter().map(|p| p[l][e].abs()).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Entropy of `m / Σm` and its gradient with respect to `m`
/// (`dH/dm_k = −(ln p_k + H)/S`, taken as 0 where `m_k = 0`).
fn entropy_with_grad(m: &[f64]) -> (f64, Vec<f64>) {
    let s: f64 = m.iter().sum();
    if s <= 0.0 {
        return (0.0, vec![0.0; m.len()]);
    }
    let h: f64 = m
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / s;
            -p * p.ln()
        })
        .sum();
    let g = m
        .iter()
        .map(|&v| if v > 0.0 { -((v / s).ln() + h) / s } else { 0.0 })
        .collect();
    (h, g)
}

fn rmse_of(tape: &Tape, ys: &[f64]) -> (f64, Vec<f64>) {
    let residuals: Vec<f64> = tape
        .nodes
        .iter()
        .zip(ys)
        .map(|(ns, y)| ns.last().expect("output")[0] - y)
        .collect();
    let mse = residuals.iter().map(|r| r * r).sum::<f64>() / ys.len() as f64;
    (mse.sqrt(), residuals)
}

pub fn batch_rmse_loss(net: &KanNetwork, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64, KanError> {
    check_batch(net, xs, ys)?;
    let preds = net.predict(xs)?;
    let mse = preds.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / ys.len() as f64;
    Ok(mse.sqrt())
}

/// Mean |ψ| of every edge, by layer (row-major within a layer).
pub(crate) fn edge_importances(net: &KanNetwork, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, KanError> {
    let tape = record(net, xs)?;
    Ok(magnitudes(net, &tape))
}

pub fn penalty(net: &KanNetwork, xs: &[Vec<f64>]) -> Result<Penalty, KanError> {
    let tape = record(net, xs)?;
    let mags = magnitudes(net, &tape);
    Ok(Penalty {
        l1: mags.iter().flatten().sum(),
        entropy: mags.iter().map(|m| entropy_with_grad(m).0).sum(),
    })
}

/// `rmse + λ·(l1 + entropy)`.
pub fn regularized_loss(net: &KanNetwork, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> Result<f64, KanError> {
    check_batch(net, xs, ys)?;
    if lambda < 0.0 {
        return Err(KanError::InvalidArg(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let rmse = batch_rmse_loss(net, xs, ys)?;
    if lambda == 0.0 {
        return Ok(rmse);
    }
    Ok(rmse + lambda * penalty(net, xs)?.total())
}

/// Accumulates `adj·∂ψ/∂θ` into `g` and returns `∂ψ/∂x`.
fn edge_backward(e: &EdgeActivation, x: f64, adj: f64, g: &mut [f64]) -> f64 {
    match &e.lock {
        Some(l) => {
            let u = l.a * x + l.b;
            let fu = l.candidate.apply(u);
            let du = l.candidate.apply_derivative(u);
            g[0] += adj * l.c * du * x;
            g[1] += adj * l.c * du;
            g[2] += adj * fu;
            g[3] += adj;
            l.c * du * l.a
        }
        None => {
            let (first, vals, ders) = e.grid.basis_local_with_derivative(x);
            let c = &e.coeffs.values;
            let mut s = 0.0;
            let mut ds = 0.0;
            for (w, (v, d)) in vals.iter().zip(&ders).enumerate() {
                s += c[first + w] * v;
                ds += c[first + w] * d;
                g[2 + first + w] += adj * e.w_c * v;
            }
            g[0] += adj * silu(x);
            g[1] += adj * s;
            e.w_b * silu_derivative(x) + e.w_c * ds
        }
    }
}

/// Regularized loss and its gradient in [`KanNetwork::params`] order.
pub fn loss_and_gradient(
    net: &KanNetwork,
    xs: &[Vec<f64>],
    ys: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>), KanError> {
    check_batch(net, xs, ys)?;
    if lambda < 0.0 {
        return Err(KanError::InvalidArg(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let tape = record(net, xs)?;
    let n = ys.len() as f64;
    let (rmse, residuals) = rmse_of(&tape, ys);

    // per-edge weight on sign(ψ) from the penalty
    let mut loss = rmse;
    let mut pen: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
    if lambda > 0.0 {
        for m in magnitudes(net, &tape) {
            let (h, dh) = entropy_with_grad(&m);
            loss += lambda * (m.iter().sum::<f64>() + h);
            pen.push(dh.iter().map(|d| lambda * (1.0 + d) / n).collect());
        }
    }

    let mut offsets = Vec::with_capacity(net.edge_count());
    let mut off = 0;
    for e in net.layers.iter().flat_map(|l| &l.edges) {
        offsets.push(off);
        off += e.param_count();
    }
    let mut grad = vec![0.0; off];
    let out_scale = if rmse > 0.0 { 1.0 / (n * rmse) } else { 0.0 };

    for s in 0..ys.len() {
        let mut adj = vec![residuals[s] * out_scale];
        let mut base = net.edge_count();
        for l in (0..net.layers.len()).rev() {
            let layer = &net.layers[l];
            base -= layer.edges.len();
            let x = &tape.nodes[s][l];
            let mut adj_in = vec![0.0; layer.in_dim];
            for j in 0..layer.out_dim {
                for i in 0..layer.in_dim {
                    let k = j * layer.in_dim + i;
                    let mut a = adj[j];
                    if lambda > 0.0 {
                        let p = tape.psi[s][l][k];
                        let sign = if p > 0.0 {
                            1.0
                        } else if p < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        a += pen[l][k] * sign;
                    }
                    if a == 0.0 {
                        continue;
                    }
                    let e = layer.edge(j, i);
                    let o = offsets[base + k];
                    adj_in[i] += a * edge_backward(e, x[i], a, &mut grad[o..o + e.param_count()]);
                }
            }
            adj = adj_in;
        }
    }
    Ok((loss, grad))
}

pub fn gradient(net: &KanNetwork, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> Result<Vec<f64>, KanError> {
    loss_and_gradient(net, xs, ys, lambda).map(|(_, g)| g)
}

/// Full-batch BFGS on the regularized loss over every parameter. Grids are
/// first rescaled to the data if the network has not seen any yet.
pub fn train(
    net: &KanNetwork,
    xs: &[Vec<f64>],
    ys: &[f64],
    lambda: f64,
    opts: &OptimOptions,
) -> Result<(KanNetwork, OptimResult), KanError> {
    check_batch(net, xs, ys)?;
    let mut net = net.clone();
    if !net.grids_fitted {
        net.fit_grids_to_data(xs)?;
    }
    let template = net.clone();
    let objective = |p: &[f64]| {
        let mut trial = template.clone();
        if trial.set_params(p).is_err() {
            return (f64::INFINITY, vec![0.0; p.len()]);
        }
        match loss_and_gradient(&trial, xs, ys, lambda) {
            Ok(v) => v,
            Err(_) => (f64::INFINITY, vec![0.0; p.len()]),
        }
    };
    let res = bfgs_minimize_fg(objective, &net.params(), opts)?;
    net.set_params(&res.x_star)?;
    Ok((net, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::{init_network, SymbolicLock};
    use crate::symbolic::builtin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys = xs.iter().map(|x| x.iter().map(|v| v.sin()).sum()).collect();
        (xs, ys)
    }

    fn randomized(shape: &[usize], seed: u64) -> KanNetwork {
        let mut net = init_network(shape, 5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for e in net.layers.iter_mut().flat_map(|l| &mut l.edges) {
            e.w_b = rng.random_range(-1.5..1.5);
            e.w_c = rng.random_range(-1.5..1.5);
            e.coeffs.values.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        }
        net
    }

    fn fd_check(net: &KanNetwork, xs: &[Vec<f64>], ys: &[f64], lambda: f64) {
        let g = gradient(net, xs, ys, lambda).unwrap();
        let p = net.params();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut q = net.clone();
            let mut pp = p.clone();
            pp[k] += h;
            q.set_params(&pp).unwrap();
            let fp = regularized_loss(&q, xs, ys, lambda).unwrap();
            pp[k] -= 2.0 * h;
            q.set_params(&pp).unwrap();
            let fm = regularized_loss(&q, xs, ys, lambda).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            // central differences carry ~1e-11 absolute rounding noise on an
            // O(1) loss, which dominates the relative error of tiny components
            let ok = (fd - g[k]).abs() < 1e-5 * g[k].abs() + 1e-10;
            assert!(ok, "param {k}: analytic {} vs fd {fd} (shape {:?}, λ {lambda})", g[k], net.shape);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (t, shape) in [vec![1, 1], vec![1, 2, 1], vec![1, 3, 3, 1]].iter().enumerate() {
            let net = randomized(shape, t as u64);
            let (xs, ys) = batch(16, 1, t as u64);
            fd_check(&net, &xs, &ys, 0.0);
            fd_check(&net, &xs, &ys, 0.05);
        }
    }

    #[test]
    fn gradient_with_locked_edges() {
        let mut net = randomized(&[2, 2, 1], 4);
        net.layers[0].edges[1].lock = Some(SymbolicLock {
            candidate: builtin("tanh").unwrap(),
            a: 1.3,
            b: -0.2,
            c: 0.7,
            d: 0.1,
        });
        net.layers[1].edges[0].lock = Some(SymbolicLock {
            candidate: builtin("sin").unwrap(),
            a: 0.8,
            b: 0.3,
            c: -1.1,
            d: 0.4,
        });
        let (xs, ys) = batch(20, 2, 8);
        fd_check(&net, &xs, &ys, 0.0);
        fd_check(&net, &xs, &ys, 0.02);
    }

    #[test]
    fn rmse_examples() {
        let mut net = init_network(&[1, 1], 3, 0).unwrap();
        net.layers[0].edges[0].lock = Some(SymbolicLock {
            candidate: builtin("x").unwrap(),
            a: 1.0,
            b: 0.0,
            c: 1.0,
            d: 0.0,
        });
        let xs = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(batch_rmse_loss(&net, &xs, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(batch_rmse_loss(&net, &xs[..2], &[0.0, 3.0]).unwrap(), 1.0);
        let r = batch_rmse_loss(&net, &xs, &[0.0, 0.0, 0.0]).unwrap();
        assert!((r - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(batch_rmse_loss(&net, &xs, &[1.0]).is_err());
    }

    #[test]
    fn regularization_examples() {
        let net = randomized(&[1, 1], 1);
        let (xs, ys) = batch(30, 1, 2);
        assert_eq!(regularized_loss(&net, &xs, &ys, 0.0).unwrap(), batch_rmse_loss(&net, &xs, &ys).unwrap());
        assert_eq!(penalty(&net, &xs).unwrap().entropy, 0.0);

        let net = randomized(&[1, 2, 1], 3);
        let mut doubled = net.clone();
        // scaling the last layer doubles its edge outputs only
        for e in &mut doubled.layers[1].edges {
            e.w_b *= 2.0;
            e.w_c *= 2.0;
        }
        let t = record(&net, &xs).unwrap();
        let t2 = record(&doubled, &xs).unwrap();
        let (m, m2) = (magnitudes(&net, &t), magnitudes(&doubled, &t2));
        for (a, b) in m[1].iter().zip(&m2[1]) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let h: f64 = m.iter().map(|v| entropy_with_grad(v).0).sum();
        let h2: f64 = m2.iter().map(|v| entropy_with_grad(v).0).sum();
        assert!((h - h2).abs() < 1e-12, "entropy is scale-free");
        let p = penalty(&doubled, &xs).unwrap();
        assert!((p.l1 - (m2[0].iter().sum::<f64>() + m2[1].iter().sum::<f64>())).abs() < 1e-12);
    }

    #[test]
    fn zero_network_has_zero_rmse_gradient() {
        let mut net = init_network(&[1, 2, 1], 4, 0).unwrap();
        for e in net.layers.iter_mut().flat_map(|l| &mut l.edges) {
            e.w_b = 0.0;
            e.w_c = 0.0;
        }
        let (xs, _) = batch(10, 1, 0);
        let g = gradient(&net, &xs, &vec![0.0; 10], 0.0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lambda_only_adds_the_penalty_gradient() {
        let net = randomized(&[1, 2, 1], 6);
        let (xs, ys) = batch(25, 1, 6);
        let g0 = gradient(&net, &xs, &ys, 0.0).unwrap();
        let g1 = gradient(&net, &xs, &ys, 0.1).unwrap();
        let g2 = gradient(&net, &xs, &ys, 0.2).unwrap();
        for k in 0..g0.len() {
            // linear in λ
            assert!(((g2[k] - g0[k]) - 2.0 * (g1[k] - g0[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let net = init_network(&[1, 1], 5, 0).unwrap();
        let xs: Vec<Vec<f64>> = (0..60).map(|i| vec![0.2 + 0.08 * i as f64]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.39 - 0.34 * (1.42 * x[0] - 0.82).tanh()).collect();
        let before = {
            let mut n = net.clone();
            n.fit_grids_to_data(&xs).unwrap();
            batch_rmse_loss(&n, &xs, &ys).unwrap()
        };
        let (trained, res) = train(&net, &xs, &ys, 0.0, &OptimOptions::default()).unwrap();
        let after = batch_rmse_loss(&trained, &xs, &ys).unwrap();
        assert!(after < 1e-3 && after < before, "{before} -> {after} ({:?})", res.status);
    }
}
