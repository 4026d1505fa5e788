//! Full-batch BFGS with a strong-Wolfe line search, plus the affine-wrapped
//! curve fit `y ≈ c·f(a·x + b) + d` used for symbolic snapping.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective or gradient is not finite at the starting point")]
    NonFiniteObjective,
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("no (a, b) grid point keeps the function inside its domain ({skipped} skipped)")]
    NoValidCandidate { skipped: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Infinity-norm gradient tolerance.
    pub grad_tol: f64,
    pub f_rel_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-8,
            f_rel_tol: 1e-12,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 40,
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = 0.0 < self.wolfe_c1
            && self.wolfe_c1 < self.wolfe_c2
            && self.wolfe_c2 < 1.0
            && self.grad_tol > 0.0
            && self.f_rel_tol > 0.0
            && self.max_line_search_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidOptions(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimStatus {
    ConvergedGrad,
    ConvergedF,
    MaxIters,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub iterations: usize,
    pub status: OptimStatus,
}

/// Minimizes `objective` from `x0` using separate value and gradient callbacks.
pub fn bfgs_minimize<F, G>(
    objective: F,
    gradient: G,
    x0: &[f64],
    opts: &OptimOptions,
) -> Result<OptimResult, OptimError>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    bfgs_minimize_fg(|x| (objective(x), gradient(x)), x0, opts)
}

/// Same as [`bfgs_minimize`] with a fused value-and-gradient callback, which
/// is what the line search needs at every trial point anyway.
pub fn bfgs_minimize_fg<FG>(fg: FG, x0: &[f64], opts: &OptimOptions) -> Result<OptimResult, OptimError>
where
    FG: Fn(&[f64]) -> (f64, Vec<f64>),
{
    opts.validate()?;
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g0) = fg(x0);
    if !f.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteObjective);
    }
    let mut g = DVector::from_vec(g0);
    let done = |x: &DVector<f64>, f: f64, iterations, status| OptimResult {
        x_star: x.iter().copied().collect(),
        f_star: f,
        iterations,
        status,
    };
    if n == 0 || g.amax() <= opts.grad_tol {
        return Ok(done(&x, f, 0, OptimStatus::ConvergedGrad));
    }

    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut reset_once = false;
    for iter in 1..=opts.max_iters {
        let mut p = -(&h * &g);
        let mut slope = p.dot(&g);
        if !(slope < 0.0) {
            // lost descent direction; fall back to steepest descent
            h = DMatrix::identity(n, n);
            scaled = false;
            p = -g.clone();
            slope = p.dot(&g);
        }
        let alpha0 = if scaled { 1.0 } else { (1.0 / g.norm()).min(1.0) };
        let step = line_search(&fg, &x, f, slope, &p, alpha0, opts);
        let (x_new, f_new, g_new, wolfe_ok) = match step {
            Some(s) => s,
            None => {
                if !reset_once && scaled {
                    reset_once = true;
                    h = DMatrix::identity(n, n);
                    scaled = false;
                    continue;
                }
                return Ok(done(&x, f, iter - 1, OptimStatus::LineSearchFailure));
            }
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let f_prev = f;
        x = x_new;
        f = f_new;
        g = g_new;

        if g.amax() <= opts.grad_tol {
            return Ok(done(&x, f, iter, OptimStatus::ConvergedGrad));
        }
        let scale = f_prev.abs().max(f.abs());
        if (f_prev - f).abs() <= opts.f_rel_tol * scale {
            return Ok(done(&x, f, iter, OptimStatus::ConvergedF));
        }

        let sy = s.dot(&y);
        if wolfe_ok && sy > 1e-10 * s.norm() * y.norm() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(s·(Hy)ᵀ + (Hy)·sᵀ) + (ρ²·yᵀHy + ρ)·s·sᵀ
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            h = (&h + h.transpose()) * 0.5;
            if h.clone().cholesky().is_none() {
                // rounding on ill-conditioned problems; restart from the scaled identity
                log::debug!("inverse Hessian lost positive definiteness, resetting");
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
        }
    }
    Ok(done(&x, f, opts.max_iters, OptimStatus::MaxIters))
}

struct Trial {
    alpha: f64,
    f: f64,
    slope: f64,
    x: DVector<f64>,
    g: DVector<f64>,
}

/// Strong-Wolfe line search (bracketing then zoom with cubic interpolation).
/// Returns the accepted point and whether the Wolfe conditions hold; when
/// they do not, the best trial with a strict decrease is returned instead.
fn line_search<FG>(
    fg: &FG,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    p: &DVector<f64>,
    alpha0: f64,
    opts: &OptimOptions,
) -> Option<(DVector<f64>, f64, DVector<f64>, bool)>
where
    FG: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let c1 = opts.wolfe_c1;
    let c2 = opts.wolfe_c2;
    let mut evals = 0usize;
    let mut best: Option<Trial> = None;
    let eval = |alpha: f64, evals: &mut usize, best: &mut Option<Trial>| -> Trial {
        *evals += 1;
        let xt = x + p * alpha;
        let (ft, gt) = fg(xt.as_slice());
        let gt = DVector::from_vec(gt);
        let finite = ft.is_finite() && gt.iter().all(|v| v.is_finite());
        let trial = Trial {
            alpha,
            f: if finite { ft } else { f64::INFINITY },
            slope: if finite { gt.dot(p) } else { f64::NAN },
            x: xt,
            g: gt,
        };
        if trial.f < f0 && best.as_ref().map_or(true, |b| trial.f < b.f) {
            *best = Some(Trial {
                alpha: trial.alpha,
                f: trial.f,
                slope: trial.slope,
                x: trial.x.clone(),
                g: trial.g.clone(),
            });
        }
        trial
    };
    let accept = |t: Trial| Some((t.x, t.f, t.g, true));

    let origin = Trial {
        alpha: 0.0,
        f: f0,
        slope: slope0,
        x: x.clone(),
        g: DVector::zeros(0),
    };
    let mut prev = origin;
    let mut alpha = alpha0;
    let (mut lo, mut hi);
    loop {
        let t = eval(alpha, &mut evals, &mut best);
        if !t.f.is_finite() || t.f > f0 + c1 * alpha * slope0 || (prev.alpha > 0.0 && t.f >= prev.f) {
            lo = prev;
            hi = t;
            break;
        }
        if t.slope.abs() <= -c2 * slope0 {
            return accept(t);
        }
        if t.slope >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        if evals >= opts.max_line_search_steps {
            return best.map(|b| (b.x, b.f, b.g, false));
        }
        prev = t;
        alpha *= 2.0;
    }

    // zoom: lo satisfies sufficient decrease with the lowest value so far
    while evals < opts.max_line_search_steps {
        let a = interpolate(&lo, &hi);
        let t = eval(a, &mut evals, &mut best);
        if !t.f.is_finite() || t.f > f0 + c1 * a * slope0 || t.f >= lo.f {
            hi = t;
        } else {
            if t.slope.abs() <= -c2 * slope0 {
                return accept(t);
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
        if (hi.alpha - lo.alpha).abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
            break;
        }
    }
    best.map(|b| (b.x, b.f, b.g, false))
}

/// Safeguarded cubic interpolation inside the bracket, bisection fallback.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let width = right - left;
    let bisect = 0.5 * (a + b);
    if !hi.f.is_finite() || !hi.slope.is_finite() || !lo.slope.is_finite() {
        return bisect;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if !(disc >= 0.0) {
        return bisect;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = hi.slope - lo.slope + 2.0 * d2;
    if denom == 0.0 || !denom.is_finite() {
        return bisect;
    }
    let c = b - (b - a) * (hi.slope + d2 - d1) / denom;
    let margin = 0.1 * width;
    if !c.is_finite() || c < left + margin || c > right - margin {
        // cubic minimizer too close to an end (or outside): clamp
        if c.is_finite() && c >= left && c <= right {
            return c.clamp(left + margin, right - margin);
        }
        return bisect;
    }
    c
}

/// A unary function that can be wrapped as `c·f(a·x + b) + d`.
pub trait UnaryFn {
    fn eval(&self, u: f64) -> f64;

    fn derivative(&self, u: f64) -> f64 {
        let h = 1e-6 * (1.0 + u.abs());
        (self.eval(u + h) - self.eval(u - h)) / (2.0 * h)
    }

    fn in_domain(&self, u: f64) -> bool {
        self.eval(u).is_finite()
    }
}

/// Adapter letting a plain closure act as a [`UnaryFn`].
pub struct Plain<F>(pub F);

impl<F: Fn(f64) -> f64> UnaryFn for Plain<F> {
    fn eval(&self, u: f64) -> f64 {
        (self.0)(u)
    }
}

/// Coarse `(a, b)` search grid for [`fit_affine_wrap`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineSearch {
    pub a_min: f64,
    pub a_max: f64,
    /// Log-spaced magnitudes; each is tried with both signs when `signed`.
    pub a_points: usize,
    pub signed: bool,
    pub b_min: f64,
    pub b_max: f64,
    pub b_points: usize,
    /// Samples used to score the coarse grid (sorted-by-x stride). The
    /// polish and the reported R² always use every sample.
    pub coarse_samples: usize,
    pub polish: OptimOptions,
}

impl Default for AffineSearch {
    fn default() -> Self {
        Self {
            a_min: 0.1,
            a_max: 10.0,
            a_points: 41,
            signed: true,
            b_min: -10.0,
            b_max: 10.0,
            b_points: 41,
            coarse_samples: 48,
            polish: OptimOptions {
                max_iters: 100,
                grad_tol: 1e-12,
                ..OptimOptions::default()
            },
        }
    }
}

impl AffineSearch {
    pub fn a_values(&self) -> Vec<f64> {
        let mags: Vec<f64> = if self.a_points <= 1 {
            vec![self.a_min]
        } else {
            let (l0, l1) = (self.a_min.ln(), self.a_max.ln());
            (0..self.a_points)
                .map(|i| (l0 + (l1 - l0) * i as f64 / (self.a_points - 1) as f64).exp())
                .collect()
        };
        let mut out = mags.clone();
        if self.signed {
            out.extend(mags.iter().map(|m| -m));
        }
        out
    }

    pub fn b_values(&self) -> Vec<f64> {
        if self.b_points <= 1 {
            return vec![0.5 * (self.b_min + self.b_max)];
        }
        (0..self.b_points)
            .map(|i| self.b_min + (self.b_max - self.b_min) * i as f64 / (self.b_points - 1) as f64)
            .collect()
    }

    /// Spacing of the coarse `b` grid.
    pub fn b_step(&self) -> f64 {
        if self.b_points <= 1 {
            (self.b_max - self.b_min).abs().max(1.0)
        } else {
            (self.b_max - self.b_min) / (self.b_points - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r2: f64,
    /// Grid points skipped because `a·x + b` left the domain.
    pub skipped: usize,
}

/// Population variance below which a series counts as constant.
pub const ZERO_VARIANCE: f64 = 1e-12;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Closed-form `(c, d)` and residual sum of squares for fixed `f(a·x + b)` values.
fn linear_fit(fv: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = fv.len() as f64;
    let fm = fv.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sff, mut sfy, mut syy) = (0.0, 0.0, 0.0);
    for (f, y) in fv.iter().zip(ys) {
        let (df, dy) = (f - fm, y - ym);
        sff += df * df;
        sfy += df * dy;
        syy += dy * dy;
    }
    if !(sff > ZERO_VARIANCE * n * (1.0 + fm * fm)) {
        return (0.0, ym, syy);
    }
    let c = sfy / sff;
    let d = ym - c * fm;
    let ss = (syy - c * sfy).max(0.0);
    (c, d, ss)
}

/// Residual sum of squares of the best `c·f(a·x + b) + d` on the coarse
/// subsample, in one pass against centered targets `yc` (Σ yc = 0, Σ yc² =
/// `syy`). Values are shifted by the first one to limit cancellation. Same
/// closed form as [`linear_fit`]; `None` if any point leaves the domain.
fn coarse_ss<F: UnaryFn + ?Sized>(f: &F, xs: &[f64], yc: &[f64], syy: f64, a: f64, b: f64) -> Option<f64> {
    let n = xs.len() as f64;
    let mut f0 = f64::NAN;
    let (mut s1, mut s2, mut sfy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(yc) {
        let u = a * x + b;
        if !f.in_domain(u) {
            return None;
        }
        let v = f.eval(u);
        if !v.is_finite() {
            return None;
        }
        if f0.is_nan() {
            f0 = v;
        }
        let dv = v - f0;
        s1 += dv;
        s2 += dv * dv;
        sfy += dv * y;
    }
    let fm = f0 + s1 / n;
    let sff = s2 - s1 * s1 / n;
    if !(sff > ZERO_VARIANCE * n * (1.0 + fm * fm)) {
        return Some(syy);
    }
    Some((syy - sfy * sfy / sff).max(0.0))
}

fn wrapped_values<F: UnaryFn + ?Sized>(f: &F, xs: &[f64], a: f64, b: f64, out: &mut Vec<f64>) -> bool {
    out.clear();
    for &x in xs {
        let u = a * x + b;
        if !f.in_domain(u) {
            return false;
        }
        let v = f.eval(u);
        if !v.is_finite() {
            return false;
        }
        out.push(v);
    }
    true
}

/// Fits `ys ≈ c·f(a·xs + b) + d`: coarse `(a, b)` grid with closed-form
/// `(c, d)`, then a joint BFGS polish of all four parameters.
pub fn fit_affine_wrap<F: UnaryFn + ?Sized>(
    f: &F,
    xs: &[f64],
    ys: &[f64],
    search: &AffineSearch,
) -> Result<AffineFit, OptimError> {
    if xs.len() != ys.len() {
        return Err(OptimError::InvalidArg(format!(
            "xs has {} samples but ys has {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 4 {
        return Err(OptimError::InvalidArg("need at least 4 samples".into()));
    }
    let n = xs.len();
    let ym = mean(ys);
    let sst: f64 = ys.iter().map(|y| (y - ym) * (y - ym)).sum();
    if sst / (n as f64) < ZERO_VARIANCE {
        return Ok(AffineFit {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: ym,
            r2: 1.0,
            skipped: 0,
        });
    }

    let m = search.coarse_samples.max(4);
    let (cx, cy): (Vec<f64>, Vec<f64>) = if n <= m {
        (xs.to_vec(), ys.to_vec())
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]).then(i.cmp(&j)));
        (0..m)
            .map(|k| {
                let idx = order[(k * (n - 1) + (m - 1) / 2) / (m - 1)];
                (xs[idx], ys[idx])
            })
            .unzip()
    };
    let cym = mean(&cy);
    let cyc: Vec<f64> = cy.iter().map(|y| y - cym).collect();
    let csst: f64 = cyc.iter().map(|y| y * y).sum();

    let mut scored: Vec<(f64, f64, f64)> = Vec::new();
    let mut skipped = 0usize;
    for &a in &search.a_values() {
        for &b in &search.b_values() {
            let Some(ss) = coarse_ss(f, &cx, &cyc, csst, a, b) else {
                skipped += 1;
                continue;
            };
            let score = if csst > 0.0 { 1.0 - ss / csst } else { 0.0 };
            scored.push((score, a, b));
        }
    }
    if scored.is_empty() {
        return Err(OptimError::NoValidCandidate { skipped });
    }
    // stable: equal scores keep grid order (positive a first)
    scored.sort_by(|p, q| q.0.total_cmp(&p.0));

    // the subsample can blur features such as jump locations, so the best
    // few coarse points are re-scored on the full data
    let mut start: Option<(f64, f64, f64, f64, f64)> = None;
    let mut full = Vec::with_capacity(n);
    let mut rescored = 0;
    for &(_, a, b) in &scored {
        if rescored == RESCORE_TOP {
            break;
        }
        if !wrapped_values(f, xs, a, b, &mut full) {
            skipped += 1;
            continue;
        }
        rescored += 1;
        let (c, d, ss) = linear_fit(&full, ys);
        if start.is_none_or(|s| ss < s.4) {
            start = Some((a, b, c, d, ss));
        }
    }
    let (a0, b0, c0, d0, ss0) = start.ok_or(OptimError::NoValidCandidate { skipped })?;

    let nf = n as f64;
    let objective = |p: &[f64]| -> (f64, Vec<f64>) {
        let (a, b, c, d) = (p[0], p[1], p[2], p[3]);
        let mut loss = 0.0;
        let mut g = vec![0.0; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let u = a * x + b;
            if !f.in_domain(u) {
                return (f64::INFINITY, vec![0.0; 4]);
            }
            let fu = f.eval(u);
            let r = c * fu + d - y;
            let dfu = f.derivative(u);
            loss += r * r;
            g[0] += 2.0 * r * c * dfu * x;
            g[1] += 2.0 * r * c * dfu;
            g[2] += 2.0 * r * fu;
            g[3] += 2.0 * r;
        }
        g.iter_mut().for_each(|v| *v /= nf);
        (loss / nf, g)
    };
    let mut best = (a0, b0, c0, d0, ss0);
    if let Ok(res) = bfgs_minimize_fg(objective, &[a0, b0, c0, d0], &search.polish) {
        let ss = res.f_star * nf;
        if res.f_star.is_finite() && ss < best.4 {
            let p = &res.x_star;
            best = (p[0], p[1], p[2], p[3], ss);
        }
    }
    if 1.0 - best.4 / sst < 1.0 - PATTERN_TRIGGER {
        best = pattern_search(f, xs, ys, best, search.b_step());
    }
    let (a, b, c, d, ss) = best;
    Ok(AffineFit {
        a,
        b,
        c,
        d,
        r2: 1.0 - ss / sst,
        skipped,
    })
}

/// Derivative-free compass search over `(a, b)` with `(c, d)` solved in
/// closed form; handles candidates whose gradient carries no information
/// (steps) or where the polish stalled.
fn pattern_search<F: UnaryFn + ?Sized>(
    f: &F,
    xs: &[f64],
    ys: &[f64],
    start: (f64, f64, f64, f64, f64),
    b_step: f64,
) -> (f64, f64, f64, f64, f64) {
    let mut best = start;
    let mut buf = Vec::with_capacity(xs.len());
    let mut da = 0.25 * best.0.abs().max(1e-3);
    let mut db = 0.5 * b_step;
    for _ in 0..PATTERN_HALVINGS {
        let mut moved = true;
        let mut moves = 0;
        while moved && moves < 64 {
            moved = false;
            moves += 1;
            for (sa, sb) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                let (a, b) = (best.0 + sa * da, best.1 + sb * db);
                if a == 0.0 || !wrapped_values(f, xs, a, b, &mut buf) {
                    continue;
                }
                let (c, d, ss) = linear_fit(&buf, ys);
                if ss < best.4 * (1.0 - 1e-12) {
                    best = (a, b, c, d, ss);
                    moved = true;
                }
            }
        }
        da *= 0.5;
        db *= 0.5;
    }
    best
}

const RESCORE_TOP: usize = 8;
const PATTERN_HALVINGS: usize = 30;
/// Fits already this good skip the compass search.
const PATTERN_TRIGGER: f64 = 1e-10;

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(t: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |x: &[f64]| {
            let f = x.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum();
            let g = x.iter().zip(&t).map(|(a, b)| 2.0 * (a - b)).collect();
            (f, g)
        }
    }

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn quadratic_converges_fast() {
        let t = vec![1.0, -2.0, 3.5, 0.25, 10.0];
        let res = bfgs_minimize_fg(quadratic(t.clone()), &[0.0; 5], &OptimOptions::default()).unwrap();
        assert!(res.iterations <= t.len() + 2, "{}", res.iterations);
        for (x, want) in res.x_star.iter().zip(&t) {
            assert!((x - want).abs() < 1e-8);
        }
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let res = bfgs_minimize_fg(rosenbrock, &[-1.2, 1.0], &OptimOptions::default()).unwrap();
        assert!((res.x_star[0] - 1.0).abs() < 1e-6, "{res:?}");
        assert!((res.x_star[1] - 1.0).abs() < 1e-6, "{res:?}");
    }

    #[test]
    fn optimum_returns_immediately() {
        let res = bfgs_minimize_fg(quadratic(vec![2.0, 3.0]), &[2.0, 3.0], &OptimOptions::default()).unwrap();
        assert_eq!(res.status, OptimStatus::ConvergedGrad);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.x_star, vec![2.0, 3.0]);
    }

    #[test]
    fn separate_callbacks() {
        let res = bfgs_minimize(
            |x| (x[0] - 3.0).powi(2),
            |x| vec![2.0 * (x[0] - 3.0)],
            &[0.0],
            &OptimOptions::default(),
        )
        .unwrap();
        assert!((res.x_star[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let err = bfgs_minimize_fg(|_| (f64::NAN, vec![0.0]), &[1.0], &OptimOptions::default());
        assert_eq!(err, Err(OptimError::NonFiniteObjective));
    }

    #[test]
    fn invalid_wolfe_constants() {
        let opts = OptimOptions {
            wolfe_c1: 0.9,
            wolfe_c2: 0.1,
            ..OptimOptions::default()
        };
        assert!(bfgs_minimize_fg(quadratic(vec![1.0]), &[0.0], &opts).is_err());
    }

    #[test]
    fn iterates_never_increase() {
        use std::cell::RefCell;
        let accepted = RefCell::new(Vec::new());
        let opts = OptimOptions {
            max_iters: 1,
            ..OptimOptions::default()
        };
        let mut x = vec![-1.2, 1.0];
        let mut f_prev = rosenbrock(&x).0;
        for _ in 0..60 {
            let res = bfgs_minimize_fg(rosenbrock, &x, &opts).unwrap();
            assert!(res.f_star <= f_prev);
            f_prev = res.f_star;
            x = res.x_star;
            accepted.borrow_mut().push(f_prev);
        }
        assert!(f_prev < rosenbrock(&[-1.2, 1.0]).0);
    }

    #[test]
    fn domain_walls_are_handled() {
        // log barrier: infinite outside x > 0
        let fg = |x: &[f64]| {
            if x[0] <= 0.0 {
                (f64::INFINITY, vec![0.0])
            } else {
                (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
            }
        };
        let res = bfgs_minimize_fg(fg, &[5.0], &OptimOptions::default()).unwrap();
        assert!((res.x_star[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_results() {
        let a = bfgs_minimize_fg(rosenbrock, &[-1.2, 1.0], &OptimOptions::default()).unwrap();
        let b = bfgs_minimize_fg(rosenbrock, &[-1.2, 1.0], &OptimOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn affine_tanh_recovery() {
        let xs: Vec<f64> = (0..200).map(|i| -1.0 + 2.5 * i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * (3.0 * x - 1.0).tanh() + 0.5).collect();
        let fit = fit_affine_wrap(&Plain(f64::tanh), &xs, &ys, &AffineSearch::default()).unwrap();
        assert!((fit.a - 3.0).abs() < 1e-4, "{fit:?}");
        assert!((fit.b + 1.0).abs() < 1e-4, "{fit:?}");
        assert!((fit.c - 2.0).abs() < 1e-4, "{fit:?}");
        assert!((fit.d - 0.5).abs() < 1e-4, "{fit:?}");
        assert!(fit.r2 >= 1.0 - 1e-9);
    }

    #[test]
    fn affine_constant_data() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let fit = fit_affine_wrap(&Plain(f64::tanh), &xs, &vec![4.2; 20], &AffineSearch::default()).unwrap();
        assert_eq!(fit.c, 0.0);
        assert!((fit.d - 4.2).abs() < 1e-12);
        assert_eq!(fit.r2, 1.0);
    }

    struct Log;
    impl UnaryFn for Log {
        fn eval(&self, u: f64) -> f64 {
            u.ln()
        }
        fn in_domain(&self, u: f64) -> bool {
            u > 0.0
        }
    }

    #[test]
    fn affine_empty_feasible_set() {
        // every a·x + b ≤ 0 on the default grid
        let xs = vec![-1000.0, -900.0, -800.0, -700.0, 800.0];
        let ys = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let search = AffineSearch {
            signed: false,
            ..AffineSearch::default()
        };
        let err = fit_affine_wrap(&Log, &xs, &ys, &search).unwrap_err();
        assert!(matches!(err, OptimError::NoValidCandidate { skipped } if skipped == 41 * 41));
    }

    #[test]
    fn affine_length_checks() {
        assert!(fit_affine_wrap(&Plain(f64::tanh), &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &AffineSearch::default()).is_err());
        assert!(fit_affine_wrap(&Plain(f64::tanh), &[1.0; 5], &[1.0; 4], &AffineSearch::default()).is_err());
    }

    #[test]
    fn grid_shapes() {
        let s = AffineSearch::default();
        let a = s.a_values();
        assert_eq!(a.len(), 82);
        assert!((a[0] - 0.1).abs() < 1e-12 && (a[40] - 10.0).abs() < 1e-9);
        assert!(a[41] < 0.0);
        let b = s.b_values();
        assert_eq!(b.len(), 41);
        assert_eq!(b[0], -10.0);
        assert_eq!(b[40], 10.0);
    }
}
