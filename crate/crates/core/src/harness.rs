//! Splits, the cross-validated grid search over KAN hyperparameters, the
//! five-step fit procedure, reports and plot-data export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydro::{HydroError, Samples, SynthSource, Target};
use crate::kan::{
    extract_formula, init_network, prune, refine_affine, snap_all, train, EdgeIndex, KanError, KanNetwork,
    DEFAULT_LAMBDA, DEFAULT_PRUNE_THRESHOLD,
};
use crate::metrics::{r_squared, MetricSet, MetricsError, PairedSeries};
use crate::optim::{AffineSearch, OptimOptions};
use crate::symbolic::{print_expression, CandidateLibrary, ExpressionTree, SnapResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("every hyperparameter point failed")]
    AllPointsFailed,
    #[error("formula evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Kan(#[from] KanError),
    #[error(transparent)]
    Hydro(#[from] HydroError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HyperPoint {
    pub shape: Vec<usize>,
    pub grid_intervals: usize,
    pub seed: u64,
}

impl std::fmt::Display for HyperPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: Vec<String> = self.shape.iter().map(|v| v.to_string()).collect();
        write!(f, "shape [{}], G {}, seed {}", s.join(","), self.grid_intervals, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearchConfig {
    pub shapes: Vec<Vec<usize>>,
    pub grid_intervals: Vec<usize>,
    pub seeds: Vec<u64>,
    pub lambda: f64,
    /// Relative to the strongest edge.
    pub prune_threshold: f64,
    pub folds: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![vec![1, 1], vec![1, 2, 1], vec![1, 3, 1]],
            grid_intervals: vec![3, 5, 10],
            seeds: vec![0, 1, 2],
            lambda: DEFAULT_LAMBDA,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            folds: 10,
            split_ratio: 0.8,
            split_seed: 0,
        }
    }
}

impl GridSearchConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.shapes.is_empty() || self.grid_intervals.is_empty() || self.seeds.is_empty() {
            return bad("shapes, grid_intervals and seeds must be nonempty");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie strictly between 0 and 1");
        }
        if !(self.lambda >= 0.0) || !(self.prune_threshold >= 0.0) {
            return bad("lambda and prune_threshold must be non-negative");
        }
        Ok(())
    }

    /// Cartesian product in declaration order: shapes, then grid sizes,
    /// then seeds.
    pub fn points(&self) -> Vec<HyperPoint> {
        let mut out = Vec::new();
        for shape in &self.shapes {
            for &g in &self.grid_intervals {
                for &seed in &self.seeds {
                    out.push(HyperPoint { shape: shape.clone(), grid_intervals: g, seed });
                }
            }
        }
        out
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded shuffle of `0..n`; the first ⌈ratio·n⌉ go to training.
pub fn train_test_split(n: usize, ratio: f64, seed: u64) -> Result<Split, HarnessError> {
    if n < 5 {
        return Err(HarnessError::TooSmall(format!("need at least 5 records, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HarnessError::InvalidConfig(format!("split ratio {ratio} not in (0, 1)")));
    }
    // guard against 0.8·300 landing a hair above 240
    let n_train = (ratio * n as f64 - 1e-9).ceil() as usize;
    if n_train == 0 || n_train >= n {
        return Err(HarnessError::TooSmall(format!("ratio {ratio} leaves an empty side for n = {n}")));
    }
    let idx = shuffled(n, seed);
    Ok(Split { train: idx[..n_train].to_vec(), test: idx[n_train..].to_vec() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// `k` folds over a seeded shuffle of `0..n`; the `n mod k` leftover
/// records go one each to the earliest folds.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, HarnessError> {
    if k < 2 {
        return Err(HarnessError::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(HarnessError::TooSmall(format!("{n} records for {k} folds")));
    }
    let idx = shuffled(n, seed);
    let (base, rem) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < rem);
        let validation = idx[start..start + len].to_vec();
        let train = idx[..start].iter().chain(&idx[start + len..]).copied().collect();
        folds.push(Fold { train, validation });
        start += len;
    }
    Ok(folds)
}

/// Fixed knobs of the five-step procedure besides the hyperparameter point.
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub lambda: f64,
    pub prune_threshold: f64,
    pub train: OptimOptions,
    pub refine: OptimOptions,
    pub search: AffineSearch,
    pub library: CandidateLibrary,
}

impl PipelineSettings {
    pub fn from_config(cfg: &GridSearchConfig) -> Self {
        Self {
            lambda: cfg.lambda,
            prune_threshold: cfg.prune_threshold,
            train: OptimOptions::default(),
            refine: OptimOptions::default(),
            search: AffineSearch::default(),
            library: CandidateLibrary::builtin(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub net: KanNetwork,
    pub formula: ExpressionTree,
    pub snaps: Vec<(EdgeIndex, SnapResult)>,
    /// R² of the snapped formula on the validation set.
    pub validation_r2: Option<f64>,
    /// R² of the pruned spline network before snapping.
    pub presnap_r2: Option<f64>,
}

/// Squared Pearson correlation, taking a constant prediction as 0.
fn score(observed: &[f64], predicted: Vec<f64>) -> Result<f64, HarnessError> {
    if predicted.iter().any(|v| !v.is_finite()) {
        return Err(HarnessError::Evaluation("non-finite prediction".into()));
    }
    let s = PairedSeries::new(observed.to_vec(), predicted)?;
    match r_squared(&s) {
        Ok(v) => Ok(v),
        Err(MetricsError::ZeroVariance("simulated")) => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

pub fn formula_predictions(formula: &ExpressionTree, xs: &[f64]) -> Result<Vec<f64>, HarnessError> {
    xs.iter()
        .map(|&x| formula.eval(&[x]).map_err(|e| HarnessError::Evaluation(e.to_string())))
        .collect()
}

/// Train → prune → snap every surviving edge → refine → extract, with an
/// optional validation score.
pub fn run_pipeline(
    train_set: &Samples,
    validation: Option<&Samples>,
    hp: &HyperPoint,
    settings: &PipelineSettings,
) -> Result<PipelineOutcome, HarnessError> {
    if hp.shape.first() != Some(&1) || hp.shape.last() != Some(&1) {
        return Err(HarnessError::InvalidConfig(format!("shape {:?} must map one input to one output", hp.shape)));
    }
    let xs = train_set.rows();
    let net = init_network(&hp.shape, hp.grid_intervals, hp.seed)?;
    let (net, res) = train(&net, &xs, &train_set.y, settings.lambda, &settings.train)?;
    log::debug!("{hp}: trained in {} iterations ({:?})", res.iterations, res.status);
    let net = prune(&net, settings.prune_threshold, &xs)?;
    let presnap_r2 = match validation {
        Some(v) => net.predict(&v.rows()).ok().and_then(|p| score(&v.y, p).ok()),
        None => None,
    };
    let (net, snaps) = snap_all(&net, &settings.library, &xs, &settings.search)?;
    let net = match refine_affine(&net, &xs, &train_set.y, &settings.refine) {
        Ok(r) => r.net,
        Err(KanError::NoLockedEdges) => net,
        Err(e) => return Err(e.into()),
    };
    let formula = extract_formula(&net)?;
    let validation_r2 = match validation {
        Some(v) => Some(score(&v.y, formula_predictions(&formula, &v.x)?)?),
        None => None,
    };
    Ok(PipelineOutcome { net, formula, snaps, validation_r2, presnap_r2 })
}

/// One row of the sweep. `mean_r2` is `None` when any fold failed, which
/// ranks below every finite score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub point: HyperPoint,
    pub fold_r2: Vec<Option<f64>>,
    pub mean_r2: Option<f64>,
    pub presnap_mean_r2: Option<f64>,
    pub error: Option<String>,
}

impl ScoreRow {
    pub fn score(&self) -> f64 {
        self.mean_r2.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub rows: Vec<ScoreRow>,
    pub best: usize,
}

impl GridSearchResult {
    pub fn best_row(&self) -> &ScoreRow {
        &self.rows[self.best]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Cross-validated sweep over every hyperparameter point. Jobs run on a
/// pool of `threads` workers and are merged in Cartesian order, so the
/// thread count never changes the outcome.
pub fn grid_search(
    cfg: &GridSearchConfig,
    train_set: &Samples,
    threads: usize,
) -> Result<GridSearchResult, HarnessError> {
    cfg.validate()?;
    let folds = kfold_split(train_set.len(), cfg.folds, cfg.split_seed.wrapping_add(1))?;
    let settings = PipelineSettings::from_config(cfg);
    let points = cfg.points();
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..folds.len()).map(move |f| (p, f))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let results: Vec<Result<(f64, Option<f64>), String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, f)| {
                let fold = &folds[f];
                let pre = train_set.subset(&fold.train);
                let val = train_set.subset(&fold.validation);
                match run_pipeline(&pre, Some(&val), &points[p], &settings) {
                    Ok(o) => Ok((o.validation_r2.expect("validation given"), o.presnap_r2)),
                    Err(e) => Err(e.to_string()),
                }
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(points.len());
    for (p, point) in points.into_iter().enumerate() {
        let chunk = &results[p * folds.len()..(p + 1) * folds.len()];
        let fold_r2: Vec<Option<f64>> = chunk.iter().map(|r| r.as_ref().ok().map(|v| v.0)).collect();
        let error = chunk.iter().find_map(|r| r.as_ref().err().cloned());
        let mean_r2 = fold_r2.iter().copied().collect::<Option<Vec<f64>>>().map(|v| mean(&v));
        let presnap_mean_r2 = chunk
            .iter()
            .map(|r| r.as_ref().ok().and_then(|v| v.1))
            .collect::<Option<Vec<f64>>>()
            .map(|v| mean(&v));
        if let Some(e) = &error {
            log::warn!("{point}: {e}");
        }
        rows.push(ScoreRow { point, fold_r2, mean_r2, presnap_mean_r2, error });
    }
    let mut best = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(s) = row.mean_r2 {
            // strict comparison keeps the earliest of equal scores
            if best.is_none_or(|b: usize| s > rows[b].score()) {
                best = Some(i);
            }
        }
    }
    let best = best.ok_or(HarnessError::AllPointsFailed)?;
    Ok(GridSearchResult { rows, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeParameters {
    pub edge: EdgeIndex,
    pub function: String,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// Leading candidates from snapping one edge of the final fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSnap {
    pub edge: EdgeIndex,
    pub candidates: Vec<SnapCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapCandidate {
    pub name: String,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub target: Target,
    pub hyperparameters: HyperPoint,
    pub fold_r2: Vec<f64>,
    pub mean_r2: f64,
    pub presnap_mean_r2: Option<f64>,
    /// Full-precision formula.
    pub formula: String,
    /// Four-decimal rendering for reading.
    pub formula_rounded: String,
    /// Non-identity primitives in the formula; 1 means it reduces to a
    /// single edge.
    pub formula_applications: usize,
    pub parameters: Vec<EdgeParameters>,
    /// Top five snap candidates per surviving edge, best first.
    pub snaps: Vec<EdgeSnap>,
    pub train_size: usize,
    pub test_size: usize,
    pub train_metrics: MetricSet,
    pub test_metrics: MetricSet,
    /// Test metrics against the noiseless curve, when the data carries one.
    pub test_metrics_vs_truth: Option<MetricSet>,
    pub score_table: Vec<ScoreRow>,
    pub wall_clock_seconds: f64,
    pub config: GridSearchConfig,
    pub provenance: String,
}

fn metric_set(observed: &[f64], predicted: Vec<f64>) -> Result<MetricSet, HarnessError> {
    Ok(MetricSet::compute(&PairedSeries::new(observed.to_vec(), predicted)?))
}

/// Refits the selected point on the whole training set and scores the
/// resulting formula on both sides of the split.
pub fn finalize(
    search: &GridSearchResult,
    cfg: &GridSearchConfig,
    train_set: &Samples,
    test_set: &Samples,
    target: Target,
    provenance: &str,
) -> Result<(FitReport, KanNetwork), HarnessError> {
    let row = search.best_row();
    let settings = PipelineSettings::from_config(cfg);
    let out = run_pipeline(train_set, None, &row.point, &settings)?;
    let train_pred = formula_predictions(&out.formula, &train_set.x)?;
    let test_pred = formula_predictions(&out.formula, &test_set.x)?;
    let test_metrics_vs_truth = match &test_set.truth {
        Some(t) => Some(metric_set(t, test_pred.clone())?),
        None => None,
    };
    let parameters = out
        .net
        .edge_indices()
        .into_iter()
        .filter_map(|idx| {
            let e = out.net.edge(idx).ok()?;
            let lock = e.lock.as_ref()?;
            (!e.pruned).then(|| EdgeParameters {
                edge: idx,
                function: lock.candidate.name().to_string(),
                a: lock.a,
                b: lock.b,
                c: lock.c,
                d: lock.d,
            })
        })
        .collect();
    let snaps = out
        .snaps
        .iter()
        .map(|(edge, res)| EdgeSnap {
            edge: *edge,
            candidates: res
                .top(5)
                .iter()
                .map(|c| SnapCandidate { name: c.name.clone(), r2: c.r2 })
                .collect(),
        })
        .collect();
    let fold_r2: Vec<f64> = row.fold_r2.iter().map(|v| v.expect("best row has every fold")).collect();
    let report = FitReport {
        target,
        hyperparameters: row.point.clone(),
        mean_r2: mean(&fold_r2),
        fold_r2,
        presnap_mean_r2: row.presnap_mean_r2,
        formula: out.formula.to_string(),
        formula_rounded: print_expression(&out.formula, 4),
        formula_applications: out.formula.application_count(),
        parameters,
        snaps,
        train_size: train_set.len(),
        test_size: test_set.len(),
        train_metrics: metric_set(&train_set.y, train_pred)?,
        test_metrics: metric_set(&test_set.y, test_pred)?,
        test_metrics_vs_truth,
        score_table: search.rows.clone(),
        wall_clock_seconds: 0.0,
        config: cfg.clone(),
        provenance: provenance.to_string(),
    };
    Ok((report, out.net))
}

/// Split, sweep and finalize in one call; the report's wall clock covers
/// all three.
pub fn fit(
    cfg: &GridSearchConfig,
    data: &Samples,
    target: Target,
    threads: usize,
    provenance: &str,
) -> Result<(FitReport, KanNetwork), HarnessError> {
    let start = Instant::now();
    cfg.validate()?;
    let split = train_test_split(data.len(), cfg.split_ratio, cfg.split_seed)?;
    let (tr, te) = (data.subset(&split.train), data.subset(&split.test));
    let search = grid_search(cfg, &tr, threads)?;
    let (mut report, net) = finalize(&search, cfg, &tr, &te, target, provenance)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((report, net))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

impl FitReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::InvalidConfig(e.to_string()))
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| s.push_str(&format!("{k:<22} {v}\n"));
        kv(&mut s, "target", self.target.to_string());
        kv(&mut s, "hyperparameters", self.hyperparameters.to_string());
        kv(&mut s, "mean fold R2", format!("{:.6}", self.mean_r2));
        kv(&mut s, "mean fold R2 (spline)", fmt_opt(self.presnap_mean_r2));
        kv(&mut s, "formula", self.formula_rounded.clone());
        kv(&mut s, "train / test size", format!("{} / {}", self.train_size, self.test_size));
        s.push('\n');
        s.push_str(&format!("{:<10} {:>10} {:>10} {:>10} {:>10}\n", "split", "NSE", "KGE", "RMSE", "R2"));
        let mut row = |name: &str, m: &MetricSet| {
            s.push_str(&format!(
                "{:<10} {:>10} {:>10} {:>10.6} {:>10}\n",
                name,
                fmt_opt(m.nse),
                fmt_opt(m.kge),
                m.rmse,
                fmt_opt(m.r2)
            ))
        };
        row("train", &self.train_metrics);
        row("test", &self.test_metrics);
        if let Some(m) = &self.test_metrics_vs_truth {
            row("test*", m);
        }
        s.push('\n');
        s.push_str(&format!("{:<32} {:>10} {:>10}\n", "point", "mean R2", "spline R2"));
        for r in &self.score_table {
            let mean = r.mean_r2.map_or_else(|| "-inf".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{:<32} {:>10} {:>10}\n", r.point.to_string(), mean, fmt_opt(r.presnap_mean_r2)));
        }
        s.push_str(&format!("\nwall clock {:.2} s\n", self.wall_clock_seconds));
        s
    }
}

/// `lo, lo + step, …` up to and including `hi` (within rounding).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl PhiGrid {
    pub fn points(&self) -> Result<Vec<f64>, HarnessError> {
        if !(self.step > 0.0) || !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(HarnessError::InvalidConfig(format!("bad grid {self:?}")));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| self.min + i as f64 * self.step).collect())
    }
}

/// Writes `phi` plus one column per curve to `out`, and each observation
/// set to `<stem>_<name>.csv` beside it. Returns every path written.
pub fn emit_plot_data(
    curves: &[(String, SynthSource)],
    observations: &[(String, Samples)],
    grid: PhiGrid,
    out: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let phis = grid.points()?;
    let io = |p: &Path, e: csv::Error| HarnessError::Io(format!("{}: {e}", p.display()));
    let mut w = csv::Writer::from_path(out).map_err(|e| io(out, e))?;
    let mut header = vec!["phi".to_string()];
    header.extend(curves.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(|e| io(out, e))?;
    if !curves.is_empty() {
        for &phi in &phis {
            let mut rec = vec![phi.to_string()];
            for (_, c) in curves {
                rec.push(c.eval(phi).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).map_err(|e| io(out, e))?;
        }
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut written = vec![out.to_path_buf()];

    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    for (name, obs) in observations {
        let path = out.with_file_name(format!("{stem}_{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
        w.write_record(["phi", "observed"]).map_err(|e| io(&path, e))?;
        for (x, y) in obs.x.iter().zip(&obs.y) {
            w.write_record([x.to_string(), y.to_string()]).map_err(|e| io(&path, e))?;
        }
        w.flush().map_err(|e| HarnessError::Io(e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}
