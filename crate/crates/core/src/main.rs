use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kan_hydro::harness::{self, emit_plot_data, train_test_split, GridSearchConfig, HarnessError, PhiGrid};
use kan_hydro::hydro::{
    fit_parametric, load_catchments, synth_generate, write_predictions, AridityModel, CatchmentDataset, HydroError,
    LoadOptions, Samples, SynthSource, Target,
};
use kan_hydro::kan::{KanError, KanNetwork};
use kan_hydro::metrics::{MetricSet, MetricsError, PairedSeries};
use kan_hydro::symbolic::parse_expression;

/// Precipitation assigned to every synthetic catchment, mm/yr.
const SYNTH_P: f64 = 3000.0;

#[derive(Parser)]
#[command(name = "kan-hydro", version, about = "KAN symbolic regression for mean-annual baseflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated grid search, final fit and report.
    Fit(FitArgs),
    /// Score a fixed formula or a saved network on a dataset.
    Evaluate(EvaluateArgs),
    /// Write a synthetic catchment table drawn from a formula.
    Synth(SynthArgs),
    /// NSE, KGE, RMSE and R² between two columns of a table.
    Metrics(MetricsArgs),
    /// Export formula curves (and observations) for plotting.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct StrictFlags {
    /// Drop rows whose runoff exceeds precipitation.
    #[arg(long, overrides_with = "no_strict")]
    strict: bool,
    #[arg(long, overrides_with = "strict")]
    no_strict: bool,
}

impl StrictFlags {
    fn resolve(&self, default: bool) -> bool {
        if self.strict {
            true
        } else if self.no_strict {
            false
        } else {
            default
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "qb_over_p")]
    target: Target,
    /// JSON file with grid-search settings; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    strict: StrictFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// original_fb, original_fd, kan_fb, kan_inspired_fb, FB, FD or checkpoint:PATH
    #[arg(long)]
    model: String,
    /// Defaults to the column the named formula predicts.
    #[arg(long)]
    target: Option<Target>,
    #[arg(long)]
    out: PathBuf,
    /// Refit the formula's parameters on each training split.
    #[arg(long)]
    refit: bool,
    /// Number of random splits to refit on.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.8)]
    split_ratio: f64,
    #[command(flatten)]
    strict: StrictFlags,
}

#[derive(Args)]
struct SynthArgs {
    /// A formula name (as for `evaluate`) or an expression in `x`.
    #[arg(long)]
    formula: String,
    #[arg(long, default_value_t = 302)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    phi_min: f64,
    #[arg(long, default_value_t = 5.0)]
    phi_max: f64,
    #[arg(long, default_value_t = 0.02)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Column the generated values are written to.
    #[arg(long, default_value = "qb_over_p")]
    target: Target,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    obs_col: String,
    #[arg(long)]
    sim_col: String,
}

#[derive(Args)]
struct PlotArgs {
    /// Comma-separated formula names.
    #[arg(long, value_delimiter = ',', default_value = "original_fb,kan_fb")]
    models: Vec<String>,
    #[arg(long, default_value_t = 0.2)]
    phi_min: f64,
    #[arg(long, default_value_t = 5.0)]
    phi_max: f64,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also export observations, for the full table and its test split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "qb_over_p")]
    target: Target,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

enum CliError {
    Validation(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) | CliError::Io(m) => m,
        }
    }
}

impl From<HydroError> for CliError {
    fn from(e: HydroError) -> Self {
        match e {
            HydroError::Io(_) => CliError::Io(e.to_string()),
            HydroError::OptimizerFailure { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Hydro(h) => h.into(),
            HarnessError::Io(_) => CliError::Io(e.to_string()),
            HarnessError::TooSmall(_) | HarnessError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<KanError> for CliError {
    fn from(e: KanError) -> Self {
        match e {
            KanError::Checkpoint(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn load(path: &Path, strict: bool) -> Result<CatchmentDataset, CliError> {
    let ds = load_catchments(path, LoadOptions { strict })?;
    if !ds.warnings.is_empty() {
        eprintln!("{} warning(s) while loading {}", ds.warnings.len(), path.display());
    }
    Ok(ds)
}

fn default_target(name: &str) -> Option<Target> {
    Some(match name {
        "original_fb" | "kan_fb" | "kan_inspired_fb" => Target::QbOverP,
        "original_fd" => Target::QdOverP,
        "FB" => Target::Qb,
        "FD" => Target::Qd,
        _ => return None,
    })
}

fn named_model(name: &str) -> Result<AridityModel, CliError> {
    AridityModel::named(name).ok_or_else(|| {
        CliError::Validation(format!("unknown model `{name}`; expected one of {}", AridityModel::NAMES.join(", ")))
    })
}

fn cmd_fit(a: FitArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => GridSearchConfig::from_json(&read_file(p)?)?,
        None => GridSearchConfig::default(),
    };
    let ds = load(&a.data, a.strict.resolve(true))?;
    let samples = ds.samples(a.target);
    let (report, net) = harness::fit(&cfg, &samples, a.target, a.threads, &ds.provenance)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_file(&a.out.join("report.json"), &report.to_json())?;
    write_file(&a.out.join("report.txt"), &report.to_text())?;
    write_file(&a.out.join("network.json"), &net.to_json()?)?;
    let formula = parse_expression(&report.formula).map_err(|e| CliError::Runtime(e.to_string()))?;
    let preds = harness::formula_predictions(&formula, &samples.x)?;
    write_predictions(&a.out.join("predictions.csv"), &ds, &preds)?;
    print!("{}", report.to_text());
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    model: String,
    target: Target,
    all: MetricSet,
    split_seed: u64,
    train: MetricSet,
    test: MetricSet,
}

#[derive(Serialize)]
struct RefitRun {
    split_seed: u64,
    params: Vec<f64>,
    train_rmse: f64,
    test: MetricSet,
}

#[derive(Serialize)]
struct RefitSummary {
    model: String,
    family: String,
    target: Target,
    repeats: usize,
    mean_params: Vec<f64>,
    mean_test_nse: Option<f64>,
    runs: Vec<RefitRun>,
}

fn metrics_of(obs: &[f64], sim: &[f64]) -> Result<MetricSet, CliError> {
    Ok(MetricSet::compute(&PairedSeries::new(obs.to_vec(), sim.to_vec())?))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let ds = load(&a.data, a.strict.resolve(false))?;
    let checkpoint = a.model.strip_prefix("checkpoint:");
    let target = match (a.target, checkpoint) {
        (Some(t), _) => t,
        (None, Some(_)) => return Err(CliError::Validation("--target is required with a checkpoint".into())),
        (None, None) => default_target(&a.model).ok_or_else(|| named_model(&a.model).err().unwrap())?,
    };
    let phis = ds.phis();
    let obs = ds.target(target);
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;

    if a.refit {
        if checkpoint.is_some() {
            return Err(CliError::Validation("--refit applies to named formulas only".into()));
        }
        if a.repeats == 0 {
            return Err(CliError::Validation("--repeats must be at least 1".into()));
        }
        let base = named_model(&a.model)?;
        let mut runs = Vec::new();
        for r in 0..a.repeats as u64 {
            let seed = a.split_seed + r;
            let split = train_test_split(ds.len(), a.split_ratio, seed)?;
            let pick = |idx: &[usize], v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let fit = fit_parametric(base.family, &pick(&split.train, &phis), &pick(&split.train, &obs), &base.params, None)?;
            let test_pred = fit.model.eval_many(&pick(&split.test, &phis))?;
            runs.push(RefitRun {
                split_seed: seed,
                params: fit.model.params.clone(),
                train_rmse: fit.rmse,
                test: metrics_of(&pick(&split.test, &obs), &test_pred)?,
            });
        }
        let k = base.params.len();
        let mean_params = (0..k).map(|j| runs.iter().map(|r| r.params[j]).sum::<f64>() / runs.len() as f64).collect();
        let nses: Option<Vec<f64>> = runs.iter().map(|r| r.test.nse).collect();
        let summary = RefitSummary {
            model: a.model.clone(),
            family: base.family.to_string(),
            target,
            repeats: a.repeats,
            mean_params,
            mean_test_nse: nses.map(|v| v.iter().sum::<f64>() / v.len() as f64),
            runs,
        };
        let json = to_json(&summary);
        write_file(&a.out.join("refit.json"), &json)?;
        println!("{json}");
        return Ok(());
    }

    let preds = match checkpoint {
        Some(path) => {
            let net = KanNetwork::from_json(&read_file(Path::new(path))?)?;
            let rows: Vec<Vec<f64>> = phis.iter().map(|&p| vec![p]).collect();
            net.predict(&rows)?
        }
        None => named_model(&a.model)?.eval_many(&phis)?,
    };
    let split = train_test_split(ds.len(), a.split_ratio, a.split_seed)?;
    let pick = |idx: &[usize], v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let ev = Evaluation {
        model: a.model.clone(),
        target,
        all: metrics_of(&obs, &preds)?,
        split_seed: a.split_seed,
        train: metrics_of(&pick(&split.train, &obs), &pick(&split.train, &preds))?,
        test: metrics_of(&pick(&split.test, &obs), &pick(&split.test, &preds))?,
    };
    let json = to_json(&ev);
    write_file(&a.out.join("evaluation.json"), &json)?;
    write_predictions(&a.out.join("predictions.csv"), &ds, &preds)?;
    println!("{json}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let source = match AridityModel::named(&a.formula) {
        Some(m) => SynthSource::Model(m),
        None => SynthSource::Expression(
            parse_expression(&a.formula).map_err(|e| CliError::Validation(format!("--formula: {e}")))?,
        ),
    };
    let s: Samples = synth_generate(&source, a.n, (a.phi_min, a.phi_max), a.sigma, a.seed)?;
    let truth = s.truth.as_ref().expect("generator records truth");
    let scale = match a.target {
        Target::QbOverP | Target::QdOverP => SYNTH_P,
        Target::Qb | Target::Qd => 1.0,
    };
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| io_err(&a.out, e))?;
    w.write_record(["gauge_id", "p_mm_yr", "pet_mm_yr", "qb_mm_yr", "qd_mm_yr", "truth"])
        .map_err(|e| io_err(&a.out, e))?;
    let mut clamped = 0;
    for (i, ((phi, y), t)) in s.x.iter().zip(&s.y).zip(truth).enumerate() {
        let mut depth = y * scale;
        if depth < 0.0 {
            depth = 0.0;
            clamped += 1;
        }
        let (qb, qd) = match a.target {
            Target::QbOverP | Target::Qb => (depth, 0.0),
            Target::QdOverP | Target::Qd => (0.0, depth),
        };
        w.write_record([
            format!("synth-{i:04}"),
            SYNTH_P.to_string(),
            (phi * SYNTH_P).to_string(),
            qb.to_string(),
            qd.to_string(),
            t.to_string(),
        ])
        .map_err(|e| io_err(&a.out, e))?;
    }
    w.flush().map_err(|e| io_err(&a.out, e))?;
    if clamped > 0 {
        eprintln!("{clamped} negative sample(s) clamped to zero");
    }
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&a.data)
        .map_err(|e| io_err(&a.data, e))?;
    let headers = rdr.headers().map_err(|e| CliError::Validation(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Validation(format!("no column `{name}`")))
    };
    let (oi, si) = (col(&a.obs_col)?, col(&a.sim_col)?);
    let (mut obs, mut sim) = (Vec::new(), Vec::new());
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::Validation(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| {
            row[i]
                .parse::<f64>()
                .map_err(|_| CliError::Validation(format!("line {line}: `{}` is not a number", &row[i])))
        };
        obs.push(num(oi)?);
        sim.push(num(si)?);
    }
    println!("{}", to_json(&metrics_of(&obs, &sim)?));
    Ok(())
}

fn cmd_plotdata(a: PlotArgs) -> Result<(), CliError> {
    let curves = a
        .models
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| Ok((m.clone(), SynthSource::Model(named_model(m)?))))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut observations = Vec::new();
    if let Some(path) = &a.data {
        let ds = load(path, false)?;
        let all = ds.samples(a.target);
        let split = train_test_split(ds.len(), 0.8, a.split_seed)?;
        observations.push(("test".to_string(), all.subset(&split.test)));
        observations.push(("full".to_string(), all));
    }
    let grid = PhiGrid { min: a.phi_min, max: a.phi_max, step: a.step };
    for p in emit_plot_data(&curves, &observations, grid, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Plotdata(a) => cmd_plotdata(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
