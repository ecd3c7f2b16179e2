//! Command-line interface: `gen-data`, `train`, `evaluate`, `forecast`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::forecaster::{CDiffForecaster, Forecaster, SamplerConfig};
use crate::hawkes::{generate_dataset, HawkesConfig};
use crate::metrics::{per_position_errors, write_reports_csv};
use crate::neural::{DenoiseOrder, ModelConfig};
use crate::rng::{derive_seed, TAG_TASK};
use crate::sequences::{load_jsonl, write_jsonl, Dataset, EventSequence, Split};
use crate::trainer::{evaluate, train, write_history_csv, Checkpoint, EvalMode, TrainConfig};

pub const SEED_ENV: &str = "CDIFF_SEED";

/// Exit status for usage and I/O problems.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for everything else that fails.
pub const EXIT_INTERNAL: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "cdiff",
    version,
    about = "Cross-diffusion forecasting of event sequences"
)]
pub struct Cli {
    /// Worker threads; 1 gives the strictly sequential path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON run configuration. Command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed. Falls back to the config file, then CDIFF_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic Hawkes corpus.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Score a checkpoint (and optionally the Poisson baseline) on the test split.
    Evaluate(EvaluateArgs),
    /// Forecast continuations of context sequences.
    Forecast(ForecastArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub num_types: Option<usize>,
    #[arg(long)]
    pub min_events: Option<usize>,
    #[arg(long)]
    pub max_events: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log CSV; defaults to the checkpoint path with `.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Denoising order: type-first, time-first or independent.
    #[arg(long)]
    pub mode: Option<DenoiseOrder>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    /// Forecast length N.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Interval length used to size interval forecasts.
    #[arg(long)]
    pub t_prime: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    NextN,
    Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Poisson,
}

#[derive(Debug, Args, Default)]
pub struct SamplerArgs {
    /// Reverse steps (accelerated sampling when below T).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Deterministic time updates.
    #[arg(long)]
    pub eta_zero: bool,
    /// Samples aggregated per forecast.
    #[arg(long)]
    pub samples: Option<usize>,
}

impl SamplerArgs {
    fn apply(&self, mut cfg: SamplerConfig) -> SamplerConfig {
        if self.steps.is_some() {
            cfg.steps = self.steps;
        }
        cfg.eta_zero |= self.eta_zero;
        if let Some(a) = self.samples {
            cfg.num_samples = a;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "next-n")]
    pub mode: ModeArg,
    #[arg(long)]
    pub t_prime: Option<f64>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Metrics CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Dump `|x_i - x_hat_i|` per task and position to this CSV.
    #[arg(long)]
    pub per_position_errors: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Context sequences in the dataset JSONL format.
    #[arg(long)]
    pub context: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with = "t_prime")]
    pub n: Option<usize>,
    #[arg(long)]
    pub t_prime: Option<f64>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub context: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// File-level defaults for every command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub hawkes: HawkesConfig,
    pub seed: Option<u64>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Input paths must exist; output paths must have an existing parent.
    pub fn validate(&self) -> Result<(), CliError> {
        let inputs = [
            &self.paths.data,
            &self.paths.checkpoint,
            &self.paths.context,
        ];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::usage(format!(
                    "config path {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(out) = &self.paths.out {
            check_parent(out)?;
        }
        self.model.validate().map_err(CliError::from)?;
        self.train.validate().map_err(CliError::from)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::InvalidArgument(_)
            | Error::UnknownStrategy { .. }
            | Error::Checkpoint(_) => EXIT_USAGE,
            _ => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn check_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::usage(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::usage(format!("--{name} is required")))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    check_parent(path)?;
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e).into())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| Error::io(path, e).into()
}

fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> CliResult<u64> {
    if let Some(s) = flag.or(cfg.seed) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v} is not an integer"))),
        Err(_) => Ok(0),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(cli.seed, &cfg)?;
    log::info!("seed = {seed}");
    let body = move || match cli.command {
        Command::GenData(a) => cmd_gen_data(&cfg, a, seed),
        Command::Train(a) => cmd_train(&cfg, a, seed),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a, seed),
        Command::Forecast(a) => cmd_forecast(&cfg, a, seed),
    };
    match cli.threads {
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError {
                code: EXIT_INTERNAL,
                message: e.to_string(),
            })?
            .install(body),
        None => body(),
    }
}

fn cmd_gen_data(cfg: &RunConfig, a: GenDataArgs, seed: u64) -> CliResult {
    let out = required(a.out, &cfg.paths.out, "out")?;
    let mut h = cfg.hawkes.clone();
    let overrides = [
        (&mut h.n_train, a.n_train),
        (&mut h.n_val, a.n_val),
        (&mut h.n_test, a.n_test),
        (&mut h.num_types, a.num_types),
        (&mut h.min_events, a.min_events),
        (&mut h.max_events, a.max_events),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    let (data, spec) = generate_dataset(&h, seed)?;
    check_parent(&out)?;
    write_jsonl(&data, &out)?;
    let total: usize = data.sequences.iter().map(|s| s.len()).sum();
    let mut counts = vec![0usize; data.num_types];
    for s in &data.sequences {
        for (c, n) in counts.iter_mut().zip(s.type_counts()) {
            *c += n;
        }
    }
    let marginals: Vec<String> = counts
        .iter()
        .map(|&c| format!("{:.4}", c as f64 / total.max(1) as f64))
        .collect();
    println!(
        "wrote {}: {} sequences ({} train / {} val / {} test), K={}, mean length {:.2}, spectral radius {:.4}",
        out.display(),
        data.len(),
        data.count(Split::Train),
        data.count(Split::Val),
        data.count(Split::Test),
        data.num_types,
        total as f64 / data.len().max(1) as f64,
        spec.spectral_radius()
    );
    println!("type marginals: [{}]", marginals.join(", "));
    Ok(())
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::usage(format!(
            "data file {} not found",
            path.display()
        )));
    }
    Ok(load_jsonl(path)?)
}

fn cmd_train(cfg: &RunConfig, a: TrainArgs, seed: u64) -> CliResult {
    let data_path = required(a.data, &cfg.paths.data, "data")?;
    let out = required(a.out, &cfg.paths.checkpoint, "out")?;
    let log_path = a.log.unwrap_or_else(|| out.with_extension("log.csv"));
    check_parent(&out)?;
    check_parent(&log_path)?;
    let data = load_data(&data_path)?;

    let mut model = cfg.model.clone();
    model.num_types = data.num_types;
    if let Some(m) = a.mode {
        model.order = m;
    }
    if let Some(v) = a.embed {
        model.embed = v;
    }
    if let Some(v) = a.horizon {
        model.horizon = v;
    }
    if let Some(v) = a.steps {
        model.steps = v;
    }
    model.seed = seed;
    let mut tcfg = cfg.train.clone();
    if let Some(v) = a.epochs {
        tcfg.epochs_max = v;
    }
    if let Some(v) = a.batch {
        tcfg.batch = v;
    }
    if let Some(v) = a.lr {
        tcfg.lr = v;
    }
    if a.t_prime.is_some() {
        tcfg.interval_t_prime = a.t_prime;
    }
    tcfg.seed = seed;
    log::info!(
        "training {} model: M={} N={} T={} on {} sequences",
        model.order,
        model.embed,
        model.horizon,
        model.steps,
        data.count(Split::Train)
    );
    let outcome = train(&data, &model, &tcfg)?;
    outcome.checkpoint.save(&out)?;
    let mut w = create(&log_path)?;
    write_history_csv(&outcome.history, &mut w).map_err(io_err(&log_path))?;
    w.flush().map_err(io_err(&log_path))?;
    let meta = &outcome.checkpoint.meta;
    println!(
        "wrote {} (best epoch {} of {}, val loss {:.6}) and {}",
        out.display(),
        meta.epoch,
        meta.epochs_run,
        meta.val_loss,
        log_path.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::usage(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?)
}

fn cmd_evaluate(cfg: &RunConfig, a: EvaluateArgs, seed: u64) -> CliResult {
    let mode = match (a.mode, a.t_prime) {
        (ModeArg::NextN, _) => None,
        (ModeArg::Interval, Some(t)) => Some(EvalMode::Interval(t)),
        (ModeArg::Interval, None) => {
            return Err(CliError::usage("--mode interval requires --t-prime"))
        }
    };
    let ck_path = required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let data_path = required(a.data, &cfg.paths.data, "data")?;
    let ck = load_checkpoint(&ck_path)?;
    let data = load_data(&data_path)?;
    let mode = mode.unwrap_or(EvalMode::NextN(ck.config.horizon));
    let sampler = a.sampler.apply(cfg.sampler.clone());
    let model = Arc::new(ck.to_model()?);

    let mut names = vec!["cdiff"];
    if a.baseline == Some(BaselineArg::Poisson) {
        names.push("poisson");
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for name in names {
        let ev = evaluate(name, Some(model.clone()), &data, &sampler, mode, seed)?;
        errors.push((name.to_string(), per_position_errors(&ev.pairs)));
        rows.push((name.to_string(), ev.report));
    }

    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            write_reports_csv(&rows, &mut w)?;
            w.flush().map_err(io_err(p))?;
            log::info!("wrote {}", p.display());
        }
        None => write_reports_csv(&rows, &mut std::io::stdout().lock())?,
    }
    if let Some(p) = &a.json {
        let map: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(n, r)| {
                (
                    n.clone(),
                    serde_json::to_value(r).expect("report serializes"),
                )
            })
            .collect();
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &map).map_err(|e| CliError {
            code: EXIT_INTERNAL,
            message: e.to_string(),
        })?;
        writeln!(w).map_err(io_err(p))?;
    }
    if let Some(p) = &a.per_position_errors {
        let mut w = create(p)?;
        writeln!(w, "model,task,position,abs_error").map_err(io_err(p))?;
        for (name, per_task) in &errors {
            for (j, errs) in per_task.iter().enumerate() {
                for (i, e) in errs.iter().enumerate() {
                    writeln!(w, "{name},{j},{i},{e}").map_err(io_err(p))?;
                }
            }
        }
        w.flush().map_err(io_err(p))?;
    }
    Ok(())
}

fn cmd_forecast(cfg: &RunConfig, a: ForecastArgs, seed: u64) -> CliResult {
    let ck_path = required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let ctx_path = required(a.context, &cfg.paths.context, "context")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    if a.n.is_none() && a.t_prime.is_none() {
        return Err(CliError::usage("one of --n or --t-prime is required"));
    }
    check_parent(&out)?;
    let ck = load_checkpoint(&ck_path)?;
    let contexts = load_data(&ctx_path)?;
    let sampler = a.sampler.apply(cfg.sampler.clone());
    let f = CDiffForecaster::new(Arc::new(ck.to_model()?), sampler)?;
    if contexts.num_types != f.num_types() {
        return Err(CliError::usage(format!(
            "contexts have K={}, checkpoint expects {}",
            contexts.num_types,
            f.num_types()
        )));
    }
    let mut forecasts: Vec<EventSequence> = Vec::new();
    let mut splits = Vec::new();
    for (j, (ctx, split)) in contexts.sequences.iter().zip(&contexts.splits).enumerate() {
        if ctx.is_empty() {
            log::warn!("skipping context {j}: no events");
            continue;
        }
        let s = derive_seed(seed, TAG_TASK, j as u64);
        let fc = match (a.n, a.t_prime) {
            (Some(n), _) => f.forecast_n(ctx, n, s)?,
            (None, Some(t)) => f.forecast_interval(ctx, t, s)?,
            (None, None) => unreachable!("checked above"),
        };
        forecasts.push(fc);
        splits.push(*split);
    }
    let n = forecasts.len();
    let ds = Dataset::new(forecasts, splits, contexts.num_types, contexts.unit.clone())?;
    write_jsonl(&ds, &out)?;
    println!("wrote {n} forecasts to {}", out.display());
    Ok(())
}
