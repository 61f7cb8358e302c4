//! `selector-probe`: measure selection biases of multiple-choice answer
//! selectors via paired forward/backward prompts, and mitigate them with
//! probability weighting, probability calibration, or the two-hop rule.
//!
//! Exit codes: 0 success, 2 configuration error, 3 backend failure.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use selector_probe::backends::cache::AnswerCache;
use selector_probe::backends::http::{HttpBackend, HttpConfig};
use selector_probe::backends::sim::SimBackend;
use selector_probe::backends::{BiasProfile, SelectorBackend};
use selector_probe::datasets::{load_jsonl, DatasetManifest};
use selector_probe::debias::DistributionFile;
use selector_probe::metrics::EvaluationReport;
use selector_probe::report::{emit_report, render, render_table, ReportFormat};
use selector_probe::runner::{
    estimate_distributions, run_debias, run_sensitivity, CalibrateDirection, Method, RunConfig,
    RunFailure,
};
use selector_probe::{Direction, SensitivitySetting};

const EXIT_CONFIG: i32 = 2;
const EXIT_BACKEND: i32 = 3;

#[derive(Parser)]
#[command(name = "selector-probe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure accuracies and fluctuation rate under one sensitivity setting
    Sensitivity(RunArgs),
    /// Apply a mitigation method and report its accuracy next to the baseline
    Debias(DebiasArgs),
    /// Estimate forward/backward answer distributions from a validation sample
    EstimateDist(EstimateArgs),
    /// Re-render a stored JSON report as a table, CSV, or JSON
    Report(ReportArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SettingArg {
    Token,
    Order,
    Both,
}

impl From<SettingArg> for SensitivitySetting {
    fn from(value: SettingArg) -> Self {
        match value {
            SettingArg::Token => SensitivitySetting::Token,
            SettingArg::Order => SensitivitySetting::Order,
            SettingArg::Both => SensitivitySetting::Both,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Sim,
    Http,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Table,
}

impl From<FormatArg> for ReportFormat {
    fn from(value: FormatArg) -> Self {
        match value {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Table => ReportFormat::Table,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Weighting,
    Calibration,
    TwoHop,
}

impl From<MethodArg> for Method {
    fn from(value: MethodArg) -> Self {
        match value {
            MethodArg::Weighting => Method::Weighting,
            MethodArg::Calibration => Method::Calibration,
            MethodArg::TwoHop => Method::TwoHop,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CalibrateArg {
    Forward,
    Backward,
    Both,
}

impl From<CalibrateArg> for CalibrateDirection {
    fn from(value: CalibrateArg) -> Self {
        match value {
            CalibrateArg::Forward => CalibrateDirection::Forward,
            CalibrateArg::Backward => CalibrateDirection::Backward,
            CalibrateArg::Both => CalibrateDirection::Both,
        }
    }
}

#[derive(Args)]
struct BackendArgs {
    /// Selector backend
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendKind,
    /// Model name for live requests and cache records
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    /// Endpoint root for the http backend (…/chat/completions is appended)
    #[arg(long)]
    base_url: Option<String>,
    /// JSON bias profile for the sim backend; defaults to a neutral
    /// always-correct responder
    #[arg(long)]
    bias_profile: Option<PathBuf>,
    /// Total attempts per live request on transient failures
    #[arg(long, default_value_t = 4)]
    max_retries: u32,
    /// Completion-token cap per live request
    #[arg(long, default_value_t = 64)]
    max_tokens: u32,
    /// Append-only answer cache (JSON lines); live backend only
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSONL dataset file
    #[arg(long)]
    dataset: PathBuf,
    /// Which forward/backward construction to probe
    #[arg(long, value_enum)]
    setting: SettingArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Worker threads (and the live client's in-flight bound)
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Report file to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Format of the --out file (a text table always goes to stdout)
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct DebiasArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Mitigation method
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Items sampled off for distribution estimation when no --dist file is
    /// given (calibration and two-hop)
    #[arg(long, default_value_t = 200)]
    validation_size: usize,
    /// Forward answer-distribution file (skips validation estimation)
    #[arg(long)]
    dist: Option<PathBuf>,
    /// Backward answer-distribution file (for --calibrate-direction
    /// backward or both)
    #[arg(long)]
    dist_backward: Option<PathBuf>,
    /// Which direction(s) calibration corrects
    #[arg(long, value_enum, default_value = "forward")]
    calibrate_direction: CalibrateArg,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    setting: SettingArg,
    /// Validation sample size
    #[arg(long, default_value_t = 200)]
    validation_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Output base path; .forward / .backward is inserted before the
    /// extension
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored JSON report
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    /// Write here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure tagged with the exit code it maps to.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error,
        }
    }
}

trait IntoConfigFailure<T> {
    fn or_config(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> IntoConfigFailure<T> for Result<T, E> {
    fn or_config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::config(e.into()))
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            std::process::exit(failure.code);
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sensitivity(args) => cmd_sensitivity(args),
        Command::Debias(args) => cmd_debias(args),
        Command::EstimateDist(args) => cmd_estimate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn build_backend(
    args: &BackendArgs,
    seed: u64,
    concurrency: usize,
) -> Result<Box<dyn SelectorBackend>, Failure> {
    match args.backend {
        BackendKind::Sim => {
            let profile = match &args.bias_profile {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading bias profile {}", path.display()))
                        .or_config()?;
                    serde_json::from_str::<BiasProfile>(&text)
                        .with_context(|| format!("parsing bias profile {}", path.display()))
                        .or_config()?
                }
                None => BiasProfile::neutral(),
            };
            let backend = SimBackend::new(profile, seed).or_config()?;
            Ok(Box::new(backend))
        }
        BackendKind::Http => {
            let base_url = args
                .base_url
                .clone()
                .ok_or_else(|| Failure::config(anyhow!("the http backend needs --base-url")))?;
            let config = HttpConfig {
                max_attempts: args.max_retries,
                max_tokens: args.max_tokens,
                max_in_flight: concurrency,
                timeout: Duration::from_secs(30),
                api_key: None,
                ..HttpConfig::new(args.model.clone(), base_url)
            };
            let backend = HttpBackend::new(config).or_config()?;
            Ok(Box::new(backend))
        }
    }
}

fn open_cache(args: &BackendArgs) -> Result<Option<AnswerCache>, Failure> {
    match &args.cache {
        Some(path) => {
            let cache = AnswerCache::open(path)
                .with_context(|| format!("opening cache {}", path.display()))
                .or_config()?;
            Ok(Some(cache))
        }
        None => Ok(None),
    }
}

fn load_dataset(path: &Path) -> Result<DatasetManifest, Failure> {
    load_jsonl(path)
        .with_context(|| format!("loading dataset {}", path.display()))
        .or_config()
}

/// Prints the table, writes --out if given.
fn deliver(report: &EvaluationReport, out: Option<&Path>, format: ReportFormat) -> Result<(), Failure> {
    print!("{}", render_table(report));
    if let Some(path) = out {
        emit_report(report, format, path)
            .with_context(|| format!("writing report {}", path.display()))
            .or_config()?;
    }
    Ok(())
}

/// Maps a run failure to its exit code, flushing any partial report first.
fn handle_run_failure(
    failure: RunFailure,
    out: Option<&Path>,
    format: ReportFormat,
) -> Failure {
    if let Some(partial) = &failure.partial {
        eprintln!("run aborted; flushing partial report over {} item(s)", partial.n);
        if let Err(err) = deliver(partial, out, format) {
            eprintln!("error: flushing partial report failed: {:#}", err.error);
        }
    }
    let code = if failure.error.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_BACKEND
    };
    Failure {
        code,
        error: anyhow::Error::new(failure.error),
    }
}

fn cmd_sensitivity(args: RunArgs) -> Result<(), Failure> {
    let manifest = load_dataset(&args.dataset)?;
    let backend = build_backend(&args.backend, args.seed, args.concurrency)?;
    let cache = open_cache(&args.backend)?;
    let config = RunConfig {
        concurrency: args.concurrency,
        seed: args.seed,
        ..RunConfig::new(args.setting.into())
    };
    let format = args.format.into();
    match run_sensitivity(&manifest, backend.as_ref(), cache.as_ref(), &config) {
        Ok(report) => deliver(&report, args.out.as_deref(), format),
        Err(failure) => Err(handle_run_failure(failure, args.out.as_deref(), format)),
    }
}

fn load_distribution(
    path: &Path,
    setting: SensitivitySetting,
    direction: Direction,
) -> Result<selector_probe::debias::AnswerDistribution, Failure> {
    let file = DistributionFile::load(path).or_config()?;
    if file.setting != setting || file.direction != direction {
        return Err(Failure::config(anyhow!(
            "distribution {} was estimated for {}/{}, but this run needs {}/{}",
            path.display(),
            file.setting,
            file.direction,
            setting,
            direction
        )));
    }
    file.to_distribution().or_config()
}

fn cmd_debias(args: DebiasArgs) -> Result<(), Failure> {
    let run = &args.run;
    let setting: SensitivitySetting = run.setting.into();
    let manifest = load_dataset(&run.dataset)?;
    let backend = build_backend(&run.backend, run.seed, run.concurrency)?;
    let cache = open_cache(&run.backend)?;
    let dist_forward = args
        .dist
        .as_deref()
        .map(|p| load_distribution(p, setting, Direction::Forward))
        .transpose()?;
    let dist_backward = args
        .dist_backward
        .as_deref()
        .map(|p| load_distribution(p, setting, Direction::Backward))
        .transpose()?;
    let config = RunConfig {
        method: args.method.into(),
        calibrate: args.calibrate_direction.into(),
        validation_size: args.validation_size,
        seed: run.seed,
        concurrency: run.concurrency,
        dist_forward,
        dist_backward,
        ..RunConfig::new(setting)
    };
    let format = run.format.into();
    match run_debias(&manifest, backend.as_ref(), cache.as_ref(), &config) {
        Ok(report) => deliver(&report, run.out.as_deref(), format),
        Err(failure) => Err(handle_run_failure(failure, run.out.as_deref(), format)),
    }
}

/// dist.json -> dist.forward.json / dist.backward.json
fn direction_path(base: &Path, direction: Direction) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dist".to_string());
    let ext = base.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}.{direction}.{ext}"),
        None => format!("{stem}.{direction}"),
    };
    base.with_file_name(name)
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), Failure> {
    let setting: SensitivitySetting = args.setting.into();
    let manifest = load_dataset(&args.dataset)?;
    let backend = build_backend(&args.backend, args.seed, args.concurrency)?;
    let cache = open_cache(&args.backend)?;
    let (forward, backward) = estimate_distributions(
        &manifest,
        setting,
        backend.as_ref(),
        cache.as_ref(),
        args.validation_size,
        args.seed,
        args.concurrency,
    )
    .map_err(|failure| handle_run_failure(failure, None, ReportFormat::Json))?;
    for (dist, direction) in [(forward, Direction::Forward), (backward, Direction::Backward)] {
        let path = direction_path(&args.out, direction);
        DistributionFile::new(&dist, setting, direction)
            .save(&path)
            .or_config()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading report {}", args.input.display()))
        .or_config()?;
    let report: EvaluationReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing report {}", args.input.display()))
        .or_config()?;
    let rendered = render(&report, args.format.into());
    match &args.out {
        Some(path) => std::fs::write(path, rendered)
            .with_context(|| format!("writing {}", path.display()))
            .or_config()?,
        None => print!("{rendered}"),
    }
    Ok(())
}
