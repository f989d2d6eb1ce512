//! `fdlab` command line: trace generation, replay, comparison, margin
//! alignment and grid search.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error. Data goes to
//! stdout, diagnostics to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::chen::ChenConfig;
use crate::evaluation::{
    align_safety_margin, compare, comparison_csv, curve_csv, grid_csv, grid_search, linear_grid, prediction_log_csv,
    report_csv, run_detector, AlignRequest, DetectorConfig, EvalError, ReplayOptions, TargetPa,
};
use crate::mlfd::MlfdConfig;
use crate::trace::{generate_synthetic_trace, load_trace, save_trace, HeartbeatTrace, TraceError, TraceSpec};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fdlab", version, about = "Heartbeat failure-detector workbench")]
pub struct Cli {
    /// Seed for trace generation and LSTM initialization/shuffling.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads for per-link replays (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorKind {
    Chen,
    Mlfd,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic heartbeat traces, one file per link.
    Gen(GenArgs),
    /// Replay one detector over trace files and report QoS.
    Run(RunArgs),
    /// Replay Chen and the LSTM detector side by side.
    Compare(CompareArgs),
    /// Sweep Chen's safety margin to reach a target P_A.
    Align(AlignArgs),
    /// Grid search over LSTM training window, batch size and epochs.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 9)]
    pub links: u32,
    #[arg(long, default_value_t = 5000)]
    pub heartbeats: u64,
    #[arg(long, default_value_t = 100.0)]
    pub delta_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    pub jitter_ms: f64,
    #[arg(long, default_value_t = 5.0)]
    pub base_delay_ms: f64,
    #[arg(long, default_value_t = 0.005)]
    pub burst_rate: f64,
    #[arg(long, default_value_t = 200.0)]
    pub burst_extra_ms: f64,
    #[arg(long, default_value_t = 30.0)]
    pub burst_len: f64,
    #[arg(long, default_value_t = 0.001)]
    pub loss_prob: f64,
    #[arg(long)]
    pub crash_at_seq: Option<u64>,
}

impl GenArgs {
    fn spec(&self, seed: u64) -> TraceSpec {
        TraceSpec {
            links: self.links,
            heartbeats_per_link: self.heartbeats,
            delta_ms: self.delta_ms,
            jitter_std_ms: self.jitter_ms,
            base_delay_ms: self.base_delay_ms,
            burst_rate: self.burst_rate,
            burst_mean_extra_ms: self.burst_extra_ms,
            burst_mean_len: self.burst_len,
            loss_prob: self.loss_prob,
            crash_at_seq: self.crash_at_seq,
            rng_seed: seed,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct ChenArgs {
    /// Chen window size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Chen constant safety margin.
    #[arg(long)]
    pub alpha_ms: Option<f64>,
    #[arg(long)]
    pub w_min: Option<usize>,
}

impl ChenArgs {
    fn any(&self) -> bool {
        self.n.is_some() || self.alpha_ms.is_some() || self.w_min.is_some()
    }

    fn config(&self) -> ChenConfig {
        let d = ChenConfig::default();
        ChenConfig {
            n: self.n.unwrap_or(d.n),
            alpha_ms: self.alpha_ms.unwrap_or(d.alpha_ms),
            w_min: self.w_min.unwrap_or(d.w_min),
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct MlfdArgs {
    /// Training window (inter-arrival samples kept).
    #[arg(long)]
    pub eta: Option<usize>,
    /// Error window behind the dynamic safety margin.
    #[arg(long)]
    pub epsilon: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Under-estimation multiplier of the training loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub retrain_every: Option<usize>,
}

impl MlfdArgs {
    fn any(&self) -> bool {
        self.eta.is_some()
            || self.epsilon.is_some()
            || self.batch.is_some()
            || self.epochs.is_some()
            || self.lambda.is_some()
            || self.hidden.is_some()
            || self.lookback.is_some()
            || self.lr.is_some()
            || self.clip.is_some()
            || self.retrain_every.is_some()
    }

    fn config(&self, seed: u64) -> MlfdConfig {
        let d = MlfdConfig::default();
        let mut cfg = MlfdConfig {
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            hidden: self.hidden.unwrap_or(d.hidden),
            lookback: self.lookback.unwrap_or(d.lookback),
            retrain_every: self.retrain_every.unwrap_or(d.retrain_every),
            train: d.train,
        };
        let t = &mut cfg.train;
        t.eta = self.eta.unwrap_or(t.eta);
        t.batch_size = self.batch.unwrap_or(t.batch_size);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.loss_multiplier = self.lambda.unwrap_or(t.loss_multiplier);
        t.learning_rate = self.lr.unwrap_or(t.learning_rate);
        t.grad_clip_norm = self.clip.unwrap_or(t.grad_clip_norm);
        t.rng_seed = seed;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub fd: DetectorKind,
    #[command(flatten)]
    pub chen: ChenArgs,
    #[command(flatten)]
    pub mlfd: MlfdArgs,
    /// Judge predictions only from this heartbeat index on.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Also write the per-prediction log (predictions.csv in --out, or this path).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub chen: ChenArgs,
    #[command(flatten)]
    pub mlfd: MlfdArgs,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Pick Chen's margin by alignment before comparing.
    #[arg(long)]
    pub align_first: bool,
    /// `auto` (match the LSTM detector) or a probability.
    #[arg(long, default_value = "auto", value_parser = parse_target)]
    pub target_pa: TargetPa,
    /// Margin grid as `start:stop:step` in ms.
    #[arg(long, default_value = "0:1000:10")]
    pub alpha_grid: String,
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub chen: ChenArgs,
    #[arg(long)]
    pub target_pa: f64,
    #[arg(long, default_value = "0:1000:10")]
    pub alpha_grid: String,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub mlfd: MlfdArgs,
    #[arg(long, value_delimiter = ',', default_value = "100,500,1000")]
    pub eta_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "32,64")]
    pub batch_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    pub epoch_list: Vec<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

fn parse_target(s: &str) -> Result<TargetPa, String> {
    if s == "auto" {
        return Ok(TargetPa::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(TargetPa::Value(v)),
        _ => Err(format!("expected `auto` or a probability in [0, 1], got `{s}`")),
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Usage(format!("--alpha-grid expects start:stop:step, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    linear_grid(nums[0], nums[1], nums[2]).map_err(|e| CliError::Usage(e.to_string()))
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<HeartbeatTrace>, CliError> {
    let mut traces = Vec::with_capacity(paths.len());
    for p in paths {
        let t = load_trace(p).map_err(|e| match e {
            TraceError::Parse { line, message } => {
                CliError::Trace(TraceError::Parse { line, message: format!("{}: {message}", p.display()) })
            }
            other => CliError::Trace(other),
        })?;
        traces.push(t);
    }
    traces.sort_by_key(|t| t.link_id);
    Ok(traces)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Result of one subcommand: what goes to stdout plus a stderr summary.
pub struct Output {
    pub stdout: String,
    pub summary: Option<String>,
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<Output, CliError> {
    let out = cli.out.as_ref().ok_or_else(|| CliError::Usage("gen requires --out <dir>".into()))?;
    let spec = args.spec(cli.seed);
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_dir(out)?;
    let mut files = Vec::new();
    for link in 1..=spec.links {
        let trace = generate_synthetic_trace(&spec, link)?;
        let name = format!("link_{link}.csv");
        save_trace(&trace, out.join(&name))?;
        files.push(name);
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        format: &'a str,
        seed: u64,
        spec: &'a TraceSpec,
        files: &'a [String],
    }
    let manifest = to_json(&Manifest { format: "fdlab-trace v1", seed: cli.seed, spec: &spec, files: &files })?;
    write_file(&out.join("manifest.json"), &manifest)?;
    let listing = files.iter().map(|f| out.join(f).display().to_string() + "\n").collect();
    Ok(Output { stdout: listing, summary: Some(format!("wrote {} traces to {}", files.len(), out.display())) })
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<Output, CliError> {
    let config = match args.fd {
        DetectorKind::Chen => {
            if args.mlfd.any() {
                return Err(CliError::Usage("LSTM detector flags are not valid with --fd chen".into()));
            }
            DetectorConfig::Chen(args.chen.config())
        }
        DetectorKind::Mlfd => {
            if args.chen.any() {
                return Err(CliError::Usage("Chen flags (--n, --alpha-ms, --w-min) are not valid with --fd mlfd".into()));
            }
            DetectorConfig::Mlfd(args.mlfd.config(cli.seed))
        }
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let traces = load_all(&args.traces)?;
    let want_log = args.log.is_some();
    let opts = ReplayOptions { warmup_override: args.warmup, keep_log: want_log };
    let (report, log) = run_detector(&traces, &config, opts)?;

    let body = match cli.format {
        Format::Json => to_json(&report)?,
        Format::Csv => report_csv(&report),
    };
    if let Some(dir) = &cli.out {
        ensure_dir(dir)?;
        let name = if cli.format == Format::Json { "report.json" } else { "report.csv" };
        write_file(&dir.join(name), &body)?;
    }
    if let Some(path) = &args.log {
        let path = match (&cli.out, path.is_relative() && path.parent() == Some(Path::new(""))) {
            (Some(dir), true) => dir.join(path),
            _ => path.clone(),
        };
        write_file(&path, &prediction_log_csv(&log))?;
    }
    let failures: u64 = report.links.iter().map(|l| l.training_failures).sum();
    let mut summary = format!(
        "{}: P_A {:.6}  T_D {:.3} ms  T_C {:.3} ms over {} links",
        report.detector,
        report.aggregate.p_a,
        report.aggregate.t_d_ms,
        report.aggregate.t_c_ms,
        report.links.len()
    );
    if failures > 0 {
        summary.push_str(&format!("  ({failures} training failures, fallback predictions used)"));
    }
    Ok(Output { stdout: body, summary: Some(summary) })
}

fn cmd_compare(cli: &Cli, args: &CompareArgs) -> Result<Output, CliError> {
    let chen = args.chen.config();
    let mlfd = args.mlfd.config(cli.seed);
    chen.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    mlfd.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let align = if args.align_first {
        if args.chen.alpha_ms.is_some() {
            return Err(CliError::Usage("--alpha-ms conflicts with --align-first".into()));
        }
        Some(AlignRequest { target: args.target_pa, alpha_grid: parse_grid(&args.alpha_grid)? })
    } else {
        None
    };
    let traces = load_all(&args.traces)?;
    let cmp = compare(&traces, chen, mlfd, args.warmup, align.as_ref())?;
    let body = match cli.format {
        Format::Json => to_json(&cmp)?,
        Format::Csv => comparison_csv(&cmp),
    };
    if let Some(dir) = &cli.out {
        ensure_dir(dir)?;
        let name = if cli.format == Format::Json { "compare.json" } else { "compare.csv" };
        write_file(&dir.join(name), &body)?;
        if let Some(a) = &cmp.alignment {
            write_file(&dir.join("alignment_curve.csv"), &curve_csv(&a.curve))?;
        }
    }
    let summary = format!(
        "chen (alpha {:.3} ms): P_A {:.6} T_D {:.3} ms | mlfd: P_A {:.6} T_D {:.3} ms T_C {:.3} ms",
        match cmp.chen.config {
            DetectorConfig::Chen(c) => c.alpha_ms,
            DetectorConfig::Mlfd(_) => f64::NAN,
        },
        cmp.chen.aggregate.p_a,
        cmp.chen.aggregate.t_d_ms,
        cmp.mlfd.aggregate.p_a,
        cmp.mlfd.aggregate.t_d_ms,
        cmp.mlfd.aggregate.t_c_ms,
    );
    Ok(Output { stdout: body, summary: Some(summary) })
}

fn cmd_align(cli: &Cli, args: &AlignArgs) -> Result<Output, CliError> {
    if args.chen.alpha_ms.is_some() {
        return Err(CliError::Usage("align chooses --alpha-ms itself".into()));
    }
    if !(0.0..=1.0).contains(&args.target_pa) {
        return Err(CliError::Usage("--target-pa must lie in [0, 1]".into()));
    }
    let base = args.chen.config();
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let grid = parse_grid(&args.alpha_grid)?;
    let traces = load_all(&args.traces)?;
    let a = align_safety_margin(&traces, args.target_pa, &grid, base, args.warmup)?;
    let body = match cli.format {
        Format::Json => to_json(&a)?,
        Format::Csv => curve_csv(&a.curve),
    };
    if let Some(dir) = &cli.out {
        ensure_dir(dir)?;
        write_file(&dir.join("alignment_curve.csv"), &curve_csv(&a.curve))?;
        write_file(&dir.join("alignment.json"), &to_json(&a)?)?;
    }
    let summary = match a.alpha_ms {
        Some(v) => format!("alpha_ms={v:.3}"),
        None => "alpha_ms=none".to_string(),
    };
    Ok(Output { stdout: body, summary: Some(summary) })
}

fn cmd_grid(cli: &Cli, args: &GridArgs) -> Result<Output, CliError> {
    if args.mlfd.eta.is_some() || args.mlfd.batch.is_some() || args.mlfd.epochs.is_some() {
        return Err(CliError::Usage("use --eta-list/--batch-list/--epoch-list with grid".into()));
    }
    let base = args.mlfd.config(cli.seed);
    let traces = load_all(&args.traces)?;
    let grid = grid_search(&traces, &args.eta_list, &args.batch_list, &args.epoch_list, base, args.warmup)?;
    let body = match cli.format {
        Format::Json => to_json(&grid)?,
        Format::Csv => grid_csv(&grid),
    };
    if let Some(dir) = &cli.out {
        ensure_dir(dir)?;
        write_file(&dir.join("grid.csv"), &grid_csv(&grid))?;
    }
    Ok(Output { stdout: body, summary: Some(format!("{} combinations", grid.rows.len())) })
}

fn dispatch(cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Run(a) => cmd_run(cli, a),
        Command::Compare(a) => cmd_compare(cli, a),
        Command::Align(a) => cmd_align(cli, a),
        Command::Grid(a) => cmd_grid(cli, a),
    }
}

/// Runs a parsed command line, honoring `--jobs`.
pub fn execute(cli: &Cli) -> Result<Output, CliError> {
    if cli.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(|| dispatch(cli)),
        None => dispatch(cli),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            print!("{}", out.stdout);
            if let Some(s) = out.summary {
                eprintln!("{s}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
