mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgAction, Args, Parser, Subcommand};

use config::{parse_drift, parse_seeds, ExperimentConfig, Mode};
use driftica::Execution;

#[derive(Parser)]
#[command(name = "driftica", version, about = "Decompose drifting multichannel spike mixtures")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic recordings with ground truth.
    Simulate(SimulateArgs),
    /// Decompose recordings into spike trains.
    Decompose(DecomposeArgs),
    /// Score result bundles against ground truth.
    Evaluate(EvaluateArgs),
    /// Decompose with compensation disabled.
    Ablate(DecomposeArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds: `3`, `1,2,5` or `1..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Seeds processed concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    waveform_len: Option<usize>,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    fs_hz: Option<f64>,
    #[arg(long)]
    rate_hz: Option<f64>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    spatial_width: Option<f64>,
    /// `none`, `sin:PERIOD:AMP` or `sin:1:2+sin:0.25:2`.
    #[arg(long)]
    drift: Option<String>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    common: Common,
    /// Signal file, or a directory holding `seed_<n>/signal.bin`.
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(long)]
    low_hz: Option<f64>,
    #[arg(long)]
    high_hz: Option<f64>,
    #[arg(long)]
    k_ext: Option<usize>,
    #[arg(long)]
    max_attempts: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr_independence: Option<f64>,
    #[arg(long)]
    lr_compensation: Option<f64>,
    #[arg(long)]
    silhouette_threshold: Option<f64>,
    /// Agreement (%) at which a new source counts as a duplicate.
    #[arg(long)]
    duplicate_threshold: Option<f64>,
    /// Freeze the network at identity (lambda 0).
    #[arg(long)]
    ablate_compensation: bool,
    /// Disable data-parallel kernels.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Result bundle, or a directory of `seed_<n>` bundles.
    #[arg(short, long)]
    results: Option<PathBuf>,
    /// Directory with `truth.csv` and `signal.json` (per seed or shared).
    #[arg(short, long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    tolerance_ms: Option<f64>,
    #[arg(long)]
    label: Option<String>,
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &common.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    set(&mut cfg.output, common.output.clone());
    set(&mut cfg.jobs, common.jobs);
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<impl Into<T>>) {
    if let Some(v) = value {
        *slot = v.into();
    }
}

fn simulate_config(a: SimulateArgs) -> Result<ExperimentConfig> {
    let mut cfg = base_config(&a.common)?;
    cfg.mode = Some(Mode::Simulate);
    let s = &mut cfg.simulation;
    set(&mut s.sources, a.sources);
    set(&mut s.channels, a.channels);
    set(&mut s.waveform_len, a.waveform_len);
    set(&mut s.duration_s, a.duration_s);
    set(&mut s.fs_hz, a.fs_hz);
    set(&mut s.rate_hz, a.rate_hz);
    set(&mut s.snr_db, a.snr_db);
    set(&mut s.spatial_width, a.spatial_width);
    if let Some(d) = &a.drift {
        s.drift = parse_drift(d)?;
    }
    Ok(cfg)
}

fn decompose_config(a: DecomposeArgs, mode: Mode) -> Result<ExperimentConfig> {
    let mut cfg = base_config(&a.common)?;
    cfg.mode = Some(mode);
    cfg.input = a.input.or(cfg.input);
    let p = &mut cfg.preprocess;
    if a.low_hz.is_some() {
        p.low_hz = a.low_hz;
    }
    if a.high_hz.is_some() {
        p.high_hz = a.high_hz;
    }
    set(&mut p.k_ext, a.k_ext);
    let d = &mut cfg.decompose;
    set(&mut d.max_attempts, a.max_attempts);
    set(&mut d.pretrain_steps, a.pretrain_steps);
    set(&mut d.max_alternating_epochs, a.max_epochs);
    set(&mut d.lr_independence, a.lr_independence);
    set(&mut d.lr_compensation, a.lr_compensation);
    set(&mut d.silhouette_threshold, a.silhouette_threshold);
    set(&mut d.duplicate_accuracy_threshold, a.duplicate_threshold);
    if a.ablate_compensation || mode == Mode::Ablate {
        d.ablate_compensation = true;
    }
    if a.sequential {
        d.execution = Execution::Sequential;
        cfg.preprocess.execution = Execution::Sequential;
    }
    Ok(cfg)
}

fn evaluate_config(a: EvaluateArgs) -> Result<ExperimentConfig> {
    let mut cfg = base_config(&a.common)?;
    cfg.mode = Some(Mode::Evaluate);
    cfg.input = a.results.or(cfg.input);
    cfg.truth = a.truth.or(cfg.truth);
    set(&mut cfg.tolerance_ms, a.tolerance_ms);
    set(&mut cfg.label, a.label);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => commands::cmd_simulate(&simulate_config(a)?),
        Command::Decompose(a) => commands::cmd_decompose(&decompose_config(a, Mode::Decompose)?, false),
        Command::Ablate(a) => commands::cmd_decompose(&decompose_config(a, Mode::Ablate)?, true),
        Command::Evaluate(a) => commands::cmd_evaluate(&evaluate_config(a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
