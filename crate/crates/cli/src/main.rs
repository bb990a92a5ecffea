//! Command-line front end: synthetic data generation, bound fitting and
//! export, benchmarking against ground truth, and a verification battery.
//!
//! Exit codes are a stable contract: 0 on success, 1 when a property check
//! or computation fails on valid inputs, 2 for usage, configuration or
//! input-parsing errors.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdte::bench::SettingKind;
use cdte::learners::{LearnerKind, LossKind};
use cdte::makarov::EstimandKind;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation, configuration or input files (exit 2).
    Usage(String),
    /// Property or computation failure on valid inputs (exit 1).
    Run(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn run(msg: impl Into<String>) -> Self {
        Failure::Run(msg.into())
    }
}

#[derive(Parser)]
#[command(
    name = "cdte",
    version,
    about = "Sharp bounds on the conditional distribution of treatment effects"
)]
struct Cli {
    /// Flat `key = value` config file; command-line flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it as CSV.
    Generate(GenerateArgs),
    /// Fit a learner on a dataset CSV and export bounds at query points.
    FitAndBound(FitArgs),
    /// Score learners against ground truth on synthetic settings.
    Benchmark(BenchmarkArgs),
    /// Run the verification battery (sharpness, enclosure, orthogonality).
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthetic setting: normal, multimodal or exponential.
    #[arg(long)]
    setting: Option<SettingKind>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of rows to draw.
    #[arg(long)]
    n: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Training data CSV with header `x1,...,xd,a,y`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Learner: plugin, iptw, ca or au.
    #[arg(long)]
    learner: Option<LearnerKind>,
    /// Estimand: cdf or quantile.
    #[arg(long)]
    estimand: Option<EstimandKind>,
    /// Second-stage loss: crps or w2sq.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Correction scale in [0, 1] for the au learner.
    #[arg(long)]
    gamma: Option<f64>,
    /// Cross-fitting folds; 1 fits and evaluates on the same data.
    #[arg(long)]
    k_folds: Option<usize>,
    /// Propensity clip floor.
    #[arg(long)]
    clip_floor: Option<f64>,
    /// Conditional CDF backend: kernel or gaussian.
    #[arg(long)]
    cdf_method: Option<String>,
    /// Multiplier on the kernel bandwidths.
    #[arg(long)]
    bandwidth_scale: Option<f64>,
    /// Second-stage ridge penalty.
    #[arg(long)]
    ridge: Option<f64>,
    /// Number of effect-value grid points.
    #[arg(long)]
    n_delta: Option<usize>,
    /// Number of quantile-level grid points.
    #[arg(long)]
    n_alpha: Option<usize>,
    /// Number of outcome search grid points.
    #[arg(long)]
    n_y: Option<usize>,
    /// Lower end of the effect-value grid (default: data hull, padded).
    #[arg(long, allow_negative_numbers = true)]
    delta_min: Option<f64>,
    /// Upper end of the effect-value grid.
    #[arg(long, allow_negative_numbers = true)]
    delta_max: Option<f64>,
    /// Covariate CSV of prediction points (default: the training rows).
    #[arg(long)]
    query_csv: Option<PathBuf>,
    /// Report only the treatment-benefit bound, at effect value 0.
    #[arg(long)]
    benefit_only: bool,
    /// Bounds CSV output path.
    #[arg(long)]
    out_bounds: Option<PathBuf>,
    /// Model summary JSON output path.
    #[arg(long)]
    out_models: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Synthetic setting: normal, multimodal or exponential.
    #[arg(long)]
    setting: Option<SettingKind>,
    /// Comma-separated seeds (default: 0).
    #[arg(long)]
    seeds: Option<String>,
    /// Single seed, replacing the seeds list.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated training sizes (default: 1000).
    #[arg(long)]
    n_train: Option<String>,
    /// Held-out rows per run.
    #[arg(long)]
    n_test: Option<usize>,
    /// Comma-separated learner names (default: all four).
    #[arg(long)]
    learners: Option<String>,
    /// Estimand: cdf or quantile.
    #[arg(long)]
    estimand: Option<EstimandKind>,
    /// Second-stage loss: crps or w2sq.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Correction scale for the au learner (default: loss-specific).
    #[arg(long)]
    gamma: Option<f64>,
    /// Cross-fitting folds.
    #[arg(long)]
    k_folds: Option<usize>,
    /// Propensity clip floor.
    #[arg(long)]
    clip_floor: Option<f64>,
    /// Conditional CDF backend: kernel or gaussian.
    #[arg(long)]
    cdf_method: Option<String>,
    /// Multiplier on the kernel bandwidths.
    #[arg(long)]
    bandwidth_scale: Option<f64>,
    /// Replace fitted nuisances by the exact ones (plugin, ca, au only).
    #[arg(long)]
    oracle_nuisance: bool,
    /// Number of effect-value grid points.
    #[arg(long)]
    n_delta: Option<usize>,
    /// Number of quantile-level grid points.
    #[arg(long)]
    n_alpha: Option<usize>,
    /// Number of outcome search grid points.
    #[arg(long)]
    n_y: Option<usize>,
    /// Metrics CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Monte Carlo draws for the orthogonality probe.
    #[arg(long)]
    probe_draws: Option<usize>,
    /// Monte Carlo draws for the enclosure check.
    #[arg(long)]
    enclosure_draws: Option<usize>,
    /// Random instances for the discrete sharpness check.
    #[arg(long)]
    sharpness_instances: Option<usize>,
    /// Base seed of the battery.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match config::Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(f) => return fail(f),
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a, &cfg),
        Command::FitAndBound(a) => commands::fit_and_bound(&a, &cfg),
        Command::Benchmark(a) => commands::benchmark(&a, &cfg),
        Command::Verify(a) => commands::verify(&a, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(m) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Failure::Run(m) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
