//! `memport` command-line front end.
//!
//! Every run writes its output files plus one `<command>-manifest.json` into
//! the output directory and prints only the manifest path on stdout.
//! Diagnostics go to stderr. See [`error::exit`] for the exit codes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod manifest;
mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{exit, CliError, CliResult};

#[derive(Parser)]
#[command(name = "memport", version, about = "Optimal investment under Gaussian noise with memory")]
struct Cli {
    /// Output directory (default `memport-out`).
    #[arg(long, global = true, env = "MEMPORT_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for Monte Carlo and estimation.
    #[arg(long, global = true, env = "MEMPORT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Finite-horizon power-utility problem: Riccati grids, policy, value.
    Solve(SolveArgs),
    /// Infinite-horizon growth rate, Lambda and the rate function I(c).
    Growth(GrowthArgs),
    /// Monte Carlo wealth simulation under one strategy.
    Simulate(SimulateArgs),
    /// Run the invariant battery and print PASS/FAIL per check.
    Verify(VerifyArgs),
    /// Fit (sigma, p, q) to a price file.
    Estimate(EstimateArgs),
    /// Re-run the invocation recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Solve(_) => "solve",
            Self::Growth(_) => "growth",
            Self::Simulate(_) => "simulate",
            Self::Verify(_) => "verify",
            Self::Estimate(_) => "estimate",
            Self::Replay(_) => "replay",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Solve(a) => a.seed,
            Self::Growth(a) => a.seed,
            Self::Simulate(a) => a.seed,
            Self::Verify(a) => a.seed,
            Self::Estimate(a) => a.seed,
            Self::Replay(_) => 0,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SolveArgs {
    /// Model configuration (TOML).
    pub config: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long)]
    pub horizon: f64,
    /// RK4 steps per unit time.
    #[arg(long, default_value_t = memport::riccati::DEFAULT_STEPS_PER_UNIT_TIME)]
    pub steps: usize,
    /// Initial wealth.
    #[arg(long, default_value_t = 1.0)]
    pub x0: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GrowthArgs {
    pub config: PathBuf,
    #[arg(long, allow_hyphen_values = true, conflicts_with = "alpha_grid", required_unless_present = "alpha_grid")]
    pub alpha: Option<f64>,
    /// Comma-separated exponents.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alpha_grid: Option<Vec<f64>>,
    /// Comma-separated thresholds for I(c); default cbar + 0.02 k, k = -10..=20.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub c_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    /// Finite-horizon optimal strategy for the horizon T.
    P1,
    /// Stationary (infinite-horizon) optimal strategy.
    P2,
    /// Log-optimal strategy.
    Log,
    /// Everything in the riskless asset.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Exact,
    ExactMean,
    Euler,
}

impl From<SchemeArg> for memport::simulate::XiScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Exact => Self::Exact,
            SchemeArg::ExactMean => Self::ExactMean,
            SchemeArg::Euler => Self::Euler,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Utility exponent for p1/p2 and for the growth estimator.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Horizon.
    #[arg(long = "T", default_value_t = 10.0)]
    pub horizon: f64,
    /// Time steps (default 1024 up to T = 10, 8192 beyond).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Exact)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 1.0)]
    pub x0: f64,
    /// Outperformance threshold for the large-deviations estimate.
    #[arg(long, allow_hyphen_values = true)]
    pub c: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub resamples: usize,
    /// Write the first N simulated paths as CSV.
    #[arg(long, default_value_t = 0)]
    pub write_paths: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// Run only checks whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    /// Model for the model-dependent checks (default: built-in two-asset fixture).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    /// Price CSV: optional leading `date` column, one column per asset.
    pub prices: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub max_lag: usize,
    #[arg(long, default_value_t = memport::estimate::DEFAULT_STARTS)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = memport::estimate::DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn run(cli: Cli) -> CliResult<(PathBuf, usize)> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("memport-out"));
    match cli.command {
        Command::Replay(r) => {
            let m = manifest::RunManifest::load(&r.manifest)?;
            manifest::execute(m.invocation, m.model, &out_dir)
        }
        cmd => manifest::execute(cmd, None, &out_dir),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok((path, failures)) => {
            println!("{}", path.display());
            if failures > 0 {
                let e = CliError::VerifyFailed(failures);
                eprintln!("error: {e}");
                std::process::exit(e.exit_code());
            }
            std::process::exit(exit::OK);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
