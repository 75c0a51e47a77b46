//! Command-line pipeline: fit, summarize, simulate, calibrate, propensity.
//!
//! Every command honors `--seed` and writes a manifest last, so a manifest's
//! presence marks a completed run. Output data files are byte-identical
//! across runs with the same seed regardless of `--threads` (the manifest
//! itself records wall time and therefore varies).

mod commands;
mod config_file;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tsbcf",
    version,
    about = "Smooth heterogeneous treatment effects for binary outcomes",
    long_about = "Fits two tree ensembles (prognostic and treatment) whose leaf parameters \
vary smoothly over a target covariate, via probit data augmentation and \
backfitting MCMC. Seeds: chains use RNG streams 0..k, the propensity fit \
uses stream 1000000; every stream is logged in the run manifest."
)]
struct Cli {
    /// Size of the worker thread pool (default: all cores). Outputs do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model: propensity (unless supplied), scale calibration
    /// (unless fixed), then the MCMC chains.
    Fit(FitArgs),
    /// Post-process a fit: effect curves, subgroups, diagnostics.
    Summarize(SummarizeArgs),
    /// Run the simulation benchmark and write the metrics table.
    Simulate(SimulateArgs),
    /// Compute prior scales (and optionally the heterogeneity grid).
    Calibrate(CalibrateArgs),
    /// Estimate propensity scores only.
    Propensity(PropensityArgs),
}

#[derive(Args)]
pub struct FitArgs {
    /// Dataset file (delimited text with a header row).
    #[arg(long)]
    data: PathBuf,
    /// Configuration file(s); later files override earlier ones.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of MCMC chains.
    #[arg(long)]
    chains: Option<usize>,
    /// Burn-in override.
    #[arg(long)]
    burn: Option<usize>,
    /// Retained-draw override.
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args)]
pub struct SummarizeArgs {
    /// Completed fit directory (must contain a manifest).
    #[arg(long)]
    fit: PathBuf,
    /// Dataset override (defaults to the fit directory's snapshot).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Configuration file(s) with the [schema] for --data.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Lower edge of the target window for the subgroup analysis.
    #[arg(long)]
    t_min: Option<f64>,
    /// Upper edge of the target window.
    #[arg(long)]
    t_max: Option<f64>,
    /// Maximum depth of the fit-the-fit tree.
    #[arg(long, default_value_t = 3)]
    max_depth: usize,
    /// Minimum observations per fit-the-fit leaf.
    #[arg(long, default_value_t = 20)]
    min_leaf: usize,
    /// Grouped projection over the target: COLUMN for categorical columns,
    /// COLUMN:c1,c2,... for continuous bands. Repeatable.
    #[arg(long)]
    project: Vec<String>,
    /// Merge another fit's effect curve into kappa_sensitivity.csv as
    /// NAME=DIR. Repeatable.
    #[arg(long)]
    overlay: Vec<String>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Benchmark configuration (scenarios, models, n, replicates, sampler).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Configuration file(s) with the [schema].
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Elicited lower baseline risk.
    #[arg(long, default_value_t = 0.860)]
    lo: f64,
    /// Elicited upper baseline risk.
    #[arg(long, default_value_t = 0.999)]
    hi: f64,
    /// Holdout size for the treatment-scale match.
    #[arg(long)]
    holdout: Option<usize>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the structural-heterogeneity illustration grid.
    #[arg(long)]
    het_grid: bool,
}

#[derive(Args)]
pub struct PropensityArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Configuration file(s) with the [schema].
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Tree count override.
    #[arg(long)]
    trees: Option<usize>,
    /// Burn-in override.
    #[arg(long)]
    burn: Option<usize>,
    /// Retained-draw override.
    #[arg(long)]
    draws: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Fit(args) => commands::run_fit(args),
        Command::Summarize(args) => commands::run_summarize(args),
        Command::Simulate(args) => commands::run_simulate(args),
        Command::Calibrate(args) => commands::run_calibrate(args),
        Command::Propensity(args) => commands::run_propensity(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ tsbcf::Error::NanAbort { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
