//! Command-line front end for Bayesian influence estimation experiments.

mod commands;
mod config;

use clap::{Parser, Subcommand};

use bif_core::ErrorClass;

const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  1  I/O or internal failure
  2  invalid usage or configuration
  3  numerical divergence (a report is persisted in the run directory)
  4  artifact, label, or shape incompatibility";

#[derive(Parser)]
#[command(
    name = "bif",
    version,
    about = "Training-data influence via sampled posteriors and curvature oracles",
    after_help = EXIT_CODE_HELP
)]
struct Cli {
    /// Worker threads for chains and retraining (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Permit test-only flags such as --zero-noise.
    #[arg(long, global = true)]
    allow_test_modes: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the localized posterior and estimate influence matrices.
    Estimate(commands::estimate::EstimateArgs),
    /// Compute curvature-based influence matrices at the checkpoint.
    Oracle(commands::oracle::OracleArgs),
    /// Compare two influence artifacts entry by entry.
    Compare(commands::compare::CompareArgs),
    /// Score influence artifacts against retrained subsets.
    Lds(commands::lds::LdsArgs),
    /// Verify a run directory and emit ranked top-k files.
    Report(commands::report::ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    let result = match &cli.command {
        Command::Estimate(args) => commands::estimate::run(args, cli.allow_test_modes),
        Command::Oracle(args) => commands::oracle::run(args),
        Command::Compare(args) => commands::compare::run(args),
        Command::Lds(args) => commands::lds::run(args),
        Command::Report(args) => commands::report::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e.class() {
            ErrorClass::Io => 1,
            ErrorClass::Validation => 2,
            ErrorClass::Divergence => 3,
            ErrorClass::Incompatibility => 4,
        };
        std::process::exit(code);
    }
}
