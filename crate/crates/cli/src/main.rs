//! `ruinsolve`: minimal probability of lifetime ruin under stochastic volatility.
//!
//! Exit codes: 0 success, 2 configuration error, 3 convergence or numerical
//! failure, 4 I/O error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ruinsolve_core::RuinError;

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("not converged: {0}")]
    Convergence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Convergence(_) | CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<RuinError> for CliError {
    fn from(e: RuinError) -> Self {
        match e {
            RuinError::InvalidParameter { .. }
            | RuinError::Domain { .. }
            | RuinError::MissingInput(_)
            | RuinError::Grid(_) => CliError::Config(e.to_string()),
            RuinError::NotConverged { .. } => CliError::Convergence(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ruinsolve",
    version,
    about = "Minimal probability of lifetime ruin under stochastic volatility"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimal ruin probability and investment by Markov chain approximation.
    Solve(RunArgs),
    /// Asymptotic approximations for a fast or slow factor.
    Approx(RunArgs),
    /// Ruin probabilities of candidate strategies on fixed volatility slices.
    Compare(RunArgs),
    /// Optimal ruin probability for several correlations.
    SweepRho(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nw: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long)]
    speed: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (args, f): (
        &RunArgs,
        fn(&RunConfig, &std::path::Path) -> Result<(), CliError>,
    ) = match &cli.command {
        Command::Solve(a) => (a, commands::cmd_solve),
        Command::Approx(a) => (a, commands::cmd_approx),
        Command::Compare(a) => (a, commands::cmd_compare),
        Command::SweepRho(a) => (a, commands::cmd_sweep_rho),
    };
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(Overrides {
        nw: args.nw,
        rho: args.rho,
        speed: args.speed,
    });
    f(&cfg, &args.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("ruinsolve: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
