//! `vio`: simulate datasets, run the batch estimator, and run Monte-Carlo and
//! numerical studies.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 solver failure, 4 acceptance failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use vio_core::simulator::{ConfigError, DatasetError};

#[derive(Debug, Parser)]
#[command(name = "vio", version, about = "Visual-inertial preintegration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Output directory; `VIO_OUT` is used when the flag is absent.
#[derive(Debug, Args)]
struct OutDir {
    #[arg(long, env = "VIO_OUT")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        /// TOML configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Estimate all keyframe states of a dataset directory.
    Estimate {
        /// Dataset directory written by `simulate`.
        dataset: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run independent simulate-and-estimate trials and reduce their metrics.
    Montecarlo {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed; run `k` uses `seed + k`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Compare analytic Jacobians with finite differences.
    JacobianCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Maximum accepted relative error per block.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        configurations: usize,
        /// Optional directory for `jacobians.csv`.
        #[arg(long, env = "VIO_OUT")]
        out: Option<PathBuf>,
    },
    /// Euler-angle versus SO(3) integration and covariance study.
    EulerStudy {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        out: OutDir,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(DatasetError::Config(_)) => 1,
            CliError::Data(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Acceptance(_) => 4,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed, out } => commands::simulate(config.as_deref(), seed, &out.out),
        Command::Estimate { dataset, out } => commands::estimate(&dataset, &out.out),
        Command::Montecarlo {
            config,
            seed,
            runs,
            jobs,
            out,
        } => commands::montecarlo(config.as_deref(), seed, runs, jobs, &out.out),
        Command::JacobianCheck {
            seed,
            tol,
            configurations,
            out,
        } => commands::jacobian_check(seed, tol, configurations, out.as_deref()),
        Command::EulerStudy { seed, out } => commands::euler_study(seed, &out.out),
        Command::DefaultConfig => {
            print!("{}", vio_core::simulator::SimConfig::default().to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
