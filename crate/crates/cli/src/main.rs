//! `fsmp`: batch front end for the fractional-noise maximum principle.
//!
//! Exit codes: 0 success, 1 a check failed, 2 configuration error,
//! 3 numerical precondition failure, 4 i/o failure, 5 no convergence.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Globals, WhitenArgs, DEFAULT_SEED};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "fsmp", version, about = "Stochastic optimal control under fractional Gaussian noise")]
struct Cli {
    /// Seed for every random draw (Monte Carlo paths, test perturbations).
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Gauss-Hermite order of the lattice; overrides the config file.
    #[arg(long, global = true)]
    quadrature_order: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Factor a noise covariance and write b, a, c.
    Whiten(WhitenCli),
    /// Solve a linear BSDE given in a JSON config.
    SolveBsde {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve an LQ problem and certify the result.
    Lq {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        damping: Option<f64>,
    },
    /// Evaluate the maximum-principle residual of a given control.
    SmpCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        control: PathBuf,
    },
    /// Projected gradient descent to a stationary control.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Starting control CSV; zero (projected) by default.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Selftest,
}

#[derive(Debug, Args)]
struct WhitenCli {
    #[arg(long, conflicts_with = "cov_file")]
    hurst: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Covariance matrix as headerless CSV rows.
    #[arg(long)]
    cov_file: Option<PathBuf>,
    /// Also draw this many Monte Carlo paths into paths.csv.
    #[arg(long)]
    sample_paths: Option<usize>,
}

fn dispatch(cli: Cli) -> CliResult<String> {
    let g = Globals {
        seed: cli.seed,
        quadrature_order: cli.quadrature_order,
        out: cli.out,
    };
    match cli.command {
        Command::Whiten(w) => commands::whiten_cmd(
            &g,
            &WhitenArgs {
                hurst: w.hurst,
                steps: w.steps,
                cov_file: w.cov_file,
                sample_paths: w.sample_paths,
            },
        ),
        Command::SolveBsde { config } => commands::solve_bsde_cmd(&g, &config),
        Command::Lq { config, damping } => commands::lq_cmd(&g, &config, damping),
        Command::SmpCheck { config, control } => commands::smp_check_cmd(&g, &config, &control),
        Command::Optimize { config, control } => commands::optimize_cmd(&g, &config, control.as_deref()),
        Command::Selftest => commands::selftest_cmd(&g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
