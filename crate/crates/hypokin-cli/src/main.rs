//! `hypokin simulate|gap|weights|sweep <config> [--out DIR] [--jobs N] [--seed S]`
//!
//! Exit codes: 0 success, 2 config/schema error, 3 runtime abort, 4 I/O error.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "hypokin", version, about = "Hypocoercive decay of kinetic models on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config, or a manifest.json to re-run.
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "HYPOKIN_OUT", default_value = "hypokin_out")]
    out: PathBuf,
    /// Worker threads for sweeps (default: number of cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Time-integrate one configuration; writes series.csv and manifest.json.
    Simulate(Common),
    /// Tabulate analytic gap bounds against numeric gaps; writes gaps.json.
    Gap(Common),
    /// Measure constants and select Lyapunov weights; writes weights.json.
    Weights(Common),
    /// Run the [sweep] grid in parallel; writes sweep_summary.csv.
    Sweep(Common),
}

fn load(c: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if c.jobs == Some(0) {
        return Err(CliError::Schema("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => commands::simulate_cmd(&load(&c)?, &c.out),
        Command::Gap(c) => commands::gap_cmd(&load(&c)?, &c.out),
        Command::Weights(c) => commands::weights_cmd(&load(&c)?, &c.out),
        Command::Sweep(c) => commands::sweep_cmd(&load(&c)?, &c.out, c.jobs),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hypokin: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
