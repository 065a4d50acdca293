//! `snmm`: config-driven estimation and simulation.
//!
//! Exit status is 0 on success, 2 for configuration and input errors, and 3
//! when estimation itself fails. Failures print one JSON object to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snmm::Error;

mod commands;
mod config;

use commands::{cmd_estimate, cmd_generate, cmd_simulate, cmd_validate, Overrides};

#[derive(Debug, Parser)]
#[command(name = "snmm", version, about = "Structural nested mean models for panels with interference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a blip model to a panel and report estimates with uncertainty.
    Estimate { config: PathBuf },
    /// Run a Monte Carlo study on a simulation design.
    Simulate { config: PathBuf },
    /// Check a config and its data without fitting.
    Validate { config: PathBuf },
    /// Write one simulated data set as panel and graph files.
    Generate { config: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() || matches!(e, Error::SpecParse { .. }) {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(&Error::Config(format!("cannot start {n} threads: {e}")));
        }
    }
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
    };
    let result = match &cli.command {
        Command::Estimate { config } => cmd_estimate(config, &overrides),
        Command::Simulate { config } => cmd_simulate(config, &overrides),
        Command::Validate { config } => cmd_validate(config),
        Command::Generate { config } => cmd_generate(config, &overrides),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let code = exit_code(e);
    let body = serde_json::json!({
        "error": e.code(),
        "message": e.to_string(),
        "exit_code": code,
    });
    eprintln!("{body}");
    ExitCode::from(code)
}
