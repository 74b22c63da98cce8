//! `alphadist` command-line entry point.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "alphadist", version, about = "α-divergence distillation for weight-sharing supernets")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Wins over the file and ALPHADIST_* variables.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as --set out=DIR).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supernet with sandwich sampling and in-place distillation.
    Train,
    /// Evolutionary search over sub-networks of a trained supernet.
    Search,
    /// Evaluate every sub-network of a checkpoint (or the extremes of large spaces).
    Eval,
    /// Distill a frozen teacher checkpoint into a small standalone student.
    KdSingle,
    /// Write α-sweep tables for the canonical scenarios and any `pairs`.
    DivergenceDemo,
    /// Print every config key with its default and description.
    Keys,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Keys = cli.command {
        for (k, v, help) in config::KEYS {
            println!("{k:<18} {:<20} {help}", if v.is_empty() { "(unset)" } else { v });
        }
        return Ok(());
    }
    let (raw, cfg) = config::load(cli.config.as_deref(), std::env::vars(), &cli.set, cli.out.as_deref())
        .map_err(|e| CliError::Config(e.0))?;
    match cli.command {
        Command::Train => commands::train(&raw, &cfg),
        Command::Search => commands::search(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::KdSingle => commands::kd_single(&cfg),
        Command::DivergenceDemo => commands::divergence_demo(&cfg),
        Command::Keys => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
