//! `kvverify` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or validation error, 1 internal error.
//! Diagnostics go to stderr; stdout carries at most one summary line.

mod commands;
mod report;
mod sweep;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "kvverify", version, about = "Simulate and analyze compressed-KV drafting with full-KV verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write report.json plus metrics.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Workload CSV; defaults to the config's homogeneous batch.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "staggered")]
        schedule: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the closed-form models and write report.json plus a CSV.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the cross product of `--vary key=v1,v2,...` axes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "vary")]
        vary: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cumulative KL between a toy model and a perturbed copy, by direct
    /// enumeration and by the chain rule.
    KlDemo {
        #[arg(long, default_value_t = 3)]
        vocab: usize,
        #[arg(long = "T", default_value_t = 6)]
        t: usize,
        #[arg(long, default_value_t = 0.3)]
        perturbation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Intra,
    Inter,
    Compose,
}

#[derive(Debug)]
pub struct CliError {
    code: u8,
    error: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Display) -> Self {
        Self { code: 2, error: anyhow::anyhow!("{e}") }
    }

    pub fn internal(e: impl Display) -> Self {
        Self { code: 1, error: anyhow::anyhow!("{e}") }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, trace, schedule, seed, out } => {
            commands::simulate(&config, trace.as_deref(), &schedule, seed, &out)
        }
        Command::Analyze { config, mode, out } => commands::analyze(&config, mode, &out),
        Command::Sweep { config, vary, seed, out } => commands::sweep(&config, &vary, seed, &out),
        Command::KlDemo { vocab, t, perturbation, seed, out } => commands::kl_demo(vocab, t, perturbation, seed, &out),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
