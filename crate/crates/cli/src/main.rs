use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "ppv", version, about = "Decompose posterior predictive variance over modeling choices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    Exact,
    Mc,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Directory for result files and the manifest.
    #[arg(long, default_value = "ppv-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List every decomposition plan over K factors.
    Enumerate {
        #[arg(short = 'k', value_parser = clap::value_parser!(u64).range(1..=6))]
        k: u64,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Decompose the predictive variance of a model document under one plan.
    Decompose(commands::DecomposeArgs),
    /// Run a bundled analysis.
    Example {
        #[command(subcommand)]
        name: commands::ExampleName,
    },
    /// Run the simulated sample-size sweep.
    Sweep(commands::SweepArgs),
}

/// How a failed run maps onto the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or malformed inputs: exit 2.
    Usage(anyhow::Error),
    /// A conservation or failure-rate check did not hold: exit 1.
    Invariant(String),
    /// Anything else that stopped the run: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<ppv_core::Error>() {
            Some(core) if is_input_error(core) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn is_input_error(e: &ppv_core::Error) -> bool {
    use ppv_core::Error::*;
    matches!(
        e,
        InvalidArgument(_)
            | InvalidModel(_)
            | InvalidPlan(_)
            | PlanSyntax { .. }
            | Document { .. }
            | Data(_)
            | MissingCovariate(_)
    )
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PPV_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("PPV_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    configure_threads().map_err(Failure::Usage)?;
    match cli.command {
        Command::Enumerate { k, format, out } => commands::enumerate(k as usize, format, &out.out),
        Command::Decompose(args) => commands::decompose(args),
        Command::Example { name } => commands::example(name),
        Command::Sweep(args) => commands::sweep(args),
    }
}

pub fn display_path(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
