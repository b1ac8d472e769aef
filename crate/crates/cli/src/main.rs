use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prefalign_core::Error;

mod commands;
mod workdir;

#[derive(Parser, Debug)]
#[command(name = "prefalign", version, about = "Synthetic multi-objective preference alignment laboratory")]
struct Cli {
    /// JSON run configuration; defaults are used for absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, env = "PREFALIGN_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Master seed (shorthand for `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `--set modpo.beta=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the reward environment and write its manifest.
    GenEnv,
    /// Generate demonstration and comparison datasets with splits.
    GenData,
    /// Train one phase and write its checkpoint and report.
    Train {
        phase: Phase,
        /// Objective index for `dpo` and `reward`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Exact optimal policies, Pareto table, and identity residuals.
    Oracle,
    /// Evaluate checkpoints against the ground-truth rewards.
    Eval {
        /// Checkpoints to evaluate; defaults to every file in `checkpoints/`.
        checkpoints: Vec<PathBuf>,
    },
    /// Weight sweep over the configured grid.
    Sweep {
        /// Also run the sweep under the objective-1 (low penalty) reference.
        #[arg(long)]
        reference_swap: bool,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Sft,
    Dpo,
    Reward,
    Modpo,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::MissingDependency(_) => 3,
        Error::NumericFailure { .. } | Error::InfiniteDivergence { .. } => 4,
        Error::UnsupportedScale(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
