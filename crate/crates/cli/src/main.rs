//! `tssan`: dataset preparation, training, evaluation and attention export.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input errors,
//! 3 when training diverges to a non-finite loss.

mod config;
mod eval;
mod export;
mod prepare;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tssan", version, args_override_self = true, about = "Temporal-segment self-attention networks for skeleton action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write sample files and a manifest from raw clips or the synthetic generator.
    Prepare(prepare::PrepareArgs),
    /// Train a model; writes metrics, timing and checkpoints under --out.
    Train(train::TrainArgs),
    /// Print top-1 and top-5 accuracy of a checkpoint on a manifest.
    Eval(eval::EvalArgs),
    /// Export attention probabilities of one sample as CSV matrices and PGM heatmaps.
    ExportAttention(export::ExportArgs),
}

/// Errors whose exit code is not the default 2.
#[derive(Debug)]
pub struct Diverged(pub tssan_core::Error);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training diverged: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Diverged>().is_some() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::ExportAttention(a) => export::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
