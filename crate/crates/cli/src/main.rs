//! `cycleseg` binary: phantom data generation, semi-supervised training,
//! prediction, evaluation, and the check/benchmark suites, with stable exit
//! codes for scripting.

mod cli;
mod commands;
mod config;
mod plot;

use clap::Parser;
use cycleseg::Error;

/// Stable mapping from failure class to exit code. Shape mismatches
/// surface when a checkpoint disagrees with the data or network settings,
/// so they share the checkpoint code.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric { .. } => 3,
        Error::Checkpoint(_) | Error::Shape(_) => 4,
        Error::MissingInput(_) => 5,
        _ => 1,
    }
}

fn main() {
    let parsed = cli::Cli::parse();
    let result = match &parsed.command {
        cli::Command::Phantom(args) => commands::cmd_phantom(args),
        cli::Command::Train(args) => commands::cmd_train(args),
        cli::Command::Predict(args) => commands::cmd_predict(args),
        cli::Command::Eval(args) => commands::cmd_eval(args),
        cli::Command::Check(args) => commands::cmd_check(args),
        cli::Command::Ablation(args) => commands::cmd_ablation(args),
    };
    if let Err(err) = result {
        eprintln!("error: {}", commands::describe_failure(&err));
        std::process::exit(exit_code(&err));
    }
}
