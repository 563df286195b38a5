//! `voxseg` command-line driver.
//!
//! Subcommands: `phantom`, `train`, `predict`, `uncertainty`, `evaluate`,
//! `calibrate-postproc`. Every run writes a `manifest.json` next to its
//! outputs with the fully resolved arguments and seeds, so any run can be
//! replayed bit-identically.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "voxseg", version, about = "Patch-based 3D segmentation with uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom cases with ground-truth labels.
    Phantom(commands::phantom::PhantomArgs),
    /// Train a network on a directory of labelled cases.
    Train(commands::train::TrainArgs),
    /// Predict label maps with one checkpoint or an ensemble.
    Predict(commands::predict::PredictArgs),
    /// Produce a prediction plus uncertainty maps per case.
    Uncertainty(commands::uncertainty::UncertaintyArgs),
    /// Score predictions (and optional uncertainty maps) against ground truth.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Sweep connected-component ratio thresholds on labelled data.
    CalibratePostproc(commands::calibrate::CalibrateArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; everything else is
            // usage error 1.
            let _ = e.print();
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => std::process::exit(0),
                _ => std::process::exit(1),
            }
        }
    };
    let result = match cli.command {
        Command::Phantom(args) => commands::phantom::run(&args),
        Command::Train(args) => commands::train::run(&args),
        Command::Predict(args) => commands::predict::run(&args),
        Command::Uncertainty(args) => commands::uncertainty::run(&args),
        Command::Evaluate(args) => commands::evaluate::run(&args),
        Command::CalibratePostproc(args) => commands::calibrate::run(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
