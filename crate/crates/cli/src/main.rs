//! `stiffnet`: dataset generation, training, evaluation, prediction and
//! KAN sweeps. Every command writes a manifest next to its outputs.

mod config;
mod eval;
mod generate;
mod hyper;
mod manifest;
mod predict;
mod svg;
mod sweep;
mod train;

use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stiffnet", version, about = "Stiff circuit dataset synthesis and Crossformer + KAN surrogates")]
struct Cli {
    /// Run everything on one worker thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate records and write a dataset file.
    Generate(generate::GenerateArgs),
    /// Train one model and write its checkpoint, run log and learning curve.
    Train(train::TrainArgs),
    /// Per-record NRMSE of a checkpoint on one split.
    Eval(eval::EvalArgs),
    /// Ground truth vs prediction for one record.
    Predict(predict::PredictArgs),
    /// Train the cross product of KAN settings.
    Sweep(sweep::SweepArgs),
}

/// `--single-thread` wins; otherwise `STIFFNET_THREADS` caps the pool.
fn init_threads(single: bool) -> Result<()> {
    let n = if single {
        Some(1)
    } else {
        match std::env::var("STIFFNET_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| anyhow!("STIFFNET_THREADS must be a positive integer (got {v:?})"))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    init_threads(cli.single_thread)?;
    match &cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Sweep(a) => sweep::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let line = detail
                .lines()
                .find(|l| l.starts_with("error:"))
                .map(|l| l.trim_start_matches("error:").trim().to_string())
                .unwrap_or(msg);
            eprintln!("error: {line}");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
