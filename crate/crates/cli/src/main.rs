//! `biaslab`: build the corpora, pretrain the testbed, evaluate, locate,
//! fine-tune and compare.
//!
//! Exit codes: 0 on success, 1 when an `--assert-*` gate fails, 2 on any
//! usage, validation or runtime error.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, FinetuneArgs, GateFailure, GenDataArgs, LocateArgs, PretrainArgs, ReportArgs};

#[derive(Parser)]
#[command(name = "biaslab", version, about = "Probe and mitigate gender bias in causal language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and split the bias corpus and build the hint corpus.
    GenData(GenDataArgs),
    /// Synthesize the skewed corpus and train the micro-LM testbed.
    Pretrain(PretrainArgs),
    /// Score a bias set and a hint set with a local model or a remote endpoint.
    Eval(EvalArgs),
    /// Rank blocks by BMI and run the seed-resampling stability check.
    Locate(LocateArgs),
    /// Fine-tune the located block (LFTF) or every parameter (FPFT).
    Finetune(FinetuneArgs),
    /// Compare runs and write case tables and plot data.
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Eval(a) => commands::eval(a),
        Command::Locate(a) => commands::locate(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<GateFailure>() => {
            eprintln!("gate failed: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
