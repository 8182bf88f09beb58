//! `mem`: command-line driver for the masked event modeling pipeline.

mod config;
mod error;
mod output;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Config, Overrides, Stage};
use error::CliError;

#[derive(Parser)]
#[command(name = "mem", version, about = "Masked event modeling: data, tokenizer, pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled event dataset
    GenData(StageArgs),
    /// Train the dVAE tokenizer
    TrainDvae(StageArgs),
    /// Pretrain a ViT backbone (masked-token or pixel objectives)
    Pretrain(StageArgs),
    /// Finetune a backbone (or a fresh one) for classification
    Finetune(StageArgs),
    /// Linear probe on a frozen backbone
    Probe(StageArgs),
    /// Evaluate a finetuned classifier on the test split
    Eval(StageArgs),
    /// Render histograms and masked reconstructions as PPM images
    Render(StageArgs),
    /// Few-label experiment: pretrained vs scratch at 100/50/20/10 % labels
    ReproFewlabel(StageArgs),
}

#[derive(clap::Args)]
struct StageArgs {
    /// JSON object with flat dotted keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue into an existing output directory
    #[arg(long)]
    resume: bool,
}

fn execute(stage: Stage, args: StageArgs) -> Result<serde_json::Value, CliError> {
    let overrides = Overrides { seed: args.seed, steps: args.steps, out: args.out };
    let config = Config::load(stage, args.config.as_deref(), &overrides)?;
    stages::run(&config, args.resume)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (stage, args) = match cli.command {
        Command::GenData(a) => (Stage::GenData, a),
        Command::TrainDvae(a) => (Stage::TrainDvae, a),
        Command::Pretrain(a) => (Stage::Pretrain, a),
        Command::Finetune(a) => (Stage::Finetune, a),
        Command::Probe(a) => (Stage::Probe, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Render(a) => (Stage::Render, a),
        Command::ReproFewlabel(a) => (Stage::ReproFewlabel, a),
    };
    match execute(stage, args) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mem {}: {e}", stage.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
