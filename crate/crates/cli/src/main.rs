//! `syq`: train, evaluate, export and cost symmetric quantized networks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use syq_core::Granularity;

use crate::error::{CliError, EXIT_OK};

#[derive(Debug, Parser)]
#[command(
    name = "syq",
    version,
    about = "Symmetric quantization: training, export, evaluation and cost reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write a run directory.
    Train(TrainArgs),
    /// Evaluate an exported model or a checkpoint.
    Eval(EvalArgs),
    /// Convert a checkpoint into a packed SYQ1 model.
    Export(ExportArgs),
    /// Print scaling-coefficient and operation counts for one convolution layer.
    Cost(CostArgs),
}

#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// Use the generated 16×16 blob task instead of MNIST.
    #[arg(long)]
    synthetic: bool,
    /// Directory with the MNIST IDX files.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Full-precision epochs before quantized training starts.
    #[arg(long, value_name = "N")]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate multiplier applied every `--lr-step` steps.
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Steps between learning-rate decays (0 = constant).
    #[arg(long)]
    lr_step: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
    /// Weight bits: 1 = binary, 2 = ternary.
    #[arg(long)]
    wbits: Option<u8>,
    /// Activation bits (2..=8).
    #[arg(long)]
    abits: Option<u8>,
    /// Fractional activation bits (defaults to --abits).
    #[arg(long)]
    fbits: Option<u8>,
    /// Run directory (relative paths resolve under $SYQ_RUN_DIR, default `runs`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long, value_name = "N")]
    train_limit: Option<usize>,
    /// Stop once validation top-1 reaches this fraction.
    #[arg(long, value_name = "FRACTION")]
    target_top1: Option<f64>,
    /// Steps per training-log line.
    #[arg(long, value_name = "N")]
    log_every: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// SYQ1 model or training checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Use only the first N validation samples.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Kernel size.
    #[arg(short = 'K', long = "kernel")]
    k: usize,
    /// Input feature maps.
    #[arg(short = 'I', long = "inputs")]
    i: usize,
    /// Output feature maps.
    #[arg(short = 'N', long = "outputs")]
    n: usize,
    /// Input spatial size.
    #[arg(short = 'F', long = "size")]
    f: usize,
    /// layer, row, pixel, asymmetric, grouping, channel or all.
    #[arg(long, default_value = "all")]
    method: String,
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    s.parse::<Granularity>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Export(a) => commands::export(a),
        Command::Cost(a) => commands::cost(a),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn report(e: &CliError) {
    eprintln!("error: {e}");
}
