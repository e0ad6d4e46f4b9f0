//! `moelab`: batch corpora, train, evaluate, analyze and sample merged-MoE
//! language models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moelab_core::Error;

#[derive(Parser)]
#[command(
    name = "moelab",
    version,
    about = "Desk-scale lab for fully differentiable MoE language models"
)]
struct Cli {
    /// Worker threads for per-instance work; 1 is fully sequential.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-domain corpus (arithmetic vs. prose).
    Synth(SynthArgs),
    /// Pack a corpus into fixed-length training instances.
    Batch(BatchArgs),
    /// Train a model on an instances file.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on an instances file.
    Eval(EvalArgs),
    /// Utilization, specialization, FLOPs and loss-gap reports.
    Analyze(AnalyzeArgs),
    /// Greedy text generation from a checkpoint.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    docs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderKind {
    Hashed,
    File,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "sim")]
    mode: String,
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
    #[arg(long, value_enum, default_value = "hashed")]
    embedder: EmbedderKind,
    /// Embeddings file for `--embedder file`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Hashed embedding dimension.
    #[arg(long, default_value_t = moelab_core::batching::HASH_DIM)]
    dim: usize,
    /// Neighbors retrieved per document.
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; omitted fields take the desk-scale defaults.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `dotted.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides `plan.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint directory (its config wins).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Held-out instances for periodic evaluation.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Stop after this many total steps and checkpoint.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupBy {
    Domain,
    None,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "domain")]
    group_by: GroupBy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Utilization,
    Specialization,
    Flops,
    Lossgap,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    report: Report,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Instances to route for the specialization report.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Routing trace written by `train` (utilization, specialization).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Steps per utilization window.
    #[arg(long, default_value_t = moelab_core::analysis::DEFAULT_WINDOW)]
    window: u64,
    /// Metrics logs for the loss-gap report.
    #[arg(long)]
    dense_metrics: Option<PathBuf>,
    #[arg(long)]
    moe_metrics: Option<PathBuf>,
    /// Sizes for the FLOPs report when no checkpoint is given.
    #[arg(long)]
    experts: Option<u64>,
    #[arg(long)]
    segment_length: Option<u64>,
    #[arg(long, default_value_t = 4096)]
    context_length: u64,
    #[arg(long, default_value_t = 4096)]
    model_dim: u64,
    #[arg(long, default_value_t = 11008)]
    ffn_dim: u64,
    /// CSV output file; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Routing {
    Prompt,
    Segment,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long, value_enum, default_value = "prompt")]
    routing: Routing,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
