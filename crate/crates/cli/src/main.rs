//! `segrec`: train, evaluate, benchmark and sample segment-recurrent
//! language models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 non-finite numbers during training or evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(segrec_core::Error),
}

impl From<segrec_core::Error> for Failure {
    fn from(e: segrec_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(segrec_core::Error::Config(_)) => 1,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "segrec", version, about = "Segment-level recurrent language models with relative attention")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from an experiment file.
    Train(TrainArgs),
    /// Score a token stream and print bpc/perplexity as JSON.
    Eval(EvalArgs),
    /// Compare memory-reuse against sliding-window evaluation speed.
    Bench(BenchArgs),
    /// Write per-token losses at several context lengths.
    ExportLosses(ExportArgs),
    /// Relative effective context length over a group of loss tables.
    Recl(ReclArgs),
    /// Sample a continuation of a seed text.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment file (TOML with [corpus], [model] and [train] tables).
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint written periodically and at the end.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON lines; stdout when absent.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stop after this many updates without changing the schedule.
    #[arg(long)]
    pub until: Option<usize>,
    /// Overrides both `model.seed` and `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Valid,
    Test,
}

/// Where evaluation tokens come from.
#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text or binary file, encoded with the checkpoint's vocabulary.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    /// Train/valid/test fractions used by --split.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = config::DEFAULT_SPLIT)]
    pub fractions: Vec<f64>,
    /// Use only the first N tokens.
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Xl,
    Vanilla,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "xl")]
    pub mode: EvalMode,
    /// Memory length for --mode xl (default: the model's eval memory).
    #[arg(long)]
    pub mem_len: Option<usize>,
    /// Window for --mode vanilla (default: the segment length).
    #[arg(long)]
    pub window: Option<usize>,
    /// Vanilla: score every position of non-overlapping windows instead of
    /// sliding one token at a time.
    #[arg(long)]
    pub score_all: bool,
    /// Vanilla sliding: evaluate windows in parallel.
    #[arg(long)]
    pub batched: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Attention lengths to time.
    #[arg(long, value_delimiter = ',', required = true)]
    pub contexts: Vec<usize>,
    /// Tokens scored per measurement.
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Strictly ascending context lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub contexts: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint file stem.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Defaults to the data file name and split.
    #[arg(long)]
    pub stream_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReclArgs {
    /// Loss tables of the group, all over the same stream and contexts.
    #[arg(long, num_args = 1.., required = true)]
    pub tables: Vec<PathBuf>,
    /// TOML with optional r, delta, initial_c, threshold, max_c.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report only this model (default: every model in the group).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub initial_c: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_c: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed text; stdin when absent.
    #[arg(long)]
    pub seed_file: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_tokens: usize,
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Sampling RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write per-step candidate sets and probabilities as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::ExportLosses(a) => commands::export_losses(a),
        Command::Recl(a) => commands::recl(a),
        Command::Generate(a) => commands::generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
