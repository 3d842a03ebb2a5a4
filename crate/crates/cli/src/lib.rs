//! `uacvae` command line: corpus generation, training, evaluation, UE
//! scoring and a chat REPL.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use uacvae_core::corpus::CorpusError;
use uacvae_core::metrics::MetricError;
use uacvae_core::model::{DecodeStrategy, ModelError, ModelMode};
use uacvae_core::trainer::TrainError;
use uacvae_core::ue::JudgeError;

pub use manifest::{beside, resolve_seed, RunManifest, SeedSource, BUILD_ID, RUN_FILE};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::NonFinite { .. } | TrainError::NanGradient { .. } => CliError::Numeric(msg),
            TrainError::Model(m) => m.into(),
            TrainError::Metric(m) => m.into(),
            TrainError::Incompatible { .. } => CliError::Usage(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } | ModelError::Numerics(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// `rule`, `gold`, or the base URL of an NLI service.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JudgeArg {
    Rule,
    Gold,
    Remote(String),
}

impl FromStr for JudgeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rule" => Ok(Self::Rule),
            "gold" => Ok(Self::Gold),
            url if url.starts_with("http://") || url.starts_with("https://") => Ok(Self::Remote(url.to_string())),
            other => Err(format!("unknown judge {other:?}; expected rule, gold or an http(s) URL")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "uacvae", version = BUILD_ID, about = "Uncertainty-aware CVAE dialogue generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write checkpoints plus a step log.
    Train(TrainArgs),
    /// Generate responses for a test set and write a metric report.
    Eval(EvalArgs),
    /// Score responses with the utterance-entailment metric.
    Ue(UeArgs),
    /// Chat with a checkpoint, one turn per input line.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Generator settings as JSON; missing fields take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Fraction of examples with a corrupted context.
    #[arg(long)]
    pub corruption: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory; defaults to the config's `out_dir`, then `checkpoints`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<ModelMode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "rule")]
    pub judge: JudgeArg,
    #[arg(long, default_value = "greedy")]
    pub strategy: DecodeStrategy,
    #[arg(long)]
    pub mode: Option<ModelMode>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct UeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// One response per line, in test-set order.
    #[arg(long, conflicts_with = "ckpt")]
    pub responses: Option<PathBuf>,
    /// Generate the responses with this checkpoint instead.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "rule")]
    pub judge: JudgeArg,
    #[arg(long, default_value = "greedy")]
    pub strategy: DecodeStrategy,
    #[arg(long)]
    pub mode: Option<ModelMode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub mode: Option<ModelMode>,
    #[arg(long, default_value = "greedy")]
    pub strategy: DecodeStrategy,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emotion label used as the condition.
    #[arg(long, default_value = "joyful", conflicts_with = "persona")]
    pub emotion: String,
    /// Persona statement; repeat for several.
    #[arg(long)]
    pub persona: Vec<String>,
}

/// Parses `args`, runs one subcommand and returns the exit code. Chat reads
/// from `input`; reports without `--out` go to `output`.
pub fn run<I, T>(args: I, input: impl BufRead, output: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a, output),
        Command::Train(a) => commands::train(&a, output),
        Command::Eval(a) => commands::eval(&a, output),
        Command::Ue(a) => commands::ue(&a, output),
        Command::Chat(a) => commands::chat(&a, input, output),
    };
    let _ = output.flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
