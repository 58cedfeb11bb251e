//! `glatts`: tokenizer training, toy corpus generation, model training,
//! initial-state tuning, generation, rank sweeps and throughput benchmarks.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure of a command, carrying its exit status and error class.
#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn assertion(message: impl fmt::Display) -> Self {
        Self {
            exit: 1,
            code: "assertion",
            message: message.to_string(),
        }
    }
}

impl From<glatts_core::Error> for CliError {
    fn from(e: glatts_core::Error) -> Self {
        use glatts_core::Error as E;
        let (exit, code) = match &e {
            E::Io(_) => (2, "io"),
            E::Numeric { .. } => (3, "numeric"),
            E::Format(_) => (1, "format"),
            E::Contract(_) => (1, "config"),
            E::Invariant(_) => (1, "assertion"),
        };
        Self {
            exit,
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        glatts_core::Error::from(e).into()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "glatts", version, about = "Gated linear attention text-to-token toolkit")]
pub struct Cli {
    /// Global seed; falls back to LINA_SEED, then to the config value.
    #[arg(long, global = true, env = "LINA_SEED")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a BPE vocabulary on the texts of a corpus.
    Tokenizer(TokenizerArgs),
    /// Write a synthetic toy-codec corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model; writes a checkpoint, its vocabulary and metrics.
    Train(TrainArgs),
    /// Tune initial states of a frozen model on one speaker.
    TuneState(TuneStateArgs),
    /// Sample audio tokens for a text.
    Generate(GenerateArgs),
    /// Teacher-forced loss and token accuracy on a corpus.
    Evaluate(EvaluateArgs),
    /// Rank x learning-rate grid of state-tuning test losses.
    SweepRank(SweepRankArgs),
    /// GLA versus softmax generation throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TokenizerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = glatts_core::tokenizer::DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 13)]
    pub speakers: usize,
    /// How many of the speakers are held out (named h0, h1, ...).
    #[arg(long, default_value_t = 3)]
    pub heldout: usize,
    #[arg(long, default_value_t = 50)]
    pub utts: usize,
    #[arg(long, default_value_t = 24)]
    pub lexicon: usize,
    #[arg(long, default_value_t = 64)]
    pub audio_vocab: usize,
    /// Renderings per word and speaker; 1 makes speakers deterministic.
    #[arg(long, default_value_t = 3)]
    pub variants: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// key = value file over model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Existing vocabulary; trained on the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Comma-separated speakers left out of training.
    #[arg(long, value_delimiter = ',')]
    pub exclude_speakers: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.bpe` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TuneStateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub speaker: String,
    /// Positive integer or `full` [default: 1].
    #[arg(long)]
    pub rank: Option<String>,
    /// [default: 0.1]
    #[arg(long)]
    pub lr: Option<f64>,
    /// key = value file over state-tuning settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trailing utterances used to pick the best bundle.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub text: String,
    /// Whitespace-separated audio ids to continue from.
    #[arg(long, default_value = "")]
    pub prompt_audio: String,
    #[arg(long)]
    pub states: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Defaults to the model's max_len.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub speaker: Option<String>,
    #[arg(long)]
    pub states: Option<PathBuf>,
    /// Evaluate only the last `n` utterances (after speaker filtering).
    #[arg(long)]
    pub last: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepRankArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,full")]
    pub ranks: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1")]
    pub lrs: Vec<f64>,
    /// Speakers to tune; defaults to every speaker in the corpus.
    #[arg(long, value_delimiter = ',')]
    pub speakers: Vec<String>,
    /// Trailing utterances of each speaker used as its test split.
    #[arg(long, default_value_t = 10)]
    pub test_utts: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// key = value file over benchmark model settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 1024)]
    pub len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error:usage: {first}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error:{}: {}", e.code, e.message.replace('\n', " "));
            ExitCode::from(e.exit)
        }
    }
}
