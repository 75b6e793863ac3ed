//! `survtopics` — reproducible pipeline runner: ingest or synthesize a
//! corpus, train the joint model, cross-validate hyperparameters, evaluate
//! concordance, and render interpretation artifacts. Every command leaves a
//! digest manifest behind and refuses stale upstream files.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use survtopics::checkpoint::CheckpointError;
use survtopics::corpus::CorpusError;
use survtopics::eval::EvalError;
use survtopics::interpret::InterpretError;
use survtopics::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    BadArgs(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing upstream artifact: {0}")]
    MissingUpstream(String),
    #[error("{what} is stale: recorded digest {expected}, found {actual}")]
    Stale {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("{0}")]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Interpret(#[from] InterpretError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable machine-parseable error code for the exit line.
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadArgs(_) => "bad-args",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::MissingUpstream(_) => "missing-upstream",
            Self::Stale { .. } => "stale-artifact",
            Self::Artifact(_) | Self::Checkpoint(_) => "artifact",
            Self::Corpus(_) => "schema",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
            Self::Interpret(_) => "interpret",
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Random seed; overrides the config file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config file mirroring this command's settings; flags win on
    /// conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory artifacts are read from and written to.
    #[arg(long)]
    pub outdir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Number of topics.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight on the survival term.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Dirichlet pseudo-count the prior mimics.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Encoder hidden width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// L1 penalty on the topic deviation matrix.
    #[arg(long = "l1-b")]
    pub l1_b: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Subjects to generate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Vocabulary size.
    #[arg(long)]
    pub d: Option<usize>,
    /// Planted topic count.
    #[arg(long)]
    pub k: Option<usize>,
    /// Words drawn per subject.
    #[arg(long)]
    pub doc_length: Option<usize>,
    /// Target censored fraction.
    #[arg(long)]
    pub censor_rate: Option<f64>,
    /// Dirichlet pseudo-count of the membership prior.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Log-deviation magnitude of planted topic words.
    #[arg(long)]
    pub b_scale: Option<f64>,
    /// Comma-separated hazard coefficients, one per topic.
    #[arg(long)]
    pub beta_star: Option<String>,
    /// Held-out fraction for the train/test split.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Cross-validation folds recorded in the split (0 disables).
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Input CSV with id, time, event, and feature columns.
    #[arg(long)]
    pub csv: PathBuf,
    /// Feature spec JSON (name, kind, bins or categories).
    #[arg(long)]
    pub specs: PathBuf,
    /// Held-out fraction for the train/test split.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Cross-validation folds recorded in the split (0 disables).
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Fit the two-stage baseline (unsupervised topics, then a Cox fit)
    /// instead of the joint model.
    #[arg(long)]
    pub two_stage: bool,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Hyperparameter grid as comma-separated k:eta pairs, e.g.
    /// `2:0.1,2:1,3:0.1`; defaults to the standard sweep.
    #[arg(long)]
    pub grid: Option<String>,
    /// Cross-validation fold count.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Selection rule: `best` (highest score) or `few` (fewest topics
    /// within 0.005 of the best).
    #[arg(long, default_value = "best")]
    pub select: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Bootstrap replicates for the confidence interval.
    #[arg(long)]
    pub n_boot: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Words listed per topic in the top-words export.
    #[arg(long)]
    pub top_words: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known topics and hazards.
    Synth(SynthArgs),
    /// Build a vocabulary and counts corpus from a raw CSV.
    Ingest(IngestArgs),
    /// Train the joint model (or the two-stage baseline) on the train split.
    Train(TrainArgs),
    /// Cross-validate a hyperparameter grid on the train split.
    Cv(CvArgs),
    /// Score the test split: concordance with a bootstrap interval.
    Evaluate(EvaluateArgs),
    /// Export ratio table, heatmap, and top words for a trained model.
    Interpret(InterpretArgs),
}

#[derive(Debug, Parser)]
#[command(name = "survtopics", version, about = "Survival-supervised topic model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[bad-args]: {first}");
            std::process::exit(2);
        }
    };

    let result = match &cli.command {
        Command::Synth(args) => commands::cmd_synth(args),
        Command::Ingest(args) => commands::cmd_ingest(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Cv(args) => commands::cmd_cv(args),
        Command::Evaluate(args) => commands::cmd_evaluate(args),
        Command::Interpret(args) => commands::cmd_interpret(args),
    };
    if let Err(e) = result {
        let msg = e.to_string().replace('\n', "; ");
        eprintln!("error[{}]: {msg}", e.code());
        std::process::exit(1);
    }
}
