//! `faithlog`: parse logs, generate corpora, train, and evaluate faithfulness.
//!
//! Exit codes: 0 success, 2 input error, 3 data/config incompatibility,
//! 4 checkpoint mismatch.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "faithlog", version, about = "Faithful log anomaly detection experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a raw log into templates and windowed sequences.
    Parse(ParseArgs),
    /// Generate a synthetic corpus.
    Generate(GenerateArgs),
    /// Stratified train/test split of a sequence dataset.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Per-sequence detections.
    Detect(EvalArgs),
    /// Root-cause localization and support-rate report.
    Evaluate(EvaluateArgs),
    /// Per-sequence perturbation verdicts.
    Perturb(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Raw log, one message per line.
    pub log: PathBuf,
    /// Sidecar with one 0/1 anomaly tag per log line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Template store path (default: `<out>.templates`).
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.4)]
    pub similarity_threshold: f64,
    #[arg(long, default_value_t = 100)]
    pub max_children: usize,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    /// Window stride (default: the window size).
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 50)]
    pub n_templates: usize,
    #[arg(long, default_value_t = 5)]
    pub n_anomaly_templates: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_sequences: usize,
    #[arg(long, default_value_t = 20)]
    pub seq_length: usize,
    #[arg(long, default_value_t = 0.3)]
    pub anomaly_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_rate: f64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    /// Template store used by the embedding hash.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Dataset scored with detection F1 after every epoch.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Training log path (default: `<out>.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Train without the negative attention pathway.
    #[arg(long)]
    pub no_negative_pathway: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Cut-offs for HR/PR/MAP.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub ks: Vec<usize>,
    /// Verdict file written alongside the report.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
