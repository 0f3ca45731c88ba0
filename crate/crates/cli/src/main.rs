//! `pmtf`: ingest, train, evaluate and inspect multi-aspect rating models.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pmtf", version, about = "Multi-aspect tensor factorization with learned aspect covariances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a ratings file, drop sparse users and items, and split it.
    Ingest(IngestArgs),
    /// Fit a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Dump learned correlation matrices and their total correlation.
    InspectCovariance(InspectArgs),
    /// Sample a dataset from the model with known parameters.
    Synth(SynthArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory that receives train.tsv, val.tsv, test.tsv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "\t")]
    pub delimiter: char,
    #[arg(long, default_value = "NA")]
    pub missing_token: String,
    /// Allowed rating range as `min:max`, or `unbounded`.
    #[arg(long, default_value = "1:5")]
    pub scale: String,
}

#[derive(Args)]
pub struct TrainArgs {
    /// One of bpmr, pmtf, ptf, bpr.
    #[arg(long)]
    pub model: String,
    /// Flat `key = value` settings; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Overrides `max_em_steps` from the config.
    #[arg(long)]
    pub max_em_steps: Option<usize>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Progress CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    pub ndcg_k: Vec<usize>,
    #[arg(long, default_value_t = 150)]
    pub candidates: usize,
    /// Any of random, correlation, highest-rating.
    #[arg(long, value_delimiter = ',', default_value = "correlation,random")]
    pub mec_selector: Vec<String>,
    /// graded or binary.
    #[arg(long, default_value = "graded")]
    pub gain: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory that receives metrics.csv, groups.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// User ids whose personalized correlation to dump.
    #[arg(long, value_delimiter = ',')]
    pub user: Vec<String>,
    /// Item ids whose personalized correlation to dump.
    #[arg(long, value_delimiter = ',')]
    pub item: Vec<String>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long = "M", default_value_t = 200)]
    pub m: usize,
    #[arg(long = "N", default_value_t = 100)]
    pub n: usize,
    #[arg(long = "K", default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub factor_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub cov_scale: f64,
    /// Round and clamp ratings to 1..5.
    #[arg(long)]
    pub discretize: bool,
    #[arg(long, default_value_t = 1.0)]
    pub personal_mix: f64,
    /// Common off-diagonal correlation of the global covariance.
    #[arg(long)]
    pub correlation: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub exposure_bias: f64,
    #[arg(long, default_value_t = 0.0)]
    pub offset: f64,
    /// Directory that receives dataset.tsv, truth.ckpt and the correlation CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradCheckArgs {
    /// An objective name, or `all`.
    #[arg(long, default_value = "all")]
    pub objective: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::InspectCovariance(a) => commands::inspect_covariance(a),
        Command::Synth(a) => commands::synth(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pmtf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
