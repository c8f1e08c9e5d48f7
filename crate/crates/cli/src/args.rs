use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dppnet::model::Variant;

use crate::config::Precision;

/// Environment variable naming the default data directory.
pub const DATA_ENV: &str = "DPPNET_DATA";

#[derive(Debug, Parser)]
#[command(name = "dppnet", version, about = "Question-conditioned dynamic parameter networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON run configuration; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,

    #[arg(long, global = true, value_parser = parse_variant)]
    pub variant: Option<Variant>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: dppnet::error::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/val/test splits of the synthetic scene task.
    Gen,
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Predict answers as JSON lines.
    Predict(PredictArgs),
    /// Run the finite-difference and dense-equivalence oracles.
    Gradcheck,
    /// Bucket occupancy and sign balance of a hash configuration.
    HashStats(HashStatsArgs),
    /// Rank corpus questions by embedding similarity to a query.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.jsonl and val.jsonl.
    #[arg(long, env = DATA_ENV, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Directory with a pre-trained embedding and GRU to start from.
    #[arg(long, value_name = "DIR")]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset with the ground-truth answers.
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,

    /// Checkpoint to predict with.
    #[arg(long, value_name = "DIR", conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,

    /// JSON lines of `{"answers": [...]}` (or `{"answer": ...}`), one per
    /// dataset line, scored instead of running a model.
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,

    /// WUPS threshold; repeat for several. Defaults to 0.9 and 0.0.
    #[arg(long = "wups-threshold", value_name = "T")]
    pub wups_thresholds: Vec<f64>,

    /// Taxonomy file for WUPS; the bundled toy taxonomy when omitted.
    #[arg(long, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,

    /// Skip WUPS entirely.
    #[arg(long, conflicts_with_all = ["wups_thresholds", "taxonomy"])]
    pub no_wups: bool,

    /// Report consensus accuracy over the human answers.
    #[arg(long)]
    pub vqa_consensus: bool,

    /// JSON lines of `{"candidates": [...]}`, one per dataset line; the
    /// model picks only among these.
    #[arg(long, value_name = "FILE", requires = "checkpoint")]
    pub multiple_choice: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,

    #[arg(long, value_name = "FILE", conflicts_with_all = ["question", "features"])]
    pub dataset: Option<PathBuf>,

    #[arg(long, requires = "features", required_unless_present = "dataset")]
    pub question: Option<String>,

    /// Feature vector as a JSON array.
    #[arg(long, value_name = "JSON", requires = "question")]
    pub features: Option<String>,
}

#[derive(Debug, Args)]
pub struct HashStatsArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = dppnet::hashing::DEFAULT_SEED_PSI)]
    pub seed_psi: u64,
    #[arg(long, default_value_t = dppnet::hashing::DEFAULT_SEED_XI)]
    pub seed_xi: u64,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub query: String,

    /// Dataset file whose questions form the corpus.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,

    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}
