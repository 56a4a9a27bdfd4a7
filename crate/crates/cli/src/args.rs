use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kgc_core::decoder::FeatureActivation;
use kgc_core::kg::{Split, TupleFormat};
use kgc_core::model::Variant;
use kgc_core::train::MaskDirection;

#[derive(Debug, Parser)]
#[command(name = "kgc", version, about = "Knowledge graph completion for sparse commonsense graphs")]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &'static str {
        match self.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print node, edge and relation counts, density and in-degree.
    Stats(StatsArgs),
    /// Write a seeded random train/dev/test split of every edge.
    Split(SplitArgs),
    /// Add `sim` edges between nodes with similar text embeddings.
    Densify(DensifyArgs),
    /// Train a model and keep the checkpoint with the best dev MRR.
    Train(TrainArgs),
    /// Filtered ranking metrics of a checkpoint.
    Eval(EvalArgs),
    /// Compare metrics with and without shuffled graph embeddings.
    PermTest(PermTestArgs),
    /// Retrain at decreasing graph densities and report test metrics.
    AblateDensity(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    /// relation, source, target
    RelHeadTail,
    /// source, relation, target
    HeadRelTail,
}

impl From<FormatArg> for TupleFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::RelHeadTail => TupleFormat::RelHeadTail,
            FormatArg::HeadRelTail => TupleFormat::HeadRelTail,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Where the graph comes from.
#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    /// Directory with train.tsv and optional dev.tsv / test.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Column order of the tuple files.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Also write stats.json here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Train, dev and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("threshold").required(true).args(["tau", "cap", "tail"]))]
pub struct DensifyArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Binary embedding file; phrases come from the sidecar next to it.
    #[arg(long)]
    pub embeddings: PathBuf,

    /// Phrase list, if not the default sidecar.
    #[arg(long)]
    pub phrases: Option<PathBuf>,

    /// Keep pairs with cosine at or above this value.
    #[arg(long)]
    pub tau: Option<f64>,

    /// Lowest 0.01 grid threshold adding at most this many pairs.
    #[arg(long)]
    pub cap: Option<usize>,

    /// Threshold at mean + k·std of sampled pair similarities.
    #[arg(long)]
    pub tail: bool,

    #[arg(long, default_value_t = kgc_core::embed::DEFAULT_TAIL_K)]
    pub tail_k: f64,

    #[arg(long, default_value_t = kgc_core::embed::DEFAULT_TAIL_SAMPLES)]
    pub tail_samples: usize,

    /// Rows per tile of the pairwise scan.
    #[arg(long, default_value_t = 1024)]
    pub block: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Training inputs and hyperparameter overrides. Each flag overrides the
/// field of the same name in the JSON config.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainOverrides {
    /// JSON file with training fields and optional paths.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub embeddings: Option<PathBuf>,

    #[arg(long)]
    pub phrases: Option<PathBuf>,

    /// `sim` edge TSV from `kgc densify`.
    #[arg(long)]
    pub sim: Option<PathBuf>,

    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub subgraph_edges: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    #[arg(long)]
    pub mask_horizon: Option<usize>,
    #[arg(long, value_parser = parse_direction)]
    pub mask_direction: Option<MaskDirection>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub gcn_layers: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub kernel_width: Option<usize>,
    #[arg(long, value_parser = parse_activation)]
    pub conv_activation: Option<FeatureActivation>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_direction(s: &str) -> Result<MaskDirection, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected reveal_text or hide_text".into())
}

fn parse_activation(s: &str) -> Result<FeatureActivation, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected relu or linear".into())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// A trained checkpoint and the inputs it needs. Paths recorded in the
/// checkpoint are used when the flags are absent.
#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub embeddings: Option<PathBuf>,

    #[arg(long)]
    pub phrases: Option<PathBuf>,

    #[arg(long)]
    pub sim: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,

    #[arg(long, default_value_t = kgc_core::eval::DEFAULT_EVAL_BATCH)]
    pub batch_size: usize,

    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: CheckpointArgs,
}

#[derive(Debug, Args)]
pub struct PermTestArgs {
    #[command(flatten)]
    pub inputs: CheckpointArgs,

    /// Seed of the column permutations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Target densities, highest first.
    #[arg(long, value_delimiter = ',', required = true)]
    pub densities: Vec<f64>,

    #[command(flatten)]
    pub overrides: TrainOverrides,
}
