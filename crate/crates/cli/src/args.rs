use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "burst-vit", version, about = "Burst-spiking vision transformer engine")]
pub struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, checkpoint and effective config.
    Train(TrainArgs),
    /// Top-1 accuracy and per-class counts of a checkpoint.
    Eval(EvalArgs),
    /// Train one model per burst level and tabulate accuracy.
    SweepBurst(SweepArgs),
    /// Per-image operation counts and energy of instrumented inference.
    Energy(EnergyArgs),
    /// Write the patch adjacency mask of a token grid.
    AdjacencyDump(AdjacencyArgs),
    /// Time the spike kernels and the engine.
    Bench(BenchArgs),
}

/// Config file, overrides, seed and output directory.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config JSON (defaults to the built-in BSViT-1-32 synthetic setup).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` applied after the config is loaded; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces `model.seed`, which fixes initialization, data order and
    /// synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    /// Generated oriented bars and discs at the configured geometry.
    Synth,
    /// A raw CIFAR-10 binary batch file.
    Cifar,
    /// A directory of `t x y p` event files plus `labels.json`.
    Events,
    /// A tensor-manifest directory with `inputs`, `labels`, `num_classes`.
    Manifest,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "synth")]
    pub dataset: DatasetKind,
    /// File or directory for non-synthetic datasets.
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Per-pixel event count cap when binning event streams.
    #[arg(long)]
    pub event_cap: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Burst levels `n_max` to train, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub levels: Vec<u32>,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint directory; a freshly initialized model is used without it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Profile only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also run the same weights with every mask off and report both.
    #[arg(long)]
    pub compare_mask: bool,
    /// Price published counts instead of running a model: `SOP,SIGN`.
    #[arg(long, value_delimiter = ',', value_name = "SOP,SIGN")]
    pub replay: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct AdjacencyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Token grid `HxW`; defaults to the configured patch grid.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
}
