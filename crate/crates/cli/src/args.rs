use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "leafnet", version, about = "Leaf classification with a small convolutional network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop, resize and pad a `<root>/<class>/<image>` tree into a cache.
    Preprocess(PreprocessArgs),
    /// Train one network.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one or more test protocols.
    Eval(EvalArgs),
    /// Train and evaluate several networks under consecutive seeds.
    Experiment(ExperimentArgs),
    /// Write the procedural leaf dataset.
    SyntheticDataset(SyntheticArgs),
    /// Recompute the aggregate table from the run reports of an experiment.
    Report(ReportArgs),
}

/// Keys shared by every command that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Preprocessed cache directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory (default: $LEAFNET_OUTPUT, then ./leafnet-out).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Batch producer threads; 1 is bit-reproducible.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Test protocol, repeatable: t0, tr[:N], tf[:N].
    #[arg(long = "protocol")]
    pub protocols: Vec<String>,
    /// Suppress per-iteration progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

impl ConfigArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            output: self.output.clone(),
            split: self.split.clone(),
            seed: self.seed,
            iterations: self.iterations,
            workers: self.workers,
            protocols: (!self.protocols.is_empty()).then(|| self.protocols.clone()),
            ..Overrides::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    pub root: PathBuf,
    pub out: PathBuf,
    /// A pixel is foreground when any channel is below this value.
    #[arg(long, default_value_t = 240)]
    pub threshold: u8,
    /// Side of the resized leaf; defaults to the preset.
    #[arg(long)]
    pub content: Option<usize>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long, value_enum, default_value_t = PresetArg::Paper)]
    pub preset: PresetArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint whose non-classifier tensors initialize the network.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Pretraining length (100000 iterations) unless --iterations is given.
    #[arg(long)]
    pub pretrain: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Defaults to `config.toml` of the run that wrote the checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Accept a checkpoint whose config digest differs from the network.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    /// Raw image tree `<out>/<class>/<nnnn>.png`.
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FamilyArg::B)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a desk-scale preprocessed cache here.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    A,
    B,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory written by `experiment`.
    pub dir: PathBuf,
}
