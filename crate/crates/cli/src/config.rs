//! Flat key/value run configuration.
//!
//! Every key is optional; unset keys keep the defaults of the chosen preset.
//! Command-line flags override file keys.

use std::path::{Path, PathBuf};

use leafnet::augment::{AugmentRanges, Geometry};
use leafnet::data::{CountAllReading, Normalization};
use leafnet::eval::{EvalProtocol, VoteRule};
use leafnet::experiment::ExperimentConfig;
use leafnet::model::{fnv1a64, ConvSpec, NetworkConfig};
use leafnet::solver::SolverConfig;
use leafnet::synthetic::{desk_geometry, desk_network};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "LEAFNET_OUTPUT";
pub const DEFAULT_OUTPUT: &str = "leafnet-out";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 300 px crops of 350 px canvases, four conv blocks, 50000 iterations.
    #[default]
    Paper,
    /// 38 px crops of 44 px canvases, two conv blocks, 3000 iterations.
    Desk,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<Preset>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub split: Option<String>,
    pub count_all: Option<CountAllReading>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,

    pub input_size: Option<usize>,
    pub input_channels: Option<usize>,
    pub conv_kernels: Option<Vec<usize>>,
    pub conv_filters: Option<Vec<usize>>,
    pub pool_size: Option<usize>,
    pub pool_stride: Option<usize>,
    pub conv_relu: Option<bool>,
    pub fc_width: Option<usize>,
    pub dropout: Option<f64>,

    pub base_lr: Option<f64>,
    pub lr_gamma: Option<f64>,
    pub lr_step: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub decay_biases: Option<bool>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub monitor_every: Option<usize>,
    pub monitor_samples: Option<usize>,
    pub monitor_smooth: Option<usize>,
    pub checkpoint_every: Option<usize>,

    pub augment: Option<bool>,
    pub max_angle: Option<f64>,
    pub scale_log2: Option<f64>,
    pub contrast_log2: Option<f64>,
    pub brightness: Option<f64>,
    pub flip: Option<bool>,
    pub canvas: Option<usize>,
    pub crop: Option<usize>,
    pub mean: Option<[f32; 3]>,

    pub workers: Option<usize>,
    pub queue_capacity: Option<usize>,

    pub protocols: Option<Vec<String>>,
    pub vote: Option<VoteRule>,
    pub eval_threads: Option<usize>,
}

/// Flag values that override file keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub split: Option<String>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub iterations: Option<usize>,
    pub workers: Option<usize>,
    pub protocols: Option<Vec<String>>,
}

/// A fully resolved invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub pretrained: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// FNV-1a over the canonical JSON form.
    pub fn digest(&self) -> u64 {
        fnv1a64(&serde_json::to_vec(&self.experiment).expect("config serializes"))
    }
}

fn invalid(key: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("config key '{key}': {message}"))
}

pub fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn preset_defaults(preset: Preset) -> ExperimentConfig {
    match preset {
        Preset::Paper => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig {
            network: desk_network(),
            geometry: desk_geometry(),
            solver: SolverConfig {
                max_iter: 3000,
                lr_step: 3000,
                monitor_every: 100,
                monitor_samples: 500,
                ..SolverConfig::default()
            },
            ..ExperimentConfig::default()
        },
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl FileConfig {
    pub fn resolve(mut self, overrides: Overrides) -> Result<RunConfig, CliError> {
        let o = overrides;
        self.dataset = o.dataset.or(self.dataset);
        self.output = o.output.or(self.output);
        self.pretrained = o.pretrained.or(self.pretrained);
        self.split = o.split.or(self.split);
        self.seed = o.seed.or(self.seed);
        self.runs = o.runs.or(self.runs);
        self.iterations = o.iterations.or(self.iterations);
        self.workers = o.workers.or(self.workers);
        self.protocols = o.protocols.or(self.protocols);

        let mut x = preset_defaults(self.preset.unwrap_or_default());
        set(&mut x.split, self.split.clone());
        set(&mut x.count_all, self.count_all);
        set(&mut x.seed, self.seed);
        set(&mut x.runs, self.runs);

        let n: &mut NetworkConfig = &mut x.network;
        set(&mut n.input_size, self.input_size);
        set(&mut n.input_channels, self.input_channels);
        match (&self.conv_kernels, &self.conv_filters) {
            (None, None) => {}
            (Some(k), Some(f)) if k.len() == f.len() => {
                n.convs = k.iter().zip(f).map(|(&kernel, &filters)| ConvSpec { kernel, filters }).collect();
            }
            (Some(_), Some(_)) => return Err(invalid("conv_kernels", "must have as many entries as conv_filters")),
            _ => return Err(invalid("conv_kernels", "conv_kernels and conv_filters must be given together")),
        }
        set(&mut n.pool_size, self.pool_size);
        set(&mut n.pool_stride, self.pool_stride);
        set(&mut n.conv_relu, self.conv_relu);
        set(&mut n.fc_width, self.fc_width);
        set(&mut n.dropout, self.dropout);
        if !(0.0..1.0).contains(&n.dropout) {
            return Err(invalid("dropout", "must lie in [0, 1)"));
        }

        let s = &mut x.solver;
        set(&mut s.base_lr, self.base_lr);
        set(&mut s.lr_gamma, self.lr_gamma);
        set(&mut s.lr_step, self.lr_step);
        set(&mut s.momentum, self.momentum);
        set(&mut s.weight_decay, self.weight_decay);
        set(&mut s.decay_biases, self.decay_biases);
        set(&mut s.max_iter, self.iterations);
        set(&mut s.batch_size, self.batch_size);
        set(&mut s.monitor_every, self.monitor_every);
        set(&mut s.monitor_samples, self.monitor_samples);
        set(&mut s.monitor_smooth, self.monitor_smooth);
        if self.checkpoint_every.is_some() {
            s.checkpoint_every = self.checkpoint_every;
        }

        set(&mut x.augment, self.augment);
        let r: &mut AugmentRanges = &mut x.ranges;
        set(&mut r.max_angle, self.max_angle);
        set(&mut r.scale_log2, self.scale_log2);
        set(&mut r.contrast_log2, self.contrast_log2);
        set(&mut r.brightness, self.brightness);
        set(&mut r.flip, self.flip);
        let g: &mut Geometry = &mut x.geometry;
        set(&mut g.canvas, self.canvas);
        set(&mut g.crop, self.crop);
        if self.mean.is_some() {
            x.normalization = Normalization { mean: self.mean };
        }
        set(&mut x.workers, self.workers);
        set(&mut x.queue_capacity, self.queue_capacity);
        if let Some(list) = &self.protocols {
            x.protocols = list
                .iter()
                .map(|p| p.parse::<EvalProtocol>())
                .collect::<Result<_, _>>()
                .map_err(|e| invalid("protocols", e))?;
        }
        set(&mut x.vote, self.vote);
        set(&mut x.eval_threads, self.eval_threads);

        if let Err(e) = x.split_spec() {
            return Err(invalid("split", e));
        }
        if let Err(e) = x.solver.validate() {
            return Err(invalid("solver", e));
        }
        x.validate().map_err(|e| CliError::Validation(format!("config: {e}")))?;

        let dataset = self
            .dataset
            .ok_or_else(|| invalid("dataset", "no dataset given (use the key or --dataset)"))?;
        let output = self
            .output
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
        Ok(RunConfig {
            dataset,
            output,
            pretrained: self.pretrained,
            experiment: x,
        })
    }

    /// The flat form of a resolved configuration; resolving it again yields
    /// the same configuration.
    pub fn from_resolved(run: &RunConfig) -> Self {
        let x = &run.experiment;
        FileConfig {
            preset: Some(Preset::Paper),
            dataset: Some(run.dataset.clone()),
            output: Some(run.output.clone()),
            pretrained: run.pretrained.clone(),
            split: Some(x.split.clone()),
            count_all: Some(x.count_all),
            seed: Some(x.seed),
            runs: Some(x.runs),
            input_size: Some(x.network.input_size),
            input_channels: Some(x.network.input_channels),
            conv_kernels: Some(x.network.convs.iter().map(|c| c.kernel).collect()),
            conv_filters: Some(x.network.convs.iter().map(|c| c.filters).collect()),
            pool_size: Some(x.network.pool_size),
            pool_stride: Some(x.network.pool_stride),
            conv_relu: Some(x.network.conv_relu),
            fc_width: Some(x.network.fc_width),
            dropout: Some(x.network.dropout),
            base_lr: Some(x.solver.base_lr),
            lr_gamma: Some(x.solver.lr_gamma),
            lr_step: Some(x.solver.lr_step),
            momentum: Some(x.solver.momentum),
            weight_decay: Some(x.solver.weight_decay),
            decay_biases: Some(x.solver.decay_biases),
            iterations: Some(x.solver.max_iter),
            batch_size: Some(x.solver.batch_size),
            monitor_every: Some(x.solver.monitor_every),
            monitor_samples: Some(x.solver.monitor_samples),
            monitor_smooth: Some(x.solver.monitor_smooth),
            checkpoint_every: x.solver.checkpoint_every,
            augment: Some(x.augment),
            max_angle: Some(x.ranges.max_angle),
            scale_log2: Some(x.ranges.scale_log2),
            contrast_log2: Some(x.ranges.contrast_log2),
            brightness: Some(x.ranges.brightness),
            flip: Some(x.ranges.flip),
            canvas: Some(x.geometry.canvas),
            crop: Some(x.geometry.crop),
            mean: x.normalization.mean,
            workers: Some(x.workers),
            queue_capacity: Some(x.queue_capacity),
            protocols: Some(x.protocols.iter().map(ToString::to_string).collect()),
            vote: Some(x.vote),
            eval_threads: Some(x.eval_threads),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}
