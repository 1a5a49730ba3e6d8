//! End-to-end runs: split, batch production, training and evaluation under
//! one seed, repeated over consecutive seeds.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentRanges, Geometry, TransformPolicy};
use crate::data::{
    make_split, parse_split_spec, Batch, BatchGenerator, BatchProducer, CountAllReading, DatasetIndex, Normalization,
    ProducerConfig, Split, SplitSpec,
};
use crate::eval::{aggregate_runs, evaluate, merged_confusion, Aggregate, ConfusionMatrix, EvalProtocol, EvalReport, EvalSettings, VoteRule};
use crate::image::ImageU8;
use crate::model::{transfer_load, Checkpoint, CheckpointMeta, Network, NetworkConfig, TransferReport};
use crate::solver::{multi_run, train, CurvePoint, Monitor, RunResult, SolverConfig, TrainSinks};
use crate::{Error, Result};

/// Preprocessed canvases aligned with `index.entries`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub images: Arc<Vec<ImageU8>>,
}

impl Dataset {
    pub fn new(index: DatasetIndex, images: Vec<ImageU8>) -> Result<Self> {
        if index.entries.len() != images.len() {
            return Err(Error::Parameter(format!(
                "{} index entries but {} images",
                index.entries.len(),
                images.len()
            )));
        }
        Ok(Dataset {
            index,
            images: Arc::new(images),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.index.num_classes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Split notation such as `10x40`, `10xALL`, `1/2x1/2` or `FIXED`.
    pub split: String,
    pub count_all: CountAllReading,
    pub network: NetworkConfig,
    pub solver: SolverConfig,
    /// Random transforms during training; off means centered crops only.
    pub augment: bool,
    pub ranges: AugmentRanges,
    pub geometry: Geometry,
    pub normalization: Normalization,
    /// One worker gives a bit-reproducible batch sequence.
    pub workers: usize,
    pub queue_capacity: usize,
    pub protocols: Vec<EvalProtocol>,
    pub vote: VoteRule,
    pub eval_threads: usize,
    pub seed: u64,
    pub runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            split: "10x40".into(),
            count_all: CountAllReading::default(),
            network: NetworkConfig::default(),
            solver: SolverConfig::default(),
            augment: true,
            ranges: AugmentRanges::default(),
            geometry: Geometry::default(),
            normalization: Normalization::default(),
            workers: 1,
            queue_capacity: 4,
            protocols: EvalProtocol::standard().to_vec(),
            vote: VoteRule::Mode,
            eval_threads: 1,
            seed: 0,
            runs: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn split_spec(&self) -> Result<SplitSpec> {
        parse_split_spec(&self.split)
    }

    pub fn policy(&self) -> TransformPolicy {
        if self.augment {
            TransformPolicy::TR { ranges: self.ranges }
        } else {
            TransformPolicy::T0
        }
    }

    pub fn producer(&self, seed: u64) -> ProducerConfig {
        ProducerConfig {
            batch_size: self.solver.batch_size,
            workers: self.workers,
            queue_capacity: self.queue_capacity,
            policy: self.policy(),
            geometry: self.geometry,
            normalization: self.normalization,
            seed,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            geometry: self.geometry,
            normalization: self.normalization,
            ranges: self.ranges,
            vote: self.vote,
            threads: self.eval_threads.max(1),
        }
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.split_spec()?;
        self.solver.validate()?;
        self.producer(self.seed).validate()?;
        if self.network.input_size != self.geometry.crop {
            return Err(Error::Config {
                layer: "input".into(),
                message: format!(
                    "network input {} differs from crop size {}",
                    self.network.input_size, self.geometry.crop
                ),
            });
        }
        self.network.shape_chain(2)?;
        for p in &self.protocols {
            p.validate()?;
        }
        if self.runs == 0 {
            return Err(Error::Parameter("runs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
    pub evals: Vec<EvalReport>,
    /// Sum over protocols of this run.
    pub merged_confusion: Option<ConfusionMatrix>,
    pub transfer: Option<TransferReport>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunReport {
    pub fn accuracy(&self, protocol_key: &str) -> Option<f64> {
        self.evals.iter().find(|e| e.protocol.key() == protocol_key).map(|e| e.accuracy)
    }
}

/// Optional artifact locations for one run.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
    /// Prints one line per curve point.
    pub verbose: bool,
}

/// A freshly initialized network, or one transferred from `pretrained`.
pub fn prepare_network(
    config: &NetworkConfig,
    num_classes: usize,
    seed: u64,
    pretrained: Option<&Checkpoint>,
) -> Result<(Network<f32>, Option<TransferReport>)> {
    let mut network = Network::<f32>::build(config, num_classes)?;
    network.init_weights(seed);
    let report = match pretrained {
        Some(ckpt) => Some(transfer_load(ckpt, &mut network, seed)?),
        None => None,
    };
    Ok((network, report))
}

/// Trains on `split` and evaluates every configured protocol.
pub fn run_on_split(
    dataset: &Dataset,
    split: &Split,
    config: &ExperimentConfig,
    seed: u64,
    pretrained: Option<&Checkpoint>,
    outputs: &RunOutputs,
) -> Result<(Network<f32>, RunReport)> {
    config.validate()?;
    let classes = dataset.num_classes();
    let (mut network, transfer) = prepare_network(&config.network, classes, seed, pretrained)?;

    let producer_cfg = config.producer(seed);
    let mut batches: Box<dyn Iterator<Item = Result<Batch>>> = if config.workers > 1 {
        Box::new(BatchProducer::spawn(dataset.images.clone(), split, classes, producer_cfg)?)
    } else {
        Box::new(BatchGenerator::new(dataset.images.clone(), split, classes, producer_cfg, 0)?)
    };
    let monitor = if config.solver.monitor_every > 0 {
        Some(Monitor::new(
            dataset.images.clone(),
            &split.test,
            config.solver.monitor_samples,
            config.geometry,
            &config.ranges,
            config.normalization,
            seed,
        )?)
    } else {
        None
    };

    let mut print = |p: &CurvePoint| {
        println!(
            "iter {:>7}  lr {:.2e}  loss {:.4}  acc {:.4}  smoothed {:.4}",
            p.iteration, p.lr, p.loss, p.accuracy, p.smoothed
        )
    };
    let mut sinks = TrainSinks::default();
    if let Some(dir) = &outputs.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        sinks.curve_csv = Some(dir.join("curve.csv"));
        sinks.checkpoint_dir = Some(dir.join("checkpoints"));
        sinks.checkpoint_meta = Some(CheckpointMeta {
            iteration: 0,
            seed,
            dataset: dataset.index.name.clone(),
            num_classes: classes,
            network: config.network.clone(),
            class_names: dataset.index.classes.clone(),
        });
    }
    if outputs.verbose {
        sinks.on_point = Some(&mut print);
    }
    let outcome = train(&mut network, batches.as_mut(), monitor.as_ref(), &config.solver, seed, &mut sinks)?;
    drop(batches);

    let settings = config.eval_settings();
    let evals = config
        .protocols
        .iter()
        .map(|p| evaluate(&network, &dataset.images, &split.test, p, &settings, seed))
        .collect::<Result<Vec<_>>>()?;
    let merged = if evals.is_empty() {
        None
    } else {
        Some(merged_confusion(evals.iter().map(|e| &e.confusion))?)
    };
    let report = RunReport {
        seed,
        train_size: split.train.len(),
        test_size: split.test.len(),
        curve: outcome.curve,
        final_loss: outcome.final_loss,
        evals,
        merged_confusion: merged,
        transfer,
        checkpoints: outcome.checkpoints,
    };
    if let Some(dir) = &outputs.dir {
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok((network, report))
}

/// One full cycle under `seed`: the seed drives the split (unless fixed),
/// initialization, batches, transforms, dropout, monitor and evaluation.
pub fn run_single(
    dataset: &Dataset,
    config: &ExperimentConfig,
    seed: u64,
    pretrained: Option<&Checkpoint>,
    outputs: &RunOutputs,
) -> Result<(Network<f32>, RunReport)> {
    config.validate()?;
    let split = make_split(&dataset.index, &config.split_spec()?, seed, config.count_all)?;
    run_on_split(dataset, &split, config, seed, pretrained, outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub key: String,
    pub label: String,
    pub accuracies: Vec<f64>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult<RunReport>>,
    pub protocols: Vec<ProtocolSummary>,
    /// Sum over every successful run and protocol.
    pub merged_confusion: Option<ConfusionMatrix>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }

    /// `label  mean ± std` rows in protocol order.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for p in &self.protocols {
            out.push_str(&format!("{:<16} {}\n", p.label, p.aggregate));
        }
        out
    }
}

/// Aggregates per protocol over the successful runs.
pub fn summarize(protocols: &[EvalProtocol], runs: Vec<RunResult<RunReport>>) -> Result<ExperimentReport> {
    let ok: Vec<&RunReport> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let mut summaries = Vec::new();
    if !ok.is_empty() {
        for p in protocols {
            let accuracies: Vec<f64> = ok.iter().filter_map(|r| r.accuracy(p.key())).collect();
            summaries.push(ProtocolSummary {
                key: p.key().into(),
                label: p.label().into(),
                aggregate: aggregate_runs(&accuracies)?,
                accuracies,
            });
        }
    }
    let matrices: Vec<&ConfusionMatrix> = ok.iter().filter_map(|r| r.merged_confusion.as_ref()).collect();
    let merged = if matrices.is_empty() {
        None
    } else {
        Some(merged_confusion(matrices)?)
    };
    Ok(ExperimentReport {
        runs,
        protocols: summaries,
        merged_confusion: merged,
    })
}

/// `config.runs` runs under seeds `config.seed + i`, each writing to
/// `<dir>/run_<i>` when a directory is given.
pub fn run_experiment(
    dataset: &Dataset,
    config: &ExperimentConfig,
    pretrained: Option<&Checkpoint>,
    dir: Option<&Path>,
    verbose: bool,
) -> Result<ExperimentReport> {
    config.validate()?;
    let runs = multi_run(config.seed, config.runs, |i, seed| {
        if verbose {
            println!("run {i} (seed {seed})");
        }
        let outputs = RunOutputs {
            dir: dir.map(|d| d.join(format!("run_{i:02}"))),
            verbose,
        };
        run_single(dataset, config, seed, pretrained, &outputs).map(|(_, report)| report)
    });
    summarize(&config.protocols, runs)
}
