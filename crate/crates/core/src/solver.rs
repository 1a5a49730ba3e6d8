//! Nesterov-momentum training with step learning-rate decay, L2 weight decay
//! and a periodic test-set monitor.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, AugmentRanges, Geometry, TransformParams};
use crate::data::{Batch, Normalization, Sample};
use crate::eval::classify;
use crate::image::ImageU8;
use crate::model::{save_checkpoint, CheckpointMeta, Network, CLASSIFIER};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Crops are kept in memory between monitor points below this many bytes.
const MONITOR_CACHE_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub base_lr: f64,
    pub lr_gamma: f64,
    pub lr_step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Whether biases take weight decay.
    pub decay_biases: bool,
    pub max_iter: usize,
    pub batch_size: usize,
    /// Zero disables the monitor.
    pub monitor_every: usize,
    pub monitor_samples: usize,
    pub monitor_smooth: usize,
    /// Defaults to `lr_step`. Zero writes only the final checkpoint.
    pub checkpoint_every: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            base_lr: 0.001,
            lr_gamma: 0.1,
            lr_step: 20_000,
            momentum: 0.95,
            weight_decay: 0.0005,
            decay_biases: true,
            max_iter: 50_000,
            batch_size: 32,
            monitor_every: 500,
            monitor_samples: 3200,
            monitor_smooth: 5,
            checkpoint_every: None,
        }
    }
}

impl SolverConfig {
    pub const PRETRAIN_ITERATIONS: usize = 100_000;

    /// Defaults with the longer pretraining run.
    pub fn pretraining() -> Self {
        SolverConfig {
            max_iter: Self::PRETRAIN_ITERATIONS,
            ..SolverConfig::default()
        }
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or(self.lr_step)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("lr_gamma", self.lr_gamma),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.lr_step == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("lr_step and batch_size must be positive".into()));
        }
        if self.monitor_every > 0 {
            if self.lr_step % self.monitor_every != 0 {
                return Err(Error::Parameter(format!(
                    "lr_step {} is not a multiple of monitor_every {}",
                    self.lr_step, self.monitor_every
                )));
            }
            if self.monitor_samples == 0 || self.monitor_smooth == 0 {
                return Err(Error::Parameter("monitor_samples and monitor_smooth must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `base_lr · gamma^⌊iter / lr_step⌋`, multiplied out step by step.
pub fn learning_rate(iteration: usize, config: &SolverConfig) -> f64 {
    let mut lr = config.base_lr;
    for _ in 0..iteration / config.lr_step.max(1) {
        lr *= config.lr_gamma;
    }
    lr
}

/// `g = grad + wd·param; v' = μv − lr·g; param += (1+μ)v' − μv; v = v'`.
pub fn nesterov_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Dimension(format!(
            "parameter, gradient and velocity lengths differ: {}, {}, {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let one_plus = T::one() + momentum;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        let v_old = *v;
        let v_new = momentum * v_old - lr * g;
        *p = *p + one_plus * v_new - momentum * v_old;
        *v = v_new;
    }
    Ok(())
}

/// Applies one solver step to every parameter of `network`.
pub fn apply_update<T: Scalar>(network: &mut Network<T>, lr: f64, config: &SolverConfig) -> Result<()> {
    let lr = T::from_f64(lr);
    let momentum = T::from_f64(config.momentum);
    for p in network.params_mut() {
        let wd = if p.is_bias() && !config.decay_biases {
            T::zero()
        } else {
            T::from_f64(config.weight_decay)
        };
        let (value, grad, velocity) = (&mut p.value, &p.grad, &mut p.velocity);
        nesterov_step(value.data_mut(), grad.data(), velocity.data_mut(), lr, momentum, wd)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub lr: f64,
    /// Mean training loss since the previous point.
    pub loss: f64,
    pub accuracy: f64,
    /// Mean of the trailing `monitor_smooth` raw accuracies.
    pub smoothed: f64,
}

/// Mean of the last `window` values (fewer at the start).
pub fn trailing_mean(values: &[f64], window: usize) -> f64 {
    let start = values.len().saturating_sub(window.max(1));
    let tail = &values[start..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// A fixed set of TR-augmented test crops drawn once from the monitor stream,
/// so every curve point scores the same inputs.
pub struct Monitor {
    images: Arc<Vec<ImageU8>>,
    items: Vec<(Sample, TransformParams)>,
    geometry: Geometry,
    normalization: Normalization,
    cached: Option<Vec<ImageU8>>,
}

impl Monitor {
    /// Cycles through `test` in order, one random TR transform per slot.
    pub fn new(
        images: Arc<Vec<ImageU8>>,
        test: &[Sample],
        samples: usize,
        geometry: Geometry,
        ranges: &AugmentRanges,
        normalization: Normalization,
        seed: u64,
    ) -> Result<Self> {
        if test.is_empty() || samples == 0 {
            return Err(Error::Parameter("the monitor needs a non-empty test split and sample count".into()));
        }
        if let Some(s) = test.iter().find(|s| s.image >= images.len()) {
            return Err(Error::Parameter(format!("test sample refers to missing image {}", s.image)));
        }
        let mut rng = rng::stream(seed, rng::MONITOR);
        let items: Vec<_> = (0..samples)
            .map(|i| (test[i % test.len()], TransformParams::random(&geometry, ranges, &mut rng)))
            .collect();
        let mut monitor = Monitor {
            images,
            items,
            geometry,
            normalization,
            cached: None,
        };
        if samples * 3 * geometry.crop * geometry.crop <= MONITOR_CACHE_BYTES {
            monitor.cached = Some(monitor.crops(0..samples)?);
        }
        Ok(monitor)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn crops(&self, range: std::ops::Range<usize>) -> Result<Vec<ImageU8>> {
        self.items[range]
            .iter()
            .map(|(s, p)| apply_transform(&self.images[s.image], p, &self.geometry))
            .collect()
    }

    /// Single-shot accuracy over the monitor set.
    pub fn accuracy(&self, network: &Network<f32>) -> Result<f64> {
        const CHUNK: usize = 256;
        let mut correct = 0usize;
        for start in (0..self.items.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(self.items.len());
            let fresh;
            let crops = match &self.cached {
                Some(all) => &all[start..end],
                None => {
                    fresh = self.crops(start..end)?;
                    &fresh[..]
                }
            };
            let probs = classify(network, crops, &self.normalization)?;
            for ((sample, _), row) in self.items[start..end].iter().zip(&probs) {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                correct += (best == sample.class) as usize;
            }
        }
        Ok(correct as f64 / self.items.len() as f64)
    }
}

/// Where training artifacts go. Everything is optional.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub curve_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Template for checkpoint metadata; `iteration` is filled in.
    pub checkpoint_meta: Option<CheckpointMeta>,
    pub on_point: Option<&'a mut dyn FnMut(&CurvePoint)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub iterations: usize,
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

pub const CURVE_HEADER: &str = "iteration,lr,loss,accuracy,smoothed";

fn curve_row(p: &CurvePoint) -> String {
    format!("{},{:e},{:.6},{:.6},{:.6}", p.iteration, p.lr, p.loss, p.accuracy, p.smoothed)
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:07}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn non_finite_param(network: &Network<f32>, iteration: usize) -> Option<Error> {
    network.params().iter().find(|p| !p.grad.all_finite()).map(|p| Error::NonFinite {
        what: "gradient",
        iteration,
        layer: p.name.clone(),
    })
}

/// Runs exactly `max_iter` solver iterations. Dropout draws from its own
/// stream of `seed`; the monitor consumes nothing from it.
pub fn train(
    network: &mut Network<f32>,
    batches: &mut dyn Iterator<Item = Result<Batch>>,
    monitor: Option<&Monitor>,
    config: &SolverConfig,
    seed: u64,
    sinks: &mut TrainSinks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !network.is_initialized() {
        return Err(Error::State("training needs an initialized network".into()));
    }
    let mut dropout_rng = rng::stream(seed, rng::DROPOUT);
    let mut csv = match &sinks.curve_csv {
        Some(path) => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{CURVE_HEADER}").map_err(|e| Error::io(path, e))?;
            Some((w, path.clone()))
        }
        None => None,
    };
    if let Some(dir) = &sinks.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ckpt_every = config.checkpoint_interval();
    let mut curve = Vec::new();
    let mut raw = Vec::new();
    let mut checkpoints = Vec::new();
    let (mut loss_sum, mut loss_count, mut last_loss) = (0.0f64, 0usize, f64::NAN);

    for iteration in 0..config.max_iter {
        let batch = batches
            .next()
            .ok_or_else(|| Error::StreamClosed(format!("no batch for iteration {iteration}")))??;
        network.forward_train(&batch.images, &mut dropout_rng)?;
        let loss = network.backward(&batch.labels)? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                iteration,
                layer: CLASSIFIER.to_string(),
            });
        }
        if let Some(e) = non_finite_param(network, iteration) {
            return Err(e);
        }
        let lr = learning_rate(iteration, config);
        apply_update(network, lr, config)?;
        loss_sum += loss;
        loss_count += 1;
        last_loss = loss;

        let done = iteration + 1;
        if config.monitor_every > 0 && done % config.monitor_every == 0 {
            let accuracy = match monitor {
                Some(m) => m.accuracy(network)?,
                None => f64::NAN,
            };
            raw.push(accuracy);
            let point = CurvePoint {
                iteration: done,
                lr,
                loss: loss_sum / loss_count as f64,
                accuracy,
                smoothed: trailing_mean(&raw, config.monitor_smooth),
            };
            loss_sum = 0.0;
            loss_count = 0;
            if let Some((w, path)) = csv.as_mut() {
                writeln!(w, "{}", curve_row(&point))
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(cb) = sinks.on_point.as_mut() {
                cb(&point);
            }
            curve.push(point);
        }
        if ckpt_every > 0 && done % ckpt_every == 0 && done < config.max_iter {
            if let Some(path) = write_snapshot(network, sinks, done, &checkpoint_name(done))? {
                checkpoints.push(path);
            }
        }
    }
    if let Some(path) = write_snapshot(network, sinks, config.max_iter, FINAL_CHECKPOINT)? {
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        iterations: config.max_iter,
        curve,
        final_loss: last_loss,
        checkpoints,
    })
}

fn write_snapshot(
    network: &Network<f32>,
    sinks: &TrainSinks<'_>,
    iteration: usize,
    name: &str,
) -> Result<Option<PathBuf>> {
    let (Some(dir), Some(meta)) = (&sinks.checkpoint_dir, &sinks.checkpoint_meta) else {
        return Ok(None);
    };
    let path = dir.join(name);
    let meta = CheckpointMeta {
        iteration,
        ..meta.clone()
    };
    save_checkpoint(network, &meta, &path)?;
    Ok(Some(path))
}

/// Reads a curve file written by [`train`].
pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Parse {
            position: n + 1,
            message: format!("malformed curve row '{line}'"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        points.push(CurvePoint {
            iteration: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            loss: num(f[2])?,
            accuracy: num(f[3])?,
            smoothed: num(f[4])?,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult<R> {
    pub index: usize,
    pub seed: u64,
    pub outcome: std::result::Result<R, String>,
}

/// Runs `run(i, base_seed + i)` for every `i < n_runs`. A failed run is
/// recorded and the rest still execute.
pub fn multi_run<R>(base_seed: u64, n_runs: usize, mut run: impl FnMut(usize, u64) -> Result<R>) -> Vec<RunResult<R>> {
    (0..n_runs)
        .map(|index| {
            let seed = base_seed.wrapping_add(index as u64);
            RunResult {
                index,
                seed,
                outcome: run(index, seed).map_err(|e| e.to_string()),
            }
        })
        .collect()
}

/// Velocities are reset so a resumed or transferred run starts from rest.
pub fn reset_velocity<T: Scalar>(network: &mut Network<T>) {
    for p in network.params_mut() {
        p.velocity = Tensor::zeros(p.value.shape());
    }
}
