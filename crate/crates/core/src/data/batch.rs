use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::split::{Sample, Split};
use crate::augment::{apply_transform, sample_params, Geometry, TransformParams, TransformPolicy};
use crate::image::ImageU8;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Pixel scaling into network inputs: `v / 255 − mean[channel]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f32; 3]>,
}

/// Packs `H×W×3` images into an `[N, 3, H, W]` tensor.
pub fn to_tensor(images: &[ImageU8], norm: &Normalization) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Dimension("cannot build a tensor from zero images".into()));
    };
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mean = norm.mean.unwrap_or([0.0; 3]);
    let mut data = vec![0.0f32; images.len() * 3 * plane];
    for (img, out) in images.iter().zip(data.chunks_exact_mut(3 * plane)) {
        if img.height() != h || img.width() != w {
            return Err(Error::Dimension(format!(
                "mixed image sizes in one batch: {h}x{w} and {}x{}",
                img.height(),
                img.width()
            )));
        }
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0 - mean[c];
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Class-uniform sampler over the training partition.
#[derive(Debug, Clone)]
pub struct ClassSampler {
    groups: Vec<Vec<Sample>>,
}

impl ClassSampler {
    pub fn new(split: &Split, num_classes: usize) -> Result<Self> {
        let groups = split.train_by_class(num_classes);
        if let Some(c) = groups.iter().position(Vec::is_empty) {
            return Err(Error::State(format!("class {c} has no training images")));
        }
        Ok(ClassSampler { groups })
    }

    /// A uniformly random class, then a uniformly random image of that class.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let group = &self.groups[rng.random_range(0..self.groups.len())];
        group[rng.random_range(0..group.len())]
    }
}

/// Draws `size` slots independently (with replacement).
pub fn sample_batch<R: Rng + ?Sized>(split: &Split, num_classes: usize, size: usize, rng: &mut R) -> Result<Vec<Sample>> {
    let sampler = ClassSampler::new(split, num_classes)?;
    Ok((0..size).map(|_| sampler.draw(rng)).collect())
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[batch_size, 3, crop, crop]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub samples: Vec<Sample>,
    pub params: Vec<TransformParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProducerConfig {
    pub batch_size: usize,
    /// One worker reproduces an exact batch sequence from the seed.
    pub workers: usize,
    pub queue_capacity: usize,
    pub policy: TransformPolicy,
    pub geometry: Geometry,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for ProducerConfig {
    fn default() -> Self {
        ProducerConfig {
            batch_size: 32,
            workers: 1,
            queue_capacity: 4,
            policy: TransformPolicy::random(),
            geometry: Geometry::default(),
            normalization: Normalization::default(),
            seed: 0,
        }
    }
}

impl ProducerConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.batch_size == 0 || self.workers == 0 || self.queue_capacity == 0 {
            return Err(Error::Parameter(
                "batch size, worker count and queue capacity must be positive".into(),
            ));
        }
        if matches!(self.policy, TransformPolicy::TF { .. }) {
            return Err(Error::Parameter("training batches use T0 or TR, not TF".into()));
        }
        Ok(())
    }
}

/// Single-threaded batch source: sample → transform → normalize.
pub struct BatchGenerator {
    images: Arc<Vec<ImageU8>>,
    sampler: ClassSampler,
    config: ProducerConfig,
    rng: StreamRng,
}

impl BatchGenerator {
    pub fn new(
        images: Arc<Vec<ImageU8>>,
        split: &Split,
        num_classes: usize,
        config: ProducerConfig,
        worker: usize,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(s) = split.train.iter().find(|s| s.image >= images.len()) {
            return Err(Error::Parameter(format!("training sample refers to missing image {}", s.image)));
        }
        let sampler = ClassSampler::new(split, num_classes)?;
        let rng = rng::stream(config.seed, rng::BATCH_WORKER_BASE + worker as u64);
        Ok(BatchGenerator {
            images,
            sampler,
            config,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let n = self.config.batch_size;
        let mut crops = Vec::with_capacity(n);
        let mut samples = Vec::with_capacity(n);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let s = self.sampler.draw(&mut self.rng);
            let p = sample_params(&self.config.policy, &self.config.geometry, &mut self.rng)[0];
            crops.push(apply_transform(&self.images[s.image], &p, &self.config.geometry)?);
            samples.push(s);
            params.push(p);
        }
        Ok(Batch {
            images: to_tensor(&crops, &self.config.normalization)?,
            labels: samples.iter().map(|s| s.class).collect(),
            samples,
            params,
        })
    }
}

impl Iterator for BatchGenerator {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Augmentation workers feeding one bounded queue. The training loop is the
/// single consumer. Dropping the producer stops and joins the workers.
pub struct BatchProducer {
    rx: Option<Receiver<Result<Batch>>>,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
    finished: bool,
}

impl BatchProducer {
    pub fn spawn(images: Arc<Vec<ImageU8>>, split: &Split, num_classes: usize, config: ProducerConfig) -> Result<Self> {
        config.validate()?;
        let (tx, rx) = sync_channel(config.queue_capacity);
        let stop = Arc::new(AtomicBool::new(false));
        let mut handles = Vec::with_capacity(config.workers);
        for worker in 0..config.workers {
            let mut generator = BatchGenerator::new(images.clone(), split, num_classes, config.clone(), worker)?;
            let tx = tx.clone();
            let stop = stop.clone();
            let handle = std::thread::Builder::new()
                .name(format!("batch-worker-{worker}"))
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        let batch = generator.next_batch();
                        let failed = batch.is_err();
                        if tx.send(batch).is_err() || failed {
                            break;
                        }
                    }
                })
                .map_err(|e| Error::State(format!("cannot start batch worker: {e}")))?;
            handles.push(handle);
        }
        Ok(BatchProducer {
            rx: Some(rx),
            stop,
            handles,
            finished: false,
        })
    }
}

impl Iterator for BatchProducer {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let item = match self.rx.as_ref()?.recv() {
            Ok(item) => item,
            Err(_) => Err(Error::StreamClosed("all batch workers exited".into())),
        };
        if item.is_err() {
            self.finished = true;
        }
        Some(item)
    }
}

impl Drop for BatchProducer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // unblocks workers waiting on a full queue
        self.rx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
