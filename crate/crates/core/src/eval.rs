//! Final evaluation: single-shot and oversampled prediction, confusion
//! matrices and multi-run aggregation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, fixed_rotations, AugmentRanges, Geometry, TransformParams};
use crate::data::{to_tensor, Normalization, Sample};
use crate::image::ImageU8;
use crate::model::Network;
use crate::rng;
use crate::tensor::softmax;
use crate::{Error, Result};

/// Forward passes are grouped into batches of at most this many crops.
const CLASSIFY_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum EvalProtocol {
    T0,
    TR { augmentations: usize },
    TF { augmentations: usize },
}

impl EvalProtocol {
    pub const DEFAULT_AUGMENTATIONS: usize = 64;

    /// T0, TR-64 and TF-64.
    pub fn standard() -> [EvalProtocol; 3] {
        [
            EvalProtocol::T0,
            EvalProtocol::TR {
                augmentations: Self::DEFAULT_AUGMENTATIONS,
            },
            EvalProtocol::TF {
                augmentations: Self::DEFAULT_AUGMENTATIONS,
            },
        ]
    }

    /// Report row label.
    pub fn label(&self) -> &'static str {
        match self {
            EvalProtocol::T0 => "Single image T0",
            EvalProtocol::TR { .. } => "Av. TR",
            EvalProtocol::TF { .. } => "Av. TF",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            EvalProtocol::T0 => "t0",
            EvalProtocol::TR { .. } => "tr",
            EvalProtocol::TF { .. } => "tf",
        }
    }

    /// Forward passes per image.
    pub fn augmentations(&self) -> usize {
        match *self {
            EvalProtocol::T0 => 1,
            EvalProtocol::TR { augmentations } | EvalProtocol::TF { augmentations } => augmentations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.augmentations() == 0 {
            return Err(Error::Parameter(format!("{} needs at least one augmentation", self.key())));
        }
        Ok(())
    }
}

/// Parses `t0`, `tr`, `tf`, `tr:N` or `tf:N` (case-insensitive).
impl FromStr for EvalProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, count) = match lower.split_once(':') {
            Some((n, c)) => {
                let count = c
                    .parse::<usize>()
                    .map_err(|_| Error::Parameter(format!("bad augmentation count in protocol '{s}'")))?;
                (n.to_string(), Some(count))
            }
            None => (lower.clone(), None),
        };
        let augmentations = count.unwrap_or(Self::DEFAULT_AUGMENTATIONS);
        let protocol = match name.as_str() {
            "t0" if count.is_none() => EvalProtocol::T0,
            "tr" => EvalProtocol::TR { augmentations },
            "tf" => EvalProtocol::TF { augmentations },
            _ => return Err(Error::Parameter(format!("unknown protocol '{s}' (expected t0, tr[:N] or tf[:N])"))),
        };
        protocol.validate()?;
        Ok(protocol)
    }
}

impl fmt::Display for EvalProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalProtocol::T0 => f.write_str("t0"),
            other => write!(f, "{}:{}", other.key(), other.augmentations()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    /// Most frequent argmax; ties go to the smallest class index.
    #[default]
    Mode,
    /// Argmax of the averaged softmax output.
    MeanProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub geometry: Geometry,
    pub normalization: Normalization,
    /// Ranges for TR oversampling.
    pub ranges: AugmentRanges,
    pub vote: VoteRule,
    /// Worker threads over test images; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            geometry: Geometry::default(),
            normalization: Normalization::default(),
            ranges: AugmentRanges::default(),
            vote: VoteRule::Mode,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Index into the dataset's image list.
    pub image: usize,
    pub true_class: usize,
    pub predicted: usize,
    /// Argmax counts per class; sums to the augmentation count.
    pub votes: Vec<usize>,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.true_class == self.predicted
    }
}

/// Index of the largest count, smallest index on ties.
pub fn mode_vote(histogram: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in histogram.iter().enumerate() {
        if c > histogram[best] {
            best = i;
        }
    }
    best
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode softmax outputs, one row per crop.
pub fn classify(network: &Network<f32>, crops: &[ImageU8], norm: &Normalization) -> Result<Vec<Vec<f32>>> {
    if !network.is_initialized() {
        return Err(Error::State("cannot classify with an uninitialized network".into()));
    }
    let classes = network.num_classes();
    let mut rows = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(CLASSIFY_CHUNK) {
        let probs = softmax(&network.forward_eval(&to_tensor(chunk, norm)?)?)?;
        rows.extend(probs.data().chunks_exact(classes).map(<[f32]>::to_vec));
    }
    Ok(rows)
}

fn protocol_params<R: Rng + ?Sized>(
    protocol: &EvalProtocol,
    settings: &EvalSettings,
    rng: &mut R,
) -> Vec<TransformParams> {
    let g = &settings.geometry;
    match *protocol {
        EvalProtocol::T0 => vec![TransformParams::identity(g)],
        EvalProtocol::TR { augmentations } => (0..augmentations)
            .map(|_| TransformParams::random(g, &settings.ranges, rng))
            .collect(),
        EvalProtocol::TF { augmentations } => fixed_rotations(augmentations, g),
    }
}

/// Predicts one preprocessed canvas image. T0 draws nothing from `rng`.
pub fn predict_single<R: Rng + ?Sized>(
    network: &Network<f32>,
    image: &ImageU8,
    sample: Sample,
    protocol: &EvalProtocol,
    settings: &EvalSettings,
    rng: &mut R,
) -> Result<PredictionRecord> {
    protocol.validate()?;
    if !network.is_initialized() {
        return Err(Error::State("cannot predict with an uninitialized network".into()));
    }
    let crops = protocol_params(protocol, settings, rng)
        .iter()
        .map(|p| apply_transform(image, p, &settings.geometry))
        .collect::<Result<Vec<_>>>()?;
    let probs = classify(network, &crops, &settings.normalization)?;
    let classes = network.num_classes();
    let mut votes = vec![0usize; classes];
    let mut mean = vec![0.0f64; classes];
    for row in &probs {
        let as_f64: Vec<f64> = row.iter().map(|&p| p as f64).collect();
        votes[argmax(&as_f64)] += 1;
        for (m, p) in mean.iter_mut().zip(&as_f64) {
            *m += p;
        }
    }
    let predicted = match settings.vote {
        VoteRule::Mode => mode_vote(&votes),
        VoteRule::MeanProbability => argmax(&mean),
    };
    Ok(PredictionRecord {
        image: sample.image,
        true_class: sample.class,
        predicted,
        votes,
    })
}

/// Per-image generator: results are independent of evaluation order and
/// thread count.
fn image_rng(seed: u64, position: usize) -> rng::StreamRng {
    let mixed = seed ^ (position as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    rng::stream(mixed, rng::EVAL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub label: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub records: Vec<PredictionRecord>,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(
    network: &Network<f32>,
    images: &[ImageU8],
    test: &[Sample],
    protocol: &EvalProtocol,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalReport> {
    protocol.validate()?;
    if test.is_empty() {
        return Err(Error::Parameter("cannot evaluate an empty test split".into()));
    }
    if let Some(s) = test.iter().find(|s| s.image >= images.len()) {
        return Err(Error::Parameter(format!("test sample refers to missing image {}", s.image)));
    }
    let predict = |position: usize, s: &Sample| {
        let mut rng = image_rng(seed, position);
        predict_single(network, &images[s.image], *s, protocol, settings, &mut rng)
    };
    let threads = settings.threads.clamp(1, test.len());
    let records: Vec<PredictionRecord> = if threads == 1 {
        test.iter().enumerate().map(|(i, s)| predict(i, s)).collect::<Result<_>>()?
    } else {
        let per = test.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = test
                .chunks(per)
                .enumerate()
                .map(|(c, chunk)| {
                    let predict = &predict;
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .enumerate()
                            .map(|(i, s)| predict(c * per + i, s))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(test.len());
            for h in handles {
                all.extend(h.join().map_err(|_| Error::State("evaluation worker panicked".into()))??);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut confusion = ConfusionMatrix::new(network.num_classes());
    for r in &records {
        confusion.add(r.true_class, r.predicted)?;
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(EvalReport {
        protocol: *protocol,
        label: protocol.label().to_string(),
        accuracy: correct as f64 / records.len() as f64,
        correct,
        total: records.len(),
        records,
        confusion,
    })
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        ConfusionMatrix {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn from_records(size: usize, records: &[PredictionRecord]) -> Result<Self> {
        let mut m = ConfusionMatrix::new(size);
        for r in records {
            m.add(r.true_class, r.predicted)?;
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.size + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.size || predicted >= self.size {
            return Err(Error::Parameter(format!(
                "class pair ({truth}, {predicted}) outside a {0}x{0} confusion matrix",
                self.size
            )));
        }
        self.counts[truth * self.size + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::Parameter(format!(
                "cannot merge confusion matrices over {} and {} classes",
                self.size, other.size
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks_exact(self.size.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// Off-diagonal counts divided by their maximum; all zeros when nothing
    /// was misclassified.
    pub fn normalized_errors(&self) -> Vec<f64> {
        let n = self.size;
        let off = |i: usize| if i / n == i % n { 0 } else { self.counts[i] };
        let max = (0..n * n).map(off).max().unwrap_or(0);
        (0..n * n)
            .map(|i| if max == 0 { 0.0 } else { off(i) as f64 / max as f64 })
            .collect()
    }

    /// Header row and column of class names, then counts.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("true\\predicted");
        for j in 0..self.size {
            out.push(',');
            out.push_str(&name(j));
        }
        out.push('\n');
        for i in 0..self.size {
            out.push_str(&name(i));
            for j in 0..self.size {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }

    /// Binary graymap of the normalized error matrix: the largest error is
    /// black, no error is white. Each cell is `cell × cell` pixels.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let cell = cell.max(1);
        let side = self.size * cell;
        let norm = self.normalized_errors();
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            for x in 0..side {
                let v = norm[(y / cell) * self.size + x / cell];
                out.push((255.0 * (1.0 - v)).round() as u8);
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path, cell: usize) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm(cell)).map_err(|e| Error::io(path, e))
    }
}

/// Element-wise sum of matrices over one class set.
pub fn merged_confusion<'a>(matrices: impl IntoIterator<Item = &'a ConfusionMatrix>) -> Result<ConfusionMatrix> {
    let mut iter = matrices.into_iter();
    let mut merged = iter
        .next()
        .cloned()
        .ok_or_else(|| Error::Parameter("no confusion matrices to merge".into()))?;
    for m in iter {
        merged.merge(m)?;
    }
    Ok(merged)
}

/// Mean and population standard deviation of accuracies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl fmt::Display for Aggregate {
    /// Percent, `xx.xx ± y.yy`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn aggregate_runs(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Parameter("cannot aggregate zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Aggregate {
        mean,
        std: var.sqrt(),
        runs: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_vote_majority_and_ties() {
        let mut h = vec![0; 10];
        h[3] = 40;
        h[7] = 24;
        assert_eq!(mode_vote(&h), 3);
        let mut tie = vec![0; 4];
        tie[1] = 32;
        tie[2] = 32;
        assert_eq!(mode_vote(&tie), 1);
        for k in 1..20 {
            let mut same = vec![0; 5];
            same[4] = k;
            assert_eq!(mode_vote(&same), 4);
        }
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("T0".parse::<EvalProtocol>().unwrap(), EvalProtocol::T0);
        assert_eq!("tr".parse::<EvalProtocol>().unwrap(), EvalProtocol::TR { augmentations: 64 });
        assert_eq!("tf:8".parse::<EvalProtocol>().unwrap(), EvalProtocol::TF { augmentations: 8 });
        assert!("tf:0".parse::<EvalProtocol>().is_err());
        assert!("t0:3".parse::<EvalProtocol>().is_err());
        assert!("xx".parse::<EvalProtocol>().is_err());
        let labels: Vec<_> = EvalProtocol::standard().iter().map(EvalProtocol::label).collect();
        assert_eq!(labels, ["Single image T0", "Av. TR", "Av. TF"]);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_runs(&[0.99, 0.99, 0.99]).unwrap().to_string(), "99.00 ± 0.00");
        assert_eq!(aggregate_runs(&[1.0, 0.0]).unwrap().to_string(), "50.00 ± 50.00");
        assert_eq!(aggregate_runs(&[0.7]).unwrap().std, 0.0);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn confusion_identities_and_rendering() {
        let mut m = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (1, 1), (2, 2), (2, 2)] {
            m.add(t, p).unwrap();
        }
        assert_eq!(m.trace(), m.total());
        assert!(m.normalized_errors().iter().all(|&v| v == 0.0));
        assert!(m.to_pgm(1)[11..].iter().all(|&b| b == 255));

        m.add(1, 2).unwrap();
        let norm = m.normalized_errors();
        assert_eq!(norm[1 * 3 + 2], 1.0);
        assert_eq!(norm[2 * 3 + 1], 0.0);
        let pgm = m.to_pgm(1);
        assert_eq!(&pgm[..11], b"P5\n3 3\n255\n");
        assert_eq!(pgm[11 + 5], 0);
        assert!((m.accuracy() - 4.0 / 5.0).abs() < 1e-15);
        assert!(m.add(3, 0).is_err());
    }

    #[test]
    fn merge_checks_size() {
        let a = ConfusionMatrix::new(2);
        let b = ConfusionMatrix::new(3);
        assert!(merged_confusion([&a, &b]).is_err());
        let mut c = ConfusionMatrix::new(2);
        c.add(0, 1).unwrap();
        let m = merged_confusion([&c, &c, &a]).unwrap();
        assert_eq!(m.get(0, 1), 2);
        assert_eq!(m.get(1, 0), 0);
    }
}
