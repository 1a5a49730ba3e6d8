//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! to stderr (bypassing output capture) before asserting.
//!
//! The training criteria take about twenty minutes together on one core:
//! `cargo test --release -p leafnet-cli --test acceptance`.

mod common;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::{parse, s};
use leafnet::data::{make_split, parse_split_spec, sample_batch, CountAllReading, DatasetIndex, ImageEntry, Part, Split};
use leafnet::eval::{aggregate_runs, EvalProtocol};
use leafnet::experiment::{run_single, Dataset, ExperimentConfig, RunOutputs, RunReport};
use leafnet::gradcheck::{max_relative_error, numeric_gradient};
use leafnet::model::{transfer_load, Checkpoint, CheckpointMeta, ConvSpec, Network, NetworkConfig};
use leafnet::rng;
use leafnet::solver::{learning_rate, nesterov_step, SolverConfig};
use leafnet::synthetic::{desk_geometry, desk_network, desk_preprocess, generate_preprocessed, Family, SyntheticConfig};
use leafnet::tensor::{
    conv2d_backward, conv2d_forward, dropout, dropout_backward, dropout_with_mask, linear_backward, linear_forward,
    maxpool_backward, maxpool_forward, relu, relu_backward, softmax_cross_entropy, Mode, Tensor,
};
use leafnet_cli::Command;
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Timed and training criteria run one at a time so their budgets measure
/// their own work.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- gradients

const FD_EPS: f64 = 1e-3;
const LAYER_TOL: f64 = 1e-4;
const NETWORK_TOL: f64 = 1e-3;
const INSTANCES: usize = 20;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error between `analytic` and central differences of `f`
/// around `x`.
fn check(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let shape = x.shape().to_vec();
    let numeric = numeric_gradient(x.data(), FD_EPS, |v| f(&Tensor::from_vec(&shape, v.to_vec()).unwrap()));
    max_relative_error(analytic.data(), &numeric)
}

/// Values whose pairwise gaps exceed 2ε, so no perturbation flips an argmax.
fn separated<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order.iter().map(|&k| k as f64 * 0.05 - 1.0 + rng.random_range(-0.01..0.01)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn layer_errors() -> Vec<(&'static str, f64)> {
    let mut rng = rng::stream(2024, 0);
    let mut worst = vec![("conv", 0.0f64), ("maxpool", 0.0), ("relu", 0.0), ("linear", 0.0), ("dropout", 0.0), ("softmax-ce", 0.0)];
    let mut bump = |i: usize, e: f64| worst[i].1 = worst[i].1.max(e);
    for _ in 0..INSTANCES {
        // conv
        let (n, c, k) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w, kh) = (rng.random_range(4..7), rng.random_range(4..7), rng.random_range(1..4));
        let x = uniform(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform(&mut rng, &[k, c, kh, kh], -1.0, 1.0);
        let b = uniform(&mut rng, &[k], -1.0, 1.0);
        let (y, cache) = conv2d_forward(&x, &wt, &b).unwrap();
        let up = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let g = conv2d_backward(&up, &cache).unwrap();
        bump(0, check(&x, &g.input, |x| dot(&conv2d_forward(x, &wt, &b).unwrap().0, &up)));
        bump(0, check(&wt, &g.weights, |wt| dot(&conv2d_forward(&x, wt, &b).unwrap().0, &up)));
        bump(0, check(&b, &g.bias, |b| dot(&conv2d_forward(&x, &wt, b).unwrap().0, &up)));

        // maxpool, including overlapping windows
        let (window, stride) = [(2, 2), (3, 2), (2, 1)][rng.random_range(0..3)];
        let dims = [rng.random_range(1..3), rng.random_range(1..3), 6, 7];
        let x = separated(&mut rng, &dims);
        let (y, cache) = maxpool_forward(&x, window, stride).unwrap();
        let up = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let gx = maxpool_backward(&up, &cache).unwrap();
        bump(1, check(&x, &gx, |x| dot(&maxpool_forward(x, window, stride).unwrap().0, &up)));

        // relu, away from the kink
        let shape = [rng.random_range(1..4), rng.random_range(2..9)];
        let mut x = uniform(&mut rng, &shape, 0.05, 1.0);
        for v in x.data_mut() {
            if rng.random::<bool>() {
                *v = -*v;
            }
        }
        let (y, cache) = relu(&x);
        let up = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let gx = relu_backward(&up, &cache).unwrap();
        bump(2, check(&x, &gx, |x| dot(&relu(x).0, &up)));

        // fully connected on a rank-4 input
        let (n, d, m) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6));
        let x = uniform(&mut rng, &[n, d, 2, 2], -1.0, 1.0);
        let wt = uniform(&mut rng, &[d * 4, m], -1.0, 1.0);
        let b = uniform(&mut rng, &[m], -1.0, 1.0);
        let (y, cache) = linear_forward(&x, &wt, &b).unwrap();
        let up = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let g = linear_backward(&up, &cache).unwrap();
        bump(3, check(&x, &g.input, |x| dot(&linear_forward(x, &wt, &b).unwrap().0, &up)));
        bump(3, check(&wt, &g.weights, |wt| dot(&linear_forward(&x, wt, &b).unwrap().0, &up)));
        bump(3, check(&b, &g.bias, |b| dot(&linear_forward(&x, &wt, b).unwrap().0, &up)));

        // train-mode dropout; the mask is fixed by re-seeding its stream
        let mask_seed = rng.random::<u64>();
        let dims = [rng.random_range(1..4), rng.random_range(2..12)];
        let x = uniform(&mut rng, &dims, -1.0, 1.0);
        let masked = |x: &Tensor<f64>| dropout(x, 0.5, Mode::Train, &mut rng::stream(mask_seed, rng::DROPOUT)).unwrap();
        let (y, cache) = masked(&x);
        let up = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let gx = dropout_backward(&up, &cache.unwrap()).unwrap();
        bump(4, check(&x, &gx, |x| dot(&masked(x).0, &up)));
        let mask = masked(&Tensor::filled(x.shape(), 1.0)).0;
        bump(4, check(&x, &gx, |x| dot(&dropout_with_mask(x, mask.clone()).unwrap().0, &up)));

        // softmax cross-entropy
        let (n, classes) = (rng.random_range(1..5), rng.random_range(2..7));
        let logits = uniform(&mut rng, &[n, classes], -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        bump(5, check(&logits, &out.d_logits, |l| softmax_cross_entropy(l, &labels).unwrap().loss));
    }
    worst
}

/// Every parameter of a two-block network with ReLU and dropout, under one
/// fixed dropout mask.
fn network_error() -> f64 {
    let config = NetworkConfig {
        input_size: 12,
        input_channels: 2,
        convs: vec![ConvSpec { kernel: 3, filters: 2 }, ConvSpec { kernel: 3, filters: 3 }],
        pool_size: 2,
        pool_stride: 2,
        conv_relu: true,
        fc_width: 5,
        dropout: 0.5,
    };
    let mut net = Network::<f64>::build(&config, 3).unwrap();
    net.init_weights(11);
    let mut rng = rng::stream(12, 0);
    let x = uniform(&mut rng, &[2, 2, 12, 12], -1.0, 1.0);
    let labels = [0, 2];
    let mask_rng = || rng::stream(13, rng::DROPOUT);

    net.forward_train(&x, &mut mask_rng()).unwrap();
    net.backward(&labels).unwrap();
    let analytic: Vec<f64> = net.params().iter().flat_map(|p| p.grad.data().to_vec()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..net.params().len() {
        for j in 0..net.params()[i].value.len() {
            let original = net.params()[i].value.data()[j];
            let mut at = |v: f64| {
                net.params_mut()[i].value.data_mut()[j] = v;
                net.loss(&x, &labels, &mut mask_rng()).unwrap()
            };
            let (plus, minus) = (at(original + FD_EPS), at(original - FD_EPS));
            net.params_mut()[i].value.data_mut()[j] = original;
            numeric.push((plus - minus) / (2.0 * FD_EPS));
        }
    }
    max_relative_error(&analytic, &numeric)
}

#[test]
fn criterion_01_gradient_suite() {
    let _serial = exclusive();
    let start = Instant::now();
    let layers = layer_errors();
    let whole = network_error();
    let elapsed = start.elapsed();
    let mut detail: Vec<String> = layers.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    detail.push(format!("network {whole:.1e}"));
    detail.push(format!("{:.1}s", elapsed.as_secs_f64()));
    let pass = layers.iter().all(|&(_, e)| e <= LAYER_TOL) && whole <= NETWORK_TOL && elapsed <= GRADIENT_BUDGET;
    verdict(1, "gradient suite", pass, &detail.join(", "));
}

// ------------------------------------------------------- desk-scale training

/// T0 accuracy bar, frozen after five baseline runs of the configuration
/// below (seeds 0..5: 1.00, 1.00, 0.98, 1.00, 0.96).
const T0_THRESHOLD: f64 = 0.90;
const DESK_SEEDS: u64 = 5;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
/// TF may trail T0 by at most one point.
const OVERSAMPLING_SLACK: f64 = 0.01;

fn synthetic(family: Family) -> Dataset {
    let config = SyntheticConfig {
        family,
        ..SyntheticConfig::default()
    };
    let (index, images) = generate_preprocessed(&config, &desk_preprocess()).unwrap();
    Dataset::new(index, images).unwrap()
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        split: "10x40".into(),
        network: desk_network(),
        solver: SolverConfig {
            base_lr: 0.001,
            lr_step: 3000,
            max_iter: 3000,
            monitor_every: 100,
            monitor_samples: 250,
            ..SolverConfig::default()
        },
        augment: true,
        geometry: desk_geometry(),
        protocols: vec![EvalProtocol::T0, EvalProtocol::TF { augmentations: 64 }],
        runs: 1,
        ..ExperimentConfig::default()
    }
}

fn quiet() -> RunOutputs {
    RunOutputs { dir: None, verbose: false }
}

struct DeskRuns {
    reports: Vec<RunReport>,
    elapsed: Duration,
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _serial = exclusive();
        let dataset = synthetic(Family::B);
        let config = desk_config();
        let start = Instant::now();
        let reports = (0..DESK_SEEDS)
            .map(|seed| run_single(&dataset, &config, seed, None, &quiet()).unwrap().1)
            .collect();
        DeskRuns {
            reports,
            elapsed: start.elapsed(),
        }
    })
}

fn accuracies(runs: &DeskRuns, key: &str) -> Vec<f64> {
    runs.reports.iter().map(|r| r.accuracy(key).unwrap()).collect()
}

#[test]
fn criterion_02_desk_accuracy() {
    let runs = desk_runs();
    let t0 = accuracies(runs, "t0");
    let agg = aggregate_runs(&t0).unwrap();
    let lower = agg.mean - 2.0 * agg.std;
    let pass = agg.mean >= T0_THRESHOLD && lower > T0_THRESHOLD && runs.elapsed <= DESK_BUDGET;
    let detail = format!(
        "T0 {t0:?}, mean {:.4}, mean-2std {lower:.4} vs {T0_THRESHOLD}, {:.0}s",
        agg.mean,
        runs.elapsed.as_secs_f64()
    );
    verdict(2, "desk accuracy", pass, &detail);
}

#[test]
fn criterion_03_oversampling_gain() {
    let runs = desk_runs();
    let t0 = aggregate_runs(&accuracies(runs, "t0")).unwrap().mean;
    let tf = aggregate_runs(&accuracies(runs, "tf")).unwrap().mean;
    let detail = format!("mean TF-64 {tf:.4} vs mean T0 {t0:.4} - {OVERSAMPLING_SLACK}");
    verdict(3, "oversampling gain", tf >= t0 - OVERSAMPLING_SLACK, &detail);
}

// -------------------------------------------------------------- overfitting

const OVERFIT_GAP: f64 = 0.02;
const OVERFIT_SEEDS: u64 = 3;

/// Twice the desk width with ReLU after every conv, no dropout, a doubled
/// learning rate and no step decay.
fn oversized_config(augment: bool) -> ExperimentConfig {
    let mut network = desk_network();
    network.convs = vec![ConvSpec { kernel: 5, filters: 16 }, ConvSpec { kernel: 3, filters: 32 }];
    network.fc_width = 512;
    network.conv_relu = true;
    network.dropout = 0.0;
    ExperimentConfig {
        network,
        augment,
        solver: SolverConfig {
            base_lr: 0.002,
            lr_step: 6000,
            max_iter: 6000,
            monitor_every: 100,
            monitor_samples: 500,
            ..SolverConfig::default()
        },
        protocols: vec![EvalProtocol::T0],
        ..desk_config()
    }
}

/// Peak minus final of the seed-averaged smoothed monitor curve.
fn curve_gap(dataset: &Dataset, augment: bool) -> (f64, usize) {
    let config = oversized_config(augment);
    let curves: Vec<Vec<(usize, f64)>> = (0..OVERFIT_SEEDS)
        .map(|seed| {
            let report = run_single(dataset, &config, seed, None, &quiet()).unwrap().1;
            report.curve.iter().map(|p| (p.iteration, p.smoothed)).collect()
        })
        .collect();
    let mean: Vec<(usize, f64)> = (0..curves[0].len())
        .map(|i| (curves[0][i].0, curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64))
        .collect();
    let (peak_at, peak) = mean.iter().copied().fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    (peak - mean.last().unwrap().1, peak_at)
}

#[test]
fn criterion_04_overfitting_curve() {
    let _serial = exclusive();
    let dataset = synthetic(Family::B);
    let (plain, plain_peak) = curve_gap(&dataset, false);
    let (augmented, aug_peak) = curve_gap(&dataset, true);
    let detail = format!(
        "no augmentation: gap {:.2} pt (peak at {plain_peak}), augmentation: gap {:.2} pt (peak at {aug_peak})",
        100.0 * plain,
        100.0 * augmented
    );
    verdict(4, "overfitting curve", plain >= OVERFIT_GAP && augmented < OVERFIT_GAP, &detail);
}

// ----------------------------------------------------------------- transfer

const TRANSFER_SEEDS: u64 = 5;
const TRANSFER_MIN_WINS: usize = 4;
const FINE_TUNE_ITERATIONS: usize = 200;

fn fine_tune_config() -> ExperimentConfig {
    ExperimentConfig {
        solver: SolverConfig {
            lr_step: FINE_TUNE_ITERATIONS,
            max_iter: FINE_TUNE_ITERATIONS,
            monitor_every: 40,
            ..desk_config().solver
        },
        protocols: vec![EvalProtocol::T0],
        ..desk_config()
    }
}

fn mechanics_hold(pretrained: &Checkpoint, classes: usize) -> Result<(), String> {
    let mut net = Network::<f32>::build(&desk_network(), classes).unwrap();
    net.init_weights(77);
    let before: Vec<Vec<f32>> = net.params().iter().map(|p| p.value.data().to_vec()).collect();
    let report = transfer_load(pretrained, &mut net, 5).map_err(|e| e.to_string())?;
    let mut again = Network::<f32>::build(&desk_network(), classes).unwrap();
    again.init_weights(78);
    transfer_load(pretrained, &mut again, 5).map_err(|e| e.to_string())?;
    for ((p, old), twin) in net.params().iter().zip(&before).zip(again.params()) {
        let stored: Tensor<f32> = pretrained.tensor(&p.name).unwrap().to_tensor().unwrap();
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if p.is_classifier() {
            if !report.reinitialized.contains(&p.name) {
                return Err(format!("{} not reported as re-initialized", p.name));
            }
            if bits(p.value.data()) == bits(stored.data()) {
                return Err(format!("{} still holds the checkpoint values", p.name));
            }
            // biases restart at zero; weights are a fresh draw
            let fresh = if p.is_bias() {
                p.value.data().iter().all(|&v| v == 0.0)
            } else {
                bits(p.value.data()) != bits(old)
            };
            if !fresh {
                return Err(format!("{} was not re-initialized", p.name));
            }
            if bits(p.value.data()) != bits(twin.value.data()) {
                return Err(format!("{} re-initialization is not a function of the seed", p.name));
            }
        } else {
            if !report.restored.contains(&p.name) {
                return Err(format!("{} not reported as restored", p.name));
            }
            if bits(p.value.data()) != bits(stored.data()) {
                return Err(format!("{} differs from the checkpoint", p.name));
            }
        }
    }
    if report.reinitialized_layers() != vec![leafnet::model::CLASSIFIER] {
        return Err(format!("re-initialized layers {:?}", report.reinitialized_layers()));
    }
    Ok(())
}

#[test]
fn criterion_05_transfer_learning() {
    let _serial = exclusive();
    let source = synthetic(Family::A);
    let target = synthetic(Family::B);
    let (pre_net, _) = run_single(&source, &desk_config(), 100, None, &quiet()).unwrap();
    let meta = CheckpointMeta {
        iteration: desk_config().solver.max_iter,
        seed: 100,
        dataset: source.index.name.clone(),
        num_classes: source.num_classes(),
        network: desk_network(),
        class_names: source.index.classes.clone(),
    };
    // through the byte format, as a file would be
    let bytes = Checkpoint::from_network(&pre_net, meta).to_bytes().unwrap();
    let pretrained = Checkpoint::from_bytes(&bytes).unwrap();
    let mechanics = mechanics_hold(&pretrained, target.num_classes());

    let config = fine_tune_config();
    let at_200 = |r: &RunReport| r.curve.iter().find(|p| p.iteration == FINE_TUNE_ITERATIONS).unwrap().smoothed;
    let pairs: Vec<(f64, f64)> = (0..TRANSFER_SEEDS)
        .map(|seed| {
            let tuned = run_single(&target, &config, seed, Some(&pretrained), &quiet()).unwrap().1;
            let scratch = run_single(&target, &config, seed, None, &quiet()).unwrap().1;
            (at_200(&tuned), at_200(&scratch))
        })
        .collect();
    let wins = pairs.iter().filter(|(t, s)| t > s).count();
    let detail = format!(
        "mechanics {}, pretrained beats scratch in {wins}/{TRANSFER_SEEDS} seeds {pairs:.3?}",
        match &mechanics {
            Ok(()) => "ok".to_string(),
            Err(e) => e.clone(),
        }
    );
    verdict(5, "transfer learning", mechanics.is_ok() && wins >= TRANSFER_MIN_WINS, &detail);
}

// ----------------------------------------------------------- split, sampler

fn index(sizes: &[usize], fixed_train: Option<&[usize]>) -> DatasetIndex {
    let classes = (0..sizes.len()).map(|c| format!("c{c:02}")).collect();
    let mut entries = Vec::new();
    for (class, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let part = fixed_train.map(|t| if i < t[class] { Part::Train } else { Part::Test });
            entries.push(ImageEntry {
                class,
                path: format!("c{class:02}/{i}"),
                part,
            });
        }
    }
    DatasetIndex::new("acceptance", classes, entries).unwrap()
}

fn split_problems(index: &DatasetIndex, split: &Split) -> Option<String> {
    let train: HashSet<usize> = split.train.iter().map(|s| s.image).collect();
    let test: HashSet<usize> = split.test.iter().map(|s| s.image).collect();
    if train.len() != split.train.len() || test.len() != split.test.len() {
        return Some("duplicate sample".into());
    }
    if !train.is_disjoint(&test) {
        return Some("train and test overlap".into());
    }
    let mislabeled = split
        .train
        .iter()
        .chain(&split.test)
        .any(|s| index.entries.get(s.image).is_none_or(|e| e.class != s.class));
    mislabeled.then(|| "sample class disagrees with the index".into())
}

#[test]
fn criterion_06_split_arithmetic() {
    let mut rng = rng::stream(6, 0);
    let sizes: Vec<usize> = (0..32).map(|_| rng.random_range(50..90)).collect();
    let idx = index(&sizes, None);
    let split = make_split(&idx, &parse_split_spec("10x40").unwrap(), 0, CountAllReading::TestCount).unwrap();
    let mut failures = Vec::new();
    if (split.test.len(), split.train.len()) != (320, 1280) {
        failures.push(format!("10x40 gave test {} train {}", split.test.len(), split.train.len()));
    }

    for case in 0..100 {
        let classes = rng.random_range(2..12);
        let sizes: Vec<usize> = (0..classes).map(|_| rng.random_range(10..60)).collect();
        let smallest = *sizes.iter().min().unwrap();
        let (text, fixed) = match case % 4 {
            0 => {
                let a = rng.random_range(1..smallest);
                (format!("{a}x{}", rng.random_range(1..=smallest - a)), None)
            }
            1 => (format!("{}xALL", rng.random_range(1..smallest)), None),
            2 => {
                let d = rng.random_range(2..6);
                (format!("1/{d}x{}/{d}", rng.random_range(1..d)), None)
            }
            _ => {
                let train: Vec<usize> = sizes.iter().map(|&n| rng.random_range(1..n)).collect();
                ("FIXED".to_string(), Some(train))
            }
        };
        let idx = index(&sizes, fixed.as_deref());
        let spec = parse_split_spec(&text).unwrap();
        let seed = rng.random::<u64>();
        let reading = if rng.random::<bool>() { CountAllReading::TestCount } else { CountAllReading::TrainCount };
        let a = make_split(&idx, &spec, seed, reading).unwrap();
        let b = make_split(&idx, &spec, seed, reading).unwrap();
        if a != b {
            failures.push(format!("{text} seed {seed}: not deterministic"));
        }
        if let Some(p) = split_problems(&idx, &a) {
            failures.push(format!("{text} seed {seed}: {p}"));
        }
        if a.test.is_empty() || a.train.is_empty() {
            failures.push(format!("{text} seed {seed}: empty part"));
        }
    }
    let detail = if failures.is_empty() {
        "10x40 on 32 classes: test 320, train 1280; 100 random specs disjoint and deterministic".to_string()
    } else {
        failures.join("; ")
    };
    verdict(6, "split arithmetic", failures.is_empty(), &detail);
}

const SAMPLER_SLOTS: usize = 100_000;
const SAMPLER_ALPHA: f64 = 0.001;

#[test]
fn criterion_07_sampler_uniformity() {
    let sizes: Vec<usize> = (1..=100).collect();
    let idx = index(&sizes, None);
    let split = Split {
        train: idx
            .entries
            .iter()
            .enumerate()
            .map(|(image, e)| leafnet::data::Sample { class: e.class, image })
            .collect(),
        test: Vec::new(),
        seed: 0,
    };
    let mut rng = rng::stream(7, rng::BATCH_WORKER_BASE);
    let mut counts = vec![0usize; sizes.len()];
    let mut slots = 0;
    while slots < SAMPLER_SLOTS {
        let batch = sample_batch(&split, sizes.len(), 32.min(SAMPLER_SLOTS - slots), &mut rng).unwrap();
        for s in batch {
            counts[s.class] += 1;
            slots += 1;
        }
    }
    let expected = SAMPLER_SLOTS as f64 / sizes.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((sizes.len() - 1) as f64).unwrap().cdf(stat);
    let detail = format!("chi-square {stat:.1} on {} df, p = {p:.4} vs alpha {SAMPLER_ALPHA}", sizes.len() - 1);
    verdict(7, "sampler uniformity", p >= SAMPLER_ALPHA, &detail);
}

// ----------------------------------------------------------------- schedule

#[test]
fn criterion_08_schedule_exactness() {
    let config = SolverConfig::default();
    let rates = [0, 20_000, 40_000].map(|i| learning_rate(i, &config));
    let schedule_ok = rates == [0.001, 0.0001, 0.00001] && learning_rate(19_999, &config) == 0.001;

    // training precision: the stated update lands exactly on 0.805
    let (mut p, mut v) = ([1.0f32], [0.0f32]);
    nesterov_step(&mut p, &[1.0], &mut v, 0.1, 0.95, 0.0).unwrap();
    let single_ok = v[0] == -0.1 && p[0] == 0.805;

    // double precision: bit-equal to the same expression, within one ulp of 0.805
    let (mut p64, mut v64) = ([1.0f64], [0.0f64]);
    nesterov_step(&mut p64, &[1.0], &mut v64, 0.1, 0.95, 0.0).unwrap();
    let v_new: f64 = 0.95 * 0.0 - 0.1 * 1.0;
    let oracle = 1.0 + (1.0 + 0.95) * v_new - 0.95 * 0.0;
    let ulps = (p64[0].to_bits() as i64 - 0.805f64.to_bits() as i64).abs();
    let double_ok = p64[0].to_bits() == oracle.to_bits() && ulps <= 1;

    let detail = format!("lr {rates:?}, f32 param {}, f64 param {} ({ulps} ulp from 0.805)", p[0], p64[0]);
    verdict(8, "schedule exactness", schedule_ok && single_ok && double_ok, &detail);
}

// ---------------------------------------------------------- reproducibility

fn end_to_end(dir: &Path, out: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let cfg = dir.join("repro.toml");
    std::fs::write(
        &cfg,
        format!(
            "preset = \"desk\"\ndataset = \"{}\"\niterations = 300\nlr_step = 300\nmonitor_every = 50\n\
             monitor_samples = 100\nworkers = 1\nprotocols = [\"t0\", \"tr:8\", \"tf:8\"]\n",
            dir.join("cache-b").display()
        ),
    )
    .unwrap();
    let Command::Train(t) = parse(&["train", "-q", "--config", s(&cfg), "--output", s(out)]) else { unreachable!() };
    leafnet_cli::commands::cmd_train(&t).unwrap();
    let ckpt = out.join("checkpoints/final.ckpt");
    let Command::Eval(e) = parse(&["eval", s(&ckpt), "--output", s(&out.join("eval"))]) else { unreachable!() };
    leafnet_cli::commands::cmd_eval(&e).unwrap();
    let read = |f: &str| std::fs::read(out.join(f)).unwrap();
    (read("checkpoints/final.ckpt"), read("report.json"), read("eval/eval.json"))
}

#[test]
fn criterion_09_reproducibility() {
    let _serial = exclusive();
    let tmp = tempfile::tempdir().unwrap();
    common::desk_cache(tmp.path(), "b", 50);
    let out = tmp.path().join("run");
    let first = end_to_end(tmp.path(), &out);
    std::fs::remove_dir_all(&out).unwrap();
    let second = end_to_end(tmp.path(), &out);
    let same = [first.0 == second.0, first.1 == second.1, first.2 == second.2];
    let detail = format!(
        "checkpoint {} bytes identical {}, run report identical {}, eval report identical {}",
        first.0.len(),
        same[0],
        same[1],
        same[2]
    );
    verdict(9, "reproducibility", same.iter().all(|&b| b), &detail);
}

// ------------------------------------------------------------ extended run

/// Preprocessed Flavia cache for the complete protocol; without it the
/// command runs on a small stand-in with the same layout.
const FLAVIA_ENV: &str = "LEAFNET_FLAVIA_CACHE";

#[test]
fn criterion_10_extended_run() {
    let _serial = exclusive();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("experiment");
    let (args, dataset): (Vec<String>, String) = match std::env::var(FLAVIA_ENV) {
        Ok(cache) => (vec![], cache),
        Err(_) => {
            // Flavia layout: <root>/<class>/<image>, preprocessed to 350 px
            let raw = tmp.path().join("flavia-like");
            let Command::SyntheticDataset(g) =
                parse(&["synthetic-dataset", s(&raw), "--per-class", "3", "--size", "96"])
            else {
                unreachable!()
            };
            leafnet_cli::commands::cmd_synthetic_dataset(&g).unwrap();
            let cache = tmp.path().join("flavia-like-cache");
            let Command::Preprocess(p) = parse(&["preprocess", s(&raw), s(&cache)]) else { unreachable!() };
            leafnet_cli::commands::cmd_preprocess(&p).unwrap();
            let smoke = ["--split", "1x2", "--iterations", "1", "--runs", "2", "--protocol", "t0", "--protocol", "tr:2", "--protocol", "tf:2"];
            (smoke.map(String::from).to_vec(), cache.to_string_lossy().into_owned())
        }
    };
    let mut argv = vec!["experiment", "-q", "--dataset", &dataset, "--output", s(&out)];
    argv.extend(args.iter().map(String::as_str));
    let Command::Experiment(x) = parse(&argv) else { unreachable!() };
    let report = leafnet_cli::commands::cmd_experiment(&x).unwrap();

    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    let labels: Vec<&str> = report.protocols.iter().map(|p| p.label.as_str()).collect();
    let shaped = labels == ["Single image T0", "Av. TR", "Av. TF"]
        && table.lines().count() == 3
        && table.lines().all(|l| l.contains(" ± "))
        && out.join("merged_confusion.pgm").is_file();
    let tr = report.protocols.iter().find(|p| p.key == "tr").map(|p| p.aggregate.to_string());
    let detail = format!(
        "{} run, Av. TR {} (reference 99.75 ± 0.29, not asserted)",
        if std::env::var(FLAVIA_ENV).is_ok() { "full" } else { "stand-in" },
        tr.unwrap_or_default()
    );
    verdict(10, "extended run", shaped, &detail);
}
