use leafnet::data::Sample;
use leafnet::eval::{evaluate, merged_confusion, predict_single, ConfusionMatrix, EvalProtocol, EvalSettings, PredictionRecord, VoteRule};
use leafnet::model::{ConvSpec, Network, NetworkConfig};
use leafnet::rng;
use leafnet::synthetic::{desk_geometry, desk_preprocess, generate_preprocessed, SyntheticConfig};
use leafnet::{Error, ImageU8};
use rand::RngCore;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 38,
        input_channels: 3,
        convs: vec![ConvSpec { kernel: 5, filters: 3 }],
        pool_size: 2,
        pool_stride: 2,
        conv_relu: false,
        fc_width: 8,
        dropout: 0.5,
    }
}

/// Every weight zero, classifier bias one-hot on `k`.
fn constant(k: usize, classes: usize) -> Network<f32> {
    let mut net = Network::<f32>::build(&small_config(), classes).unwrap();
    net.init_weights(0);
    for p in net.params_mut() {
        p.value.data_mut().fill(0.0);
        if p.name == "softmax_classifier.bias" {
            p.value.data_mut()[k] = 5.0;
        }
    }
    net
}

fn fixture() -> (Vec<ImageU8>, Vec<Sample>) {
    let (index, images) = generate_preprocessed(
        &SyntheticConfig {
            images_per_class: 3,
            ..Default::default()
        },
        &desk_preprocess(),
    )
    .unwrap();
    let samples = index
        .entries
        .iter()
        .enumerate()
        .map(|(image, e)| Sample { class: e.class, image })
        .collect();
    (images, samples)
}

fn settings() -> EvalSettings {
    EvalSettings {
        geometry: desk_geometry(),
        ..Default::default()
    }
}

#[test]
fn constant_classifier_wins_under_every_protocol_and_count() {
    let (images, samples) = fixture();
    let net = constant(3, 5);
    let mut r = rng::stream(0, 0);
    for protocol in [
        EvalProtocol::T0,
        EvalProtocol::TR { augmentations: 7 },
        EvalProtocol::TF { augmentations: 1 },
        EvalProtocol::TF { augmentations: 16 },
        EvalProtocol::TF { augmentations: 64 },
    ] {
        let rec = predict_single(&net, &images[0], samples[0], &protocol, &settings(), &mut r).unwrap();
        assert_eq!(rec.predicted, 3, "{protocol}");
        assert_eq!(rec.votes.iter().sum::<usize>(), protocol.augmentations());
        assert_eq!(rec.votes[3], protocol.augmentations());
    }
}

#[test]
fn t0_consumes_no_randomness_and_is_deterministic() {
    let (images, samples) = fixture();
    let mut net = Network::<f32>::build(&small_config(), 5).unwrap();
    net.init_weights(4);
    let mut r = rng::stream(1, 1);
    let untouched = rng::stream(1, 1).next_u64();
    let a = predict_single(&net, &images[2], samples[2], &EvalProtocol::T0, &settings(), &mut r).unwrap();
    assert_eq!(r.next_u64(), untouched);
    let b = evaluate(&net, &images, &samples, &EvalProtocol::T0, &settings(), 1).unwrap();
    let c = evaluate(&net, &images, &samples, &EvalProtocol::T0, &settings(), 2).unwrap();
    assert_eq!(b.records, c.records);
    assert_eq!(b.records[2], a);
}

#[test]
fn tr_results_do_not_depend_on_thread_count() {
    let (images, samples) = fixture();
    let mut net = Network::<f32>::build(&small_config(), 5).unwrap();
    net.init_weights(4);
    let p = EvalProtocol::TR { augmentations: 5 };
    let one = evaluate(&net, &images, &samples, &p, &settings(), 3).unwrap();
    let three = evaluate(&net, &images, &samples, &p, &EvalSettings { threads: 3, ..settings() }, 3).unwrap();
    assert_eq!(one, three);
}

#[test]
fn accuracy_is_trace_over_total_and_rows_count_tests() {
    let (images, samples) = fixture();
    let mut net = Network::<f32>::build(&small_config(), 5).unwrap();
    net.init_weights(9);
    let reports: Vec<_> = EvalProtocol::standard()
        .iter()
        .map(|p| {
            let p = match p {
                EvalProtocol::T0 => EvalProtocol::T0,
                EvalProtocol::TR { .. } => EvalProtocol::TR { augmentations: 4 },
                EvalProtocol::TF { .. } => EvalProtocol::TF { augmentations: 4 },
            };
            evaluate(&net, &images, &samples, &p, &settings(), 0).unwrap()
        })
        .collect();
    for r in &reports {
        assert_eq!(r.accuracy, r.confusion.trace() as f64 / r.confusion.total() as f64);
        assert_eq!(r.total, samples.len());
    }
    let merged = merged_confusion(reports.iter().map(|r| &r.confusion)).unwrap();
    assert_eq!(merged.row_sums(), vec![3 * 3; 5]);
    assert_eq!(merged.total(), 3 * samples.len() as u64);
}

#[test]
fn constant_classifier_accuracy_is_its_class_share() {
    let (images, samples) = fixture();
    let report = evaluate(&constant(2, 5), &images, &samples, &EvalProtocol::T0, &settings(), 0).unwrap();
    assert_eq!(report.correct, 3);
    assert_eq!((0..5).map(|t| report.confusion.get(t, 2)).sum::<u64>(), 15);
}

#[test]
fn perfect_records_give_a_diagonal_matrix() {
    let records: Vec<PredictionRecord> = (0..12)
        .map(|i| PredictionRecord {
            image: i,
            true_class: i % 4,
            predicted: i % 4,
            votes: vec![],
        })
        .collect();
    let m = ConfusionMatrix::from_records(4, &records).unwrap();
    assert_eq!(m.accuracy(), 1.0);
    for t in 0..4 {
        for p in 0..4 {
            assert_eq!(m.get(t, p), if t == p { 3 } else { 0 });
        }
    }
}

#[test]
fn asymmetric_errors_are_kept_apart() {
    let mut m = ConfusionMatrix::new(15);
    for _ in 0..4 {
        m.add(12, 13).unwrap();
    }
    m.add(13, 12).unwrap();
    assert_eq!((m.get(12, 13), m.get(13, 12)), (4, 1));
    let norm = m.normalized_errors();
    assert_eq!(norm[12 * 15 + 13], 1.0);
    assert_eq!(norm[13 * 15 + 12], 0.25);
    let csv = m.to_csv(&[]);
    assert_eq!(csv.lines().count(), 16);
    assert!(csv.lines().nth(13).unwrap().ends_with(",0,4,0"));
}

#[test]
fn mean_probability_rule_and_error_paths() {
    let (images, samples) = fixture();
    let net = constant(1, 5);
    let s = EvalSettings {
        vote: VoteRule::MeanProbability,
        ..settings()
    };
    let mut r = rng::stream(0, 0);
    let rec = predict_single(&net, &images[0], samples[0], &EvalProtocol::TF { augmentations: 3 }, &s, &mut r).unwrap();
    assert_eq!(rec.predicted, 1);

    let blank = Network::<f32>::build(&small_config(), 5).unwrap();
    assert!(matches!(
        predict_single(&blank, &images[0], samples[0], &EvalProtocol::T0, &s, &mut r),
        Err(Error::State(_))
    ));
    assert!(matches!(evaluate(&net, &images, &[], &EvalProtocol::T0, &s, 0), Err(Error::Parameter(_))));
}
