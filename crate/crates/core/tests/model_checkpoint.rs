use leafnet::model::{
    load_checkpoint, save_checkpoint, transfer_load, Checkpoint, CheckpointMeta, ConvSpec, DigestCheck, Network,
    NetworkConfig, FORMAT_VERSION,
};
use leafnet::rng;
use leafnet::tensor::Tensor;
use leafnet::Error;
use rand::Rng;

fn tiny() -> NetworkConfig {
    NetworkConfig {
        input_size: 12,
        input_channels: 3,
        convs: vec![ConvSpec { kernel: 3, filters: 4 }, ConvSpec { kernel: 2, filters: 5 }],
        pool_size: 2,
        pool_stride: 2,
        conv_relu: false,
        fc_width: 7,
        dropout: 0.5,
    }
}

fn meta(config: &NetworkConfig, classes: usize) -> CheckpointMeta {
    CheckpointMeta {
        iteration: 42,
        seed: 7,
        dataset: "fixture".into(),
        num_classes: classes,
        network: config.clone(),
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
    }
}

fn input(n: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, 0);
    Tensor::from_vec(&[n, 3, 12, 12], (0..n * 432).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn trained(seed: u64, classes: usize) -> Network<f32> {
    let mut net = Network::<f32>::build(&tiny(), classes).unwrap();
    net.init_weights(seed);
    net
}

#[test]
fn default_configuration_builds_with_consistent_chain() {
    let net = Network::<f32>::build(&NetworkConfig::default(), 32).unwrap();
    assert_eq!(net.param("fc1.weight").unwrap().value.shape(), &[256 * 16 * 16, 500]);
    assert_eq!(net.param("softmax_classifier.weight").unwrap().value.shape(), &[500, 32]);
    assert_eq!(
        net.layer_names(),
        [
            "conv1", "pool1", "conv2", "pool2", "conv3", "pool3", "conv4", "pool4", "fc1", "relu_fc1", "dropout",
            "softmax_classifier"
        ]
    );
}

#[test]
fn uninitialized_network_refuses_forward() {
    let net = Network::<f32>::build(&tiny(), 3).unwrap();
    assert!(matches!(net.forward_eval(&input(1, 0)), Err(Error::State(_))));
}

#[test]
fn he_initialization_statistics() {
    let mut net = Network::<f64>::build(&NetworkConfig::default(), 10).unwrap();
    net.init_weights(11);
    let w = &net.param("conv2.weight").unwrap().value;
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let expected = 2.0 / (32.0 * 25.0);
    assert!(mean.abs() < 4.0 * (expected / n).sqrt(), "mean {mean}");
    assert!((var / expected - 1.0).abs() < 0.02, "variance {var} vs {expected}");
    assert!(net.param("conv2.bias").unwrap().value.data().iter().all(|&b| b == 0.0));
}

#[test]
fn eval_forward_is_pure_and_ignores_dropout() {
    let mut net = trained(1, 4);
    let x = input(3, 2);
    let a = net.forward_eval(&x).unwrap();
    let mut r = rng::stream(5, 5);
    net.forward_train(&x, &mut r).unwrap();
    let b = net.forward_eval(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[3, 4]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = trained(3, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let saved = save_checkpoint(&net, &meta(&tiny(), 4), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(saved, loaded);
    assert_eq!(loaded.version, FORMAT_VERSION);
    let restored: Network<f32> = loaded.to_network().unwrap();
    for (a, b) in net.params().iter().zip(restored.params()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let x = input(2, 9);
    assert_eq!(net.forward_eval(&x).unwrap(), restored.forward_eval(&x).unwrap());
    assert_eq!(saved.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn every_truncation_is_detected() {
    let bytes = Checkpoint::from_network(&trained(4, 3), meta(&tiny(), 3)).to_bytes().unwrap();
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::CheckpointTruncated(_)) | Err(Error::CheckpointCorrupt(_)) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::CheckpointCorrupt(_))));
}

#[test]
fn version_magic_and_dtype_are_checked() {
    let bytes = Checkpoint::from_network(&trained(4, 3), meta(&tiny(), 3)).to_bytes().unwrap();
    let mut v = bytes.clone();
    v[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&v),
        Err(Error::CheckpointVersion { found: 99, .. })
    ));
    let mut m = bytes.clone();
    m[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&m), Err(Error::CheckpointCorrupt(_))));
    // first record: magic 8, version 4, digest 8, count 4, name length 4, name
    let name_len = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
    let mut d = bytes;
    d[28 + name_len] = 77;
    assert!(matches!(Checkpoint::from_bytes(&d), Err(Error::CheckpointCorrupt(_))));
}

#[test]
fn class_count_mismatch_is_a_digest_error() {
    let ckpt = Checkpoint::from_network(&trained(2, 4), meta(&tiny(), 4));
    let mut other = Network::<f32>::build(&tiny(), 5).unwrap();
    assert!(matches!(
        ckpt.restore_into(&mut other, DigestCheck::Strict),
        Err(Error::CheckpointDigest { .. })
    ));
    // lenient restore still refuses mismatched shapes, leaving the network untouched
    assert!(ckpt.restore_into(&mut other, DigestCheck::Lenient).is_err());
    assert!(!other.is_initialized());
}

#[test]
fn transfer_restores_features_and_redraws_classifier() {
    let source = trained(8, 4);
    let ckpt = Checkpoint::from_network(&source, meta(&tiny(), 4));
    let mut target = Network::<f32>::build(&tiny(), 6).unwrap();
    let report = transfer_load(&ckpt, &mut target, 99).unwrap();
    assert_eq!(report.reinitialized_layers(), ["softmax_classifier"]);
    assert_eq!(report.restored.len(), 6);
    for p in target.params() {
        let rec = ckpt.tensor(&p.name).unwrap();
        if p.is_classifier() {
            assert_eq!(p.value.shape()[p.value.rank() - 1], 6);
        } else {
            assert_eq!(rec.to_tensor::<f32>().unwrap(), p.value, "{}", p.name);
        }
    }
    let w = target.param("softmax_classifier.weight").unwrap();
    assert!(w.value.data().iter().any(|&v| v != 0.0));
    assert!(target.param("softmax_classifier.bias").unwrap().value.data().iter().all(|&v| v == 0.0));

    let mut same_width = Network::<f32>::build(&tiny(), 4).unwrap();
    transfer_load(&ckpt, &mut same_width, 99).unwrap();
    assert_ne!(
        same_width.param("softmax_classifier.weight").unwrap().value,
        source.param("softmax_classifier.weight").unwrap().value
    );
}

#[test]
fn transfer_rejects_incompatible_feature_layers() {
    let ckpt = Checkpoint::from_network(&trained(8, 4), meta(&tiny(), 4));
    let mut wider = tiny();
    wider.fc_width = 9;
    let mut target = Network::<f32>::build(&wider, 4).unwrap();
    match transfer_load(&ckpt, &mut target, 0) {
        Err(Error::Transfer { tensor, .. }) => assert_eq!(tensor, "fc1.weight"),
        other => panic!("{other:?}"),
    }
    assert!(!target.is_initialized());
}
