//! CWNet construction, initialization, SGD training, prediction and
//! checkpoints.

use arlab_core::datasets::{preprocess, synth_target_dataset, PadSpec, SynthSpec};
use arlab_core::models::*;
use arlab_core::{ClassMap, Error, InputModel, LabeledDataset, Network, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn full_width_cwnet_matches_reference_layout() {
    let net = build_cwnet([3, 224, 224], 10, 1.0).unwrap();
    assert_eq!(net.conv_filters(), vec![32, 32, 64, 64]);
    assert_eq!(net.dense_units(), vec![200, 200, 10]);
    // flattened extent comes from the shape chain: 64 × 56 × 56
    assert_eq!(net.params()[8].shape(), &[64 * 56 * 56, 200]);
    let dropout = net.layers().iter().filter(|l| matches!(l, Layer::Dropout { rate } if *rate == 0.5)).count();
    assert_eq!(dropout, 1);
}

#[test]
fn small_cwnet_scales_counts() {
    let mut net = build_cwnet([3, 32, 32], 10, 0.25).unwrap();
    assert_eq!(net.conv_filters(), vec![8, 8, 16, 16]);
    assert_eq!(net.dense_units(), vec![50, 50, 10]);
    net.init_weights(0, InitMode::TrainedInit);
    let logits = net.logits(&random_input(&[3, 32, 32], 1)).unwrap();
    assert_eq!(logits.len(), 10);
    assert!(logits.iter().all(|v| v.is_finite()));
    assert!(matches!(net.logits(&random_input(&[3, 28, 28], 1)), Err(Error::Dimension(_))));
}

#[test]
fn init_is_seeded_and_scaled() {
    let mut a = build_cwnet([3, 32, 32], 10, 0.25).unwrap();
    let mut b = a.clone();
    let mut c = a.clone();
    a.init_weights(0, InitMode::TrainedInit);
    b.init_weights(0, InitMode::UntrainedRandom);
    c.init_weights(7, InitMode::TrainedInit);
    assert_eq!(a.params(), b.params());
    for (i, (pa, pc)) in a.params().iter().zip(c.params()).enumerate() {
        if pa.rank() > 1 {
            assert_ne!(pa, pc, "weight tensor {i}");
        } else {
            assert!(pa.data().iter().all(|&v| v == 0.0));
        }
    }
    for p in a.params().iter().filter(|p| p.rank() > 1) {
        let fan_in: usize = if p.rank() == 4 { p.shape()[1..].iter().product() } else { p.shape()[0] };
        let bound = (1.0 / fan_in as f64).sqrt();
        assert!(p.data().iter().all(|v| v.abs() <= bound));
        if fan_in >= 100 {
            let n = p.len() as f64;
            let mean = p.sum() / n;
            let std = (p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let expected = bound / 3f64.sqrt();
            assert!((std - expected).abs() <= 0.2 * expected, "{std} vs {expected}");
        }
    }
}

fn tiny_glyphs(per_class: usize, seed: u64) -> LabeledDataset {
    let raw = synth_target_dataset(&SynthSpec { seed, per_class, ..Default::default() }).unwrap();
    preprocess(&raw, &PadSpec::centered([1, 28, 28], [28, 28]).unwrap()).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ds = tiny_glyphs(2, 0);
    let mut net = build_cwnet([1, 28, 28], 10, 0.25).unwrap();
    net.init_weights(3, InitMode::TrainedInit);
    let before = net.params().to_vec();
    let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, batch_size: 5, ..Default::default() };
    train_sgd(&mut net, &ds, &cfg).unwrap();
    for (a, b) in before.iter().zip(net.params()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn one_dense_step_matches_hand_gradient() {
    let x = random_input(&[1, 2, 3], 5);
    let ds = LabeledDataset::new(x.clone().reshape(&[1, 1, 2, 3]).unwrap(), vec![2], 4, "one").unwrap();
    let mut net = build_linear([1, 2, 3], 4).unwrap();
    net.init_weights(9, InitMode::TrainedInit);
    net.params_mut()[1] = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]);
    let (w0, b0) = (net.params()[0].clone(), net.params()[1].clone());
    let logits: Vec<f64> = (0..4)
        .map(|j| (0..6).map(|i| x.data()[i] * w0.data()[i * 4 + j]).sum::<f64>() + b0.data()[j])
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let delta: Vec<f64> = (0..4).map(|j| logits[j].exp() / z - if j == 2 { 1.0 } else { 0.0 }).collect();
    let lr = 0.5;
    let cfg = TrainConfig { epochs: 1, learning_rate: lr, momentum: 0.9, batch_size: 1, seed: 0, dropout: false };
    train_sgd(&mut net, &ds, &cfg).unwrap();
    for i in 0..6 {
        for j in 0..4 {
            let expected = w0.data()[i * 4 + j] - lr * x.data()[i] * delta[j];
            assert!((net.params()[0].data()[i * 4 + j] - expected).abs() < 1e-14);
        }
    }
    for j in 0..4 {
        assert!((net.params()[1].data()[j] - (b0.data()[j] - lr * delta[j])).abs() < 1e-14);
    }
}

#[test]
fn training_is_deterministic_with_and_without_dropout() {
    let ds = tiny_glyphs(3, 1);
    for dropout in [false, true] {
        let run = || {
            let mut net = build_cwnet([1, 28, 28], 10, 0.25).unwrap();
            net.init_weights(2, InitMode::TrainedInit);
            let cfg = TrainConfig { epochs: 2, learning_rate: 0.01, batch_size: 10, seed: 4, dropout, ..Default::default() };
            let hist = train_sgd(&mut net, &ds, &cfg).unwrap();
            (hist, net)
        };
        let (h1, n1) = run();
        let (h2, n2) = run();
        assert_eq!(h1, h2);
        assert_eq!(n1.params(), n2.params());
    }
}

#[test]
fn divergence_is_reported() {
    let ds = tiny_glyphs(1, 2);
    let mut net = build_linear([1, 28, 28], 10).unwrap();
    net.init_weights(0, InitMode::TrainedInit);
    let cfg = TrainConfig { epochs: 50, learning_rate: f64::MAX, batch_size: 2, ..Default::default() };
    let r = train_sgd(&mut net, &ds, &cfg);
    assert!(matches!(r, Err(Error::Divergence { .. })));
}

#[test]
fn cwnet_small_learns_the_glyph_domain() {
    let train = tiny_glyphs(50, 10);
    let test = tiny_glyphs(20, 11);
    let mut net = build_cwnet([1, 28, 28], 10, 0.25).unwrap();
    net.init_weights(1, InitMode::TrainedInit);
    let (m, s) = train.channel_stats();
    net.set_standardization(m, s).unwrap();
    let cfg = TrainConfig { epochs: 10, learning_rate: 0.01, seed: 2, ..Default::default() };
    let hist = train_sgd(&mut net, &train, &cfg).unwrap();
    assert!(hist.last().unwrap() < &hist[0], "{hist:?}");
    let acc = accuracy(&net, &test, None).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}, losses {hist:?}");
}

#[test]
fn prediction_tie_rule_and_batch_consistency() {
    assert_eq!(argmax(&[0.0; 10]), 0);
    let mut onehot = vec![0.0; 10];
    onehot[7] = 5.0;
    assert_eq!(argmax(&onehot), 7);

    let mut net = build_cwnet([3, 8, 8], 10, 0.25).unwrap();
    net.init_weights(4, InitMode::TrainedInit);
    let images = random_input(&[6, 3, 8, 8], 12);
    let (labels, logits) = predict_batch(&net, &images).unwrap();
    for i in 0..6 {
        let x = Tensor::new(vec![3, 8, 8], images.data()[i * 192..(i + 1) * 192].to_vec()).unwrap();
        let l = net.logits(&x).unwrap();
        assert_eq!(l, logits[i]);
        assert_eq!(argmax(&l), labels[i]);
    }
    assert!(predict_batch(&net, &random_input(&[2, 3, 4, 4], 1)).is_err());
}

/// Pseudo-random predictions keyed on the input bits.
struct Scrambler;

impl InputModel for Scrambler {
    fn input_shape(&self) -> [usize; 3] {
        [1, 1, 1]
    }
    fn num_classes(&self) -> usize {
        10
    }
    fn logits(&self, x: &Tensor) -> arlab_core::Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(x.data()[0].to_bits());
        Ok((0..10).map(|_| rng.random()).collect())
    }
    fn loss(&self, _x: &Tensor, _label: usize) -> arlab_core::Result<f64> {
        Ok(0.0)
    }
    fn loss_and_input_grad(&self, x: &Tensor, _label: usize) -> arlab_core::Result<(f64, Tensor)> {
        Ok((0.0, Tensor::zeros(x.shape())))
    }
}

#[test]
fn accuracy_examples() {
    let n = 1000;
    let images = Tensor::new(vec![n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let ds = LabeledDataset::new(images, labels, 10, "scramble").unwrap();
    let acc = accuracy(&Scrambler, &ds, None).unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
    assert_eq!(accuracy(&Scrambler, &ds, Some(&ClassMap::identity(10))).unwrap(), acc);
    let reversed: Vec<usize> = (0..n).rev().collect();
    assert_eq!(accuracy(&Scrambler, &ds.subset(&reversed).unwrap(), None).unwrap(), acc);

    let mut constant = build_linear([1, 1, 1], 10).unwrap();
    constant.params_mut()[1].data_mut()[4] = 1.0;
    let one_class = LabeledDataset::new(Tensor::zeros(&[5, 1, 1, 1]), vec![4; 5], 10, "fours").unwrap();
    assert_eq!(accuracy(&constant, &one_class, None).unwrap(), 1.0);
}

#[test]
fn checkpoint_round_trip() {
    let mut net: Network = build_cwnet([3, 8, 8], 10, 0.25).unwrap();
    net.init_weights(6, InitMode::UntrainedRandom);
    net.set_standardization(vec![0.1, 0.2, 0.3], vec![1.0, 2.0, 0.5]).unwrap();
    let meta = CheckpointMeta {
        architecture: "cwnet".into(),
        width_scale: 0.25,
        trained: false,
        seed: 6,
        config_hash: "abc".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path(), &meta).unwrap();
    let (loaded, m) = Network::load(dir.path()).unwrap();
    assert_eq!(loaded, net);
    assert_eq!(m, meta);
}
