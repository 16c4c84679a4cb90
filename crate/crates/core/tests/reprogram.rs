//! Masks, class maps, the reprogramming loss and gradient, and the
//! sign-gradient optimizer.

use arlab_core::datasets::{make_batches, PadSpec};
use arlab_core::diagnostics::{alignment_before_after, predicted_loss_drop, PerturbationNorm};
use arlab_core::models::{build_cwnet, build_linear, InitMode, LinearScoreModel};
use arlab_core::reprogram::*;
use arlab_core::tensor::finite_diff_check;
use arlab_core::{ClassMap, Error, InputModel, LabeledDataset, Mask, Network, ReprogramConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: [usize; 3] = [3, 8, 8];
const INNER: [usize; 2] = [4, 4];

/// Random values inside the centered image, zeros on the frame.
fn framed_set(n: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = SHAPE;
    let mut data = vec![0.0; n * c * h * w];
    for s in 0..n {
        for ch in 0..c {
            for y in 2..6 {
                for x in 2..6 {
                    data[((s * c + ch) * h + y) * w + x] = rng.random_range(-1.0..1.0);
                }
            }
        }
    }
    let labels = (0..n).map(|i| i % classes).collect();
    LabeledDataset::new(Tensor::new(vec![n, c, h, w], data).unwrap(), labels, classes, format!("set{seed}")).unwrap()
}

fn small_net(seed: u64) -> Network {
    let mut net = build_cwnet(SHAPE, 10, 0.25).unwrap();
    net.init_weights(seed, InitMode::TrainedInit);
    for p in net.params_mut().iter_mut().filter(|p| p.rank() == 1) {
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v = 0.03 * (i as f64 * 1.3).cos();
        }
    }
    net
}

fn mask() -> Mask {
    build_frame_mask(SHAPE, INNER).unwrap()
}

#[test]
fn frame_mask_sizes() {
    assert_eq!(build_frame_mask([3, 224, 224], [28, 28]).unwrap().size(), 148176);
    let m = build_frame_mask([1, 4, 4], [2, 2]).unwrap();
    assert_eq!(m.size(), 12);
    assert_eq!(m.values().data()[5], 0.0);
    assert_eq!(m.values().data()[0], 1.0);
    assert_eq!(build_frame_mask([1, 4, 4], [4, 4]).unwrap().size(), 0);
    assert!(matches!(build_frame_mask([1, 4, 4], [5, 4]), Err(Error::Dimension(_))));
    let spec = MaskSpec { pad: PadSpec::centered([1, 8, 8], [2, 2]).unwrap(), outer: Some([4, 4]) };
    assert_eq!(spec.build().unwrap().size(), 12);
    // an off-center image keeps its surrounding square inside the frame
    let pad = PadSpec { target: [1, 8, 8], inner: [2, 2], offset: Some([0, 5]) };
    let m = build_mask_for(&pad, Some([4, 4])).unwrap();
    assert_eq!(m.size(), 12);
    let ones: Vec<usize> = (0..64).filter(|&i| m.values().data()[i] == 1.0).collect();
    assert!(ones.iter().all(|&i| i / 8 < 4 && i % 8 >= 4));
    assert_eq!(m.values().data()[5], 0.0);
}

#[test]
fn class_map_examples() {
    assert_eq!(build_class_map(10, &ClassMapSpec::FirstTen).unwrap().as_slice(), &(0..10).collect::<Vec<_>>()[..]);
    assert_eq!(build_class_map(3, &ClassMapSpec::Explicit(vec![3, 1, 2])).unwrap().as_slice(), &[3, 1, 2]);
    assert!(matches!(build_class_map(3, &ClassMapSpec::Explicit(vec![1, 1, 2])), Err(Error::NotInjective(1))));
    assert!(build_class_map(2, &ClassMapSpec::Explicit(vec![0, 1, 2])).is_err());
    let h = ClassMap::new(vec![4, 0]).unwrap();
    assert_eq!(h.target_of(0), Some(1));
    assert_eq!(h.target_of(2), None);
    assert!(h.validate_for(4, 2).is_err());
    assert!(h.validate_for(5, 2).is_ok());
}

#[test]
fn apply_program_examples() {
    let ds = framed_set(1, 1, 0);
    let x = ds.sample(0);
    let m = mask();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let delta = Tensor::new(SHAPE.to_vec(), (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    assert_eq!(apply_program(&x, &Tensor::zeros(&SHAPE), &m).unwrap(), x);
    assert_eq!(apply_program(&x, &delta, &Mask::zeros(SHAPE)).unwrap(), x);
    let out = apply_program(&x, &delta, &m).unwrap();
    for i in 0..192 {
        let expected = if m.values().data()[i] == 1.0 { delta.data()[i] } else { x.data()[i] };
        assert_eq!(out.data()[i], expected);
    }
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let mut dirty = x.clone();
    dirty.data_mut()[0] = 0.5;
    assert!(matches!(apply_program(&dirty, &delta, &m), Err(Error::Precondition(_))));
}

#[test]
fn box_projection_examples() {
    let t = box_project(Tensor::vector(vec![1.5, -2.0, 0.3, -1.0]));
    assert_eq!(t.data(), &[1.0, -1.0, 0.3, -1.0]);
}

proptest! {
    #[test]
    fn box_projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let once = box_project(Tensor::vector(v));
        prop_assert!(once.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert_eq!(box_project(once.clone()), once);
    }
}

#[test]
fn uniform_logits_give_log_k_for_any_program() {
    let net = build_cwnet(SHAPE, 10, 0.25).unwrap();
    let ds = framed_set(5, 10, 1);
    let h = ClassMap::identity(10);
    for fill in [0.0, 0.7, -1.0] {
        let l = reprogramming_loss(&net, &ds, &Tensor::full(&SHAPE, fill), &mask(), &h).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn loss_matches_per_sample_loop() {
    let net = small_net(2);
    let ds = framed_set(7, 10, 2);
    let h = ClassMap::new(vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0]).unwrap();
    let delta = Tensor::full(&SHAPE, 0.4);
    let m = mask();
    let got = reprogramming_loss(&net, &ds, &delta, &m, &h).unwrap();
    let mut total = 0.0;
    for i in 0..ds.len() {
        let x = apply_program(&ds.sample(i), &delta, &m).unwrap();
        total += net.loss(&x, 9 - ds.labels()[i]).unwrap();
    }
    assert!((got - total / 7.0).abs() < 1e-12);
    let zero = reprogramming_loss(&net, &ds, &Tensor::zeros(&SHAPE), &m, &h).unwrap();
    let plain: f64 = (0..7).map(|i| net.loss(&ds.sample(i), 9 - ds.labels()[i]).unwrap()).sum::<f64>() / 7.0;
    assert!((zero - plain).abs() < 1e-12);
}

#[test]
fn gradient_is_masked() {
    let net = small_net(3);
    let ds = framed_set(4, 10, 3);
    let h = ClassMap::identity(10);
    let delta = Tensor::full(&SHAPE, -0.2);
    let g = average_masked_gradient(&net, &ds, &delta, &Mask::zeros(SHAPE), &h).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    let m = mask();
    let g = average_masked_gradient(&net, &ds, &delta, &m, &h).unwrap();
    for (v, mv) in g.data().iter().zip(m.values().data()) {
        if *mv == 0.0 {
            assert_eq!(*v, 0.0);
        }
    }
    assert!(g.l1_norm() > 0.0);
}

#[test]
fn linear_score_gradient_is_masked_weight() {
    let w = Tensor::new(SHAPE.to_vec(), (0..192).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let model = LinearScoreModel::new(w.clone(), 0.5).unwrap();
    let ds = framed_set(5, 1, 4);
    let m = mask();
    let h = ClassMap::identity(1);
    for g in masked_input_gradients(&model, &ds, &Tensor::full(&SHAPE, 0.3), &m, &h).unwrap() {
        assert_eq!(g, m.apply(&w).unwrap());
    }
}

#[test]
fn gradient_matches_central_differences_of_the_loss() {
    let net = small_net(5);
    let ds = framed_set(3, 10, 5);
    let h = ClassMap::identity(10);
    let m = mask();
    let delta = Tensor::full(&SHAPE, 0.1);
    let g = average_masked_gradient(&net, &ds, &delta, &m, &h).unwrap();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for j in (0..192).step_by(7) {
        let bump = |s: f64| {
            let mut d = delta.clone();
            d.data_mut()[j] += s;
            reprogramming_loss(&net, &ds, &d, &m, &h).unwrap()
        };
        let fd = (bump(step) - bump(-step)) / (2.0 * step);
        worst = worst.max((fd - g.data()[j]).abs() / fd.abs().max(1.0));
    }
    assert!(worst < 1e-4, "{worst}");
    // the generic checker agrees on the raw input gradient too
    let x = apply_program(&ds.sample(0), &delta, &m).unwrap();
    let err = finite_diff_check(
        |t, v| {
            let p = net.params_on(t, false);
            let out = net.forward(t, v, &p, None)?;
            t.softmax_cross_entropy(out, &[0])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4);
}

fn cfg(epochs: usize, batch: usize, seed: u64) -> ReprogramConfig {
    ReprogramConfig { epochs, batch_size: batch, opt_set_size: 0, eval_set_size: 0, seed, ..Default::default() }
}

#[test]
fn zero_epochs_return_the_zero_program() {
    let net = small_net(6);
    let (opt, eval) = (framed_set(6, 10, 6), framed_set(4, 10, 7));
    let h = ClassMap::identity(10);
    let p = optimize_program(&net, &opt, &eval, &mask(), &h, &cfg(0, 3, 0)).unwrap();
    assert!(p.delta.data().iter().all(|&v| v == 0.0));
    let initial = reprogramming_loss(&net, &eval, &Tensor::zeros(&SHAPE), &mask(), &h).unwrap();
    assert_eq!(p.best_loss, initial);
    assert_eq!(p.history, vec![initial]);
    assert_eq!(p.best_epoch, 0);
}

#[test]
fn optimizer_contract() {
    let net = small_net(8);
    let (opt, eval) = (framed_set(12, 10, 8), framed_set(6, 10, 9));
    let h = ClassMap::identity(10);
    let m = mask();
    let c = ReprogramConfig { eta: 0.05, ..cfg(4, 4, 11) };
    let mut steps = Vec::new();
    let p = optimize_program_observed(&net, &opt, &eval, &m, &h, &c, |e| {
        steps.push((e.epoch, e.batch, e.delta.clone(), e.gradient.clone()));
    })
    .unwrap();
    assert_eq!(steps.len(), 4 * 3);
    assert_eq!(p.history.len(), 5);

    // first step
    let first = make_batches(12, 4, 11, 0).unwrap().remove(0);
    let g0 = average_masked_gradient(&net, &opt.subset(&first).unwrap(), &Tensor::zeros(&SHAPE), &m, &h).unwrap();
    let expected = g0.map(|v| (-0.05 * sign(v)).clamp(-1.0, 1.0));
    assert_eq!(steps[0].2, expected);
    assert_eq!(steps[0].3, g0);

    for (_, _, delta, _) in &steps {
        for (d, mv) in delta.data().iter().zip(m.values().data()) {
            assert!((-1.0..=1.0).contains(d));
            if *mv == 0.0 {
                assert_eq!(*d, 0.0);
            }
        }
    }

    let min = p.history.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(p.best_loss, min);
    assert_eq!(p.history[p.best_epoch], min);
    let replay = reprogramming_loss(&net, &eval, &p.delta, &m, &h).unwrap();
    assert_eq!(replay, p.best_loss);
    let end_of_best_epoch = steps.iter().rev().find(|s| s.0 + 1 == p.best_epoch).map(|s| s.2.clone());
    if let Some(d) = end_of_best_epoch {
        assert_eq!(d, p.delta);
    }

    let again = optimize_program(&net, &opt, &eval, &m, &h, &c).unwrap();
    assert_eq!(again, p);
}

#[test]
fn optimizer_rejects_bad_configs() {
    let net = small_net(1);
    let (opt, eval) = (framed_set(6, 10, 1), framed_set(4, 10, 2));
    let h = ClassMap::identity(10);
    let bad_eta = ReprogramConfig { eta: 0.0, ..cfg(1, 2, 0) };
    assert!(matches!(optimize_program(&net, &opt, &eval, &mask(), &h, &bad_eta), Err(Error::Config(_))));
    assert!(matches!(optimize_program(&net, &opt, &eval, &mask(), &h, &cfg(1, 7, 0)), Err(Error::Config(_))));
    let short_map = ClassMap::identity(5);
    assert!(optimize_program(&net, &opt, &eval, &mask(), &short_map, &cfg(1, 2, 0)).is_err());
    let bad_mask = build_frame_mask(SHAPE, [2, 2]).unwrap();
    assert!(matches!(
        optimize_program(&net, &opt, &eval, &bad_mask, &h, &cfg(1, 2, 0)),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn linear_model_saturates_at_negative_gradient_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut w = Tensor::new(SHAPE.to_vec(), (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    w.data_mut()[0] = 0.0;
    let model = LinearScoreModel::new(w.clone(), -0.25).unwrap();
    let ds = framed_set(8, 1, 14);
    let m = mask();
    let h = ClassMap::identity(1);
    let c = ReprogramConfig { eta: 0.125, eval_on: EvalSetChoice::OptSet, ..cfg(12, 8, 0) };
    let p = optimize_program(&model, &ds, &ds, &m, &h, &c).unwrap();
    let g = m.apply(&w).unwrap();
    assert_eq!(m.apply(&p.delta).unwrap(), g.map(|v| -sign(v)));
    let achieved = p.best_loss - p.history[0];
    let predicted = predicted_loss_drop(&g, PerturbationNorm::LInf, 1.0).unwrap();
    assert!((achieved - predicted).abs() < 1e-9, "{achieved} vs {predicted}");
    assert_eq!(p.best_epoch, 8);
}

#[test]
fn program_checkpoint_replays_alignment() {
    let net = small_net(15);
    let (opt, eval) = (framed_set(8, 10, 15), framed_set(5, 10, 16));
    let h = ClassMap::identity(10);
    let spec = MaskSpec { pad: PadSpec::centered(SHAPE, INNER).unwrap(), outer: None };
    let m = spec.build().unwrap();
    let c = ReprogramConfig { eta: 0.1, ..cfg(2, 4, 3) };
    let p = optimize_program(&net, &opt, &eval, &m, &h, &c).unwrap();
    let logged = alignment_before_after(&net, &eval, &m, &h, &p.delta).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path(), &spec, &h, &c).unwrap();
    let (loaded, sidecar) = Program::load(dir.path()).unwrap();
    assert_eq!(loaded, p);
    assert_eq!(sidecar.config, c);
    let replay = alignment_before_after(&net, &eval, &sidecar.mask.build().unwrap(), &sidecar.class_map, &loaded.delta).unwrap();
    assert_eq!(replay.r_n().to_bits(), logged.r_n().to_bits());
    assert!((0.0..=1.0).contains(&logged.r0()) && (0.0..=1.0).contains(&logged.r_n()));

    let zero = optimize_program(&net, &opt, &eval, &m, &h, &cfg(0, 4, 3)).unwrap();
    let ba = alignment_before_after(&net, &eval, &m, &h, &zero.delta).unwrap();
    assert_eq!(ba.r0(), ba.r_n());
}

#[test]
fn linear_network_through_the_optimizer() {
    let mut net = build_linear(SHAPE, 3).unwrap();
    net.init_weights(17, InitMode::TrainedInit);
    let (opt, eval) = (framed_set(9, 3, 17), framed_set(6, 3, 18));
    let h = ClassMap::identity(3);
    let p = optimize_program(&net, &opt, &eval, &mask(), &h, &ReprogramConfig { eta: 0.1, ..cfg(5, 3, 1) }).unwrap();
    assert!(p.best_loss <= p.history[0]);
}
