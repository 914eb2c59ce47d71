mod common;

use common::random;
use proptest::prelude::*;
use rand::Rng;
use tapfuse_core::data::{generate_shapes_classification, stratified_subsample, Labels, SyntheticSpec, TaskKind};
use tapfuse_core::features::{FeatureKey, FeatureStack};
use tapfuse_core::fusion::{FeatureLayout, FusionConfig, Strategy};
use tapfuse_core::heads::{HeadKind, UperNetConfig};
use tapfuse_core::metrics::compute_miou;
use tapfuse_core::probe::{train_probe, Probe, ProbeConfig, ProbeData};
use tapfuse_core::taps::ModuleKind;

/// Per-class IoU by direct pixel enumeration.
fn brute_iou(pred: &[usize], label: &[usize], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let inter = pred.iter().zip(label).filter(|(p, l)| **p == c && **l == c).count();
            let union = pred.iter().zip(label).filter(|(p, l)| **p == c || **l == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

#[test]
fn miou_matches_pixel_oracle_on_random_maps() {
    let mut rng = tapfuse_core::rng(42);
    for _ in 0..100 {
        let classes = rng.random_range(2..6);
        let pred: Vec<usize> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let label: Vec<usize> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let r = compute_miou(&pred, &label, classes, None).unwrap();
        let want = brute_iou(&pred, &label, classes);
        assert_eq!(r.per_class, want);
        let present: Vec<f64> = want.iter().flatten().copied().collect();
        assert_eq!(r.miou, Some(present.iter().sum::<f64>() / present.len() as f64));
    }
}

#[test]
fn stratified_tenth_is_within_one_per_class() {
    let mut rng = tapfuse_core::rng(7);
    let strata: Vec<usize> = (0..737).map(|_| rng.random_range(0..6)).collect();
    for seed in 0..5 {
        let s = stratified_subsample(&strata, 0.1, seed).unwrap();
        for c in 0..6 {
            let total = strata.iter().filter(|&&x| x == c).count() as f64;
            let kept = s.indices.iter().filter(|&&i| strata[i] == c).count() as f64;
            assert!((kept - 0.1 * total).abs() <= 1.0, "class {c}: {kept} of {total}");
        }
    }
    let a = stratified_subsample(&strata, 0.1, 1).unwrap();
    let b = stratified_subsample(&strata, 0.1, 2).unwrap();
    let count = |s: &[usize], c| s.iter().filter(|&&i| strata[i] == c).count();
    assert_ne!(a.indices, b.indices);
    assert!((0..6).all(|c| count(&a.indices, c) == count(&b.indices, c)));
    let hundred: Vec<usize> = (0..500).map(|i| i / 100).collect();
    let s = stratified_subsample(&hundred, 0.1, 3).unwrap();
    assert!((0..5).all(|c| s.indices.iter().filter(|&&i| hundred[i] == c).count() == 10));
}

#[test]
fn classification_benchmark_is_balanced() {
    let spec = SyntheticSpec { train: 1000, val: 0, test: 0, image_size: 8, num_classes: 4, ..Default::default() };
    let s = generate_shapes_classification::<f32>(&spec, false).unwrap();
    let Labels::Class(v) = &s.train.labels else { panic!() };
    for c in 0..4 {
        let share = v.iter().filter(|&&l| l == c).count() as f64 / 1000.0;
        assert!((share - 0.25).abs() <= 0.05 * 0.25, "class {c}: {share}");
    }
}

/// Features whose first channel encodes the class, plus noise.
fn toy_split(n: usize, seed: u64) -> ProbeData<f64> {
    let mut rng = tapfuse_core::rng(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut stack = FeatureStack::new();
    for t in [1, 100] {
        for kind in [ModuleKind::ResNet, ModuleKind::SelfAttention] {
            let base = random(&[n, 4, 4, 4], seed + t as u64 + kind as u64);
            let mut data = base.data().to_vec();
            for (b, &c) in labels.iter().enumerate() {
                for p in 0..16 {
                    data[b * 64 + (c % 4) * 16 + p] += 2.0 + rng.random_range(0.0..0.1);
                }
            }
            let key = FeatureKey { scale: 1, timestep: t, block: 1, kind };
            stack.insert(key, tapfuse_core::Tensor::from_vec(&[n, 4, 4, 4], data).unwrap()).unwrap();
        }
    }
    ProbeData::new(stack, Labels::Class(labels), 3, None, (8, 8)).unwrap()
}

fn config(strategy: Strategy, epochs: usize) -> ProbeConfig {
    ProbeConfig {
        fusion: FusionConfig { strategy, d_out: vec![6], ..Default::default() },
        head: HeadKind::Linear,
        decoder: UperNetConfig::default(),
        epochs,
        batch_size: 8,
        lr: 0.01,
        warmup_epochs: 2.0,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_keeps_initialization() {
    let (train, val) = (toy_split(24, 1), toy_split(12, 2));
    let cfg = config(Strategy::Global, 0);
    let mut probe = Probe::<f64>::new(FeatureLayout::of(&train.features).unwrap(), TaskKind::Classification, 3, (8, 8), &cfg, None).unwrap();
    let init = probe.store.checksum();
    let r = train_probe(&mut probe, &train, &val, &cfg).unwrap();
    assert_eq!(init, probe.store.checksum());
    assert!(r.epoch_losses.is_empty());
    assert_eq!(r.best_epoch, 0);
}

#[test]
fn lr_follows_closed_form_at_every_step() {
    let (train, val) = (toy_split(20, 3), toy_split(9, 4));
    let cfg = config(Strategy::Localized, 6);
    let mut probe = Probe::<f64>::new(FeatureLayout::of(&train.features).unwrap(), TaskKind::Classification, 3, (8, 8), &cfg, None).unwrap();
    let r = train_probe(&mut probe, &train, &val, &cfg).unwrap();
    assert_eq!(r.steps_per_epoch, 3);
    assert_eq!(r.step_lrs.len(), 18);
    for (i, lr) in r.step_lrs.iter().enumerate() {
        let e = i as f64 / 3.0;
        let want = if e < 2.0 { 0.01 * e / 2.0 } else { 0.005 * (1.0 + (std::f64::consts::PI * (e - 2.0) / 4.0).cos()) };
        assert!((lr - want).abs() < 1e-15, "step {i}: {lr} vs {want}");
    }
}

#[test]
fn probes_learn_and_are_deterministic() {
    let (train, val) = (toy_split(48, 5), toy_split(24, 6));
    for strategy in [Strategy::Global, Strategy::Localized, Strategy::Moe, Strategy::Concat] {
        let cfg = config(strategy, 8);
        let run = || {
            let mut probe = Probe::<f64>::new(FeatureLayout::of(&train.features).unwrap(), TaskKind::Classification, 3, (8, 8), &cfg, None).unwrap();
            let r = train_probe(&mut probe, &train, &val, &cfg).unwrap();
            (r, probe.store.checksum())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b, "{strategy:?}");
        assert_eq!(ca, cb);
        assert!(a.best_val.accuracy > 0.9, "{strategy:?}: {}", a.best_val.accuracy);
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
    }
}

#[test]
fn segmentation_requires_decoder_and_empty_splits_fail() {
    let train = toy_split(6, 7);
    let cfg = config(Strategy::Global, 1);
    let layout = FeatureLayout::of(&train.features).unwrap();
    assert!(Probe::<f64>::new(layout.clone(), TaskKind::Segmentation, 3, (8, 8), &cfg, None).is_err());
    let mut probe = Probe::<f64>::new(layout, TaskKind::Classification, 3, (8, 8), &cfg, None).unwrap();
    let empty = train.subset(&[]).unwrap();
    assert!(empty.is_empty());
    assert!(train_probe(&mut probe, &train, &empty, &cfg).is_err());
}

proptest! {
    #[test]
    fn miou_oracle_property(seed in 0u64..10_000, classes in 1usize..7) {
        let mut rng = tapfuse_core::rng(seed);
        let pred: Vec<usize> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let label: Vec<usize> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let r = compute_miou(&pred, &label, classes, None).unwrap();
        prop_assert_eq!(r.per_class, brute_iou(&pred, &label, classes));
    }

    #[test]
    fn subsample_is_deterministic(seed in 0u64..1000, frac in 0.05f64..1.0) {
        let strata: Vec<usize> = (0..200).map(|i| (i * 7) % 5).collect();
        let a = stratified_subsample(&strata, frac, seed).unwrap();
        prop_assert_eq!(&a, &stratified_subsample(&strata, frac, seed).unwrap());
        prop_assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    }
}
