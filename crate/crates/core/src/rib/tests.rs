use super::*;
use crate::model::cam;
use crate::toydata::{generate, DatasetConfig, Split};

fn dataset(n: usize) -> ToyDataset {
    generate(&DatasetConfig {
        n_per_class: n,
        marker_fraction: 0.5,
        seed: 17,
        ..Default::default()
    })
    .unwrap()
}

fn small_cfg(k: usize, batch: usize, lr: f64) -> RibConfig {
    RibConfig {
        k,
        batch,
        lr,
        ..Default::default()
    }
}

#[test]
fn presets_carry_the_documented_values() {
    let toy = RibConfig::preset(Preset::Toy);
    assert_eq!((toy.k, toy.batch, toy.tau, toy.lr, toy.margin), (10, 20, 0.4, 1e-3, 50.0));
    let paper = RibConfig::preset(Preset::Paper);
    assert_eq!((paper.k, paper.batch, paper.tau, paper.lr, paper.margin), (10, 20, 0.4, 8e-6, 600.0));
    assert!(RibConfig { tau: 0.0, ..toy.clone() }.validate().is_err());
    assert!(RibConfig { batch: 0, ..toy.clone() }.validate().is_err());
    assert!(RibConfig { margin: 0.0, ..toy }.validate().is_err());
}

#[test]
fn sampler_contract() {
    let ds = dataset(100);
    assert_eq!(batch_sampler(&ds, 7, 1, 3, 1).unwrap(), vec![7]);
    for k in 0..1000 {
        let b = batch_sampler(&ds, 7, 20, 3, k).unwrap();
        assert_eq!(b[0], 7);
        assert!(!b[1..].contains(&7));
        let mut uniq = b.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 20);
    }
    let differ = (0..200)
        .filter(|&k| batch_sampler(&ds, 7, 20, 3, k).unwrap() != batch_sampler(&ds, 7, 20, 3, k + 1).unwrap())
        .count();
    assert_eq!(differ, 200);
    assert!(matches!(batch_sampler(&dataset(2), 0, 5, 0, 0), Err(Error::Size(_))));
}

#[test]
fn zero_steps_give_the_initial_cam() {
    let ds = dataset(6);
    let theta = ModelParams::init(1);
    let x = (0..ds.len()).find(|&i| cam(&theta, &ds.samples[i].tensor(), ds.samples[i].class).is_ok()).unwrap();
    let a = rib_adapt(x, &theta, &ds, &small_cfg(0, 4, 1e-3)).unwrap();
    let c = cam(&theta, &ds.samples[x].tensor(), ds.samples[x].class).unwrap();
    assert_eq!(a.map.stack, vec![c.normalized.clone()]);
    assert_eq!(a.map.map, aggregate(&[c.normalized]).unwrap());
    assert_eq!(a.logits.len(), 1);
}

#[test]
fn zero_rate_freezes_the_stack_and_matches_bce() {
    let ds = dataset(6);
    let theta = ModelParams::init(2);
    let x = (0..ds.len()).find(|&i| cam(&theta, &ds.samples[i].tensor(), ds.samples[i].class).is_ok()).unwrap();
    let cfg = small_cfg(10, 3, 0.0);
    let a = rib_adapt(x, &theta, &ds, &cfg).unwrap();
    assert_eq!(a.map.stack.len(), 11);
    assert!(a.map.stack.iter().all(|c| c == &a.map.stack[0]));
    let base = rib_adapt(x, &theta, &ds, &small_cfg(0, 3, 0.0)).unwrap();
    for (m, b) in a.map.map.iter().zip(&base.map.map) {
        assert!((m - b).abs() <= 1e-12);
    }
    let bce = finetune_bce_variant(x, &theta, &ds, &cfg, ProbKind::Sigmoid).unwrap();
    assert_eq!(bce.map, a.map);
    assert_eq!(bce.logits, a.logits);
}

#[test]
fn theta0_is_untouched_and_stack_aggregates_to_the_map() {
    let ds = dataset(6);
    let theta = ModelParams::init(3);
    let snapshot = theta.clone();
    let x = (0..ds.len()).find(|&i| cam(&theta, &ds.samples[i].tensor(), ds.samples[i].class).is_ok()).unwrap();
    let (a, thetas) = rib_adapt_keep(x, &theta, &ds, &small_cfg(3, 4, 1e-3)).unwrap();
    assert_eq!(theta, snapshot);
    assert_eq!(thetas.len(), 3);
    assert_ne!(thetas[0], theta);
    let again = aggregate(&a.map.stack).unwrap();
    for (m, b) in a.map.map.iter().zip(&again) {
        assert!((m - b).abs() <= 1e-12);
    }
    assert_eq!(a.map.map.iter().copied().fold(0.0, f64::max), 1.0);
    assert!(a.map.map.iter().all(|&v| v >= 0.0));
}

#[test]
fn margin_stop_freezes_parameters() {
    let ds = dataset(4);
    let mut theta = ModelParams::init(4);
    theta.head_bias.data_mut().fill(100.0);
    let x = (0..ds.len()).find(|&i| cam(&theta, &ds.samples[i].tensor(), ds.samples[i].class).is_ok()).unwrap();
    let cfg = RibConfig {
        pooling: PoolingMode::Gap,
        ..small_cfg(2, 1, 1e-2)
    };
    let (a, thetas) = rib_adapt_keep(x, &theta, &ds, &cfg).unwrap();
    assert!(a.logits[0] >= cfg.margin);
    assert_eq!(thetas[0], theta);
    assert_eq!(thetas[1], theta);
}

#[test]
fn small_steps_raise_the_logit_monotonically() {
    let ds = dataset(4);
    let theta = ModelParams::init(5);
    let x = (0..ds.len()).find(|&i| cam(&theta, &ds.samples[i].tensor(), ds.samples[i].class).is_ok()).unwrap();
    let cfg = RibConfig {
        pooling: PoolingMode::Gap,
        ..small_cfg(6, 1, 1e-4)
    };
    let a = rib_adapt(x, &theta, &ds, &cfg).unwrap();
    assert!(a.logits.iter().all(|&y| y < cfg.margin));
    for w in a.logits.windows(2) {
        assert!(w[1] >= w[0], "{:?}", a.logits);
    }
    for (y, g) in a.logits.iter().zip(&a.gap_logits) {
        assert!((y - g).abs() <= 1e-12);
    }
}

#[test]
fn parallel_and_serial_runs_agree() {
    let ds = dataset(6);
    let theta = ModelParams::init(6);
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| cam(&theta, &ds.samples[i].tensor(), ds.samples[i].class).is_ok())
        .take(3)
        .collect();
    let cfg = small_cfg(2, 3, 1e-3);
    let serial = adapt_many(&idx, &theta, &ds, &cfg, AdaptLoss::Rib, 1).unwrap();
    let parallel = adapt_many(&idx, &theta, &ds, &cfg, AdaptLoss::Rib, 3).unwrap();
    for (s, p) in serial.iter().zip(&parallel) {
        assert_eq!(s.map, p.map);
        assert_eq!(s.logits, p.logits);
    }
}

#[test]
fn degenerate_cam_names_the_iteration() {
    let ds = dataset(4);
    let mut theta = ModelParams::init(7);
    theta.head_weight.data_mut().fill(0.0);
    match rib_adapt(0, &theta, &ds, &small_cfg(2, 2, 1e-3)).unwrap_err() {
        Error::DegenerateMap(msg) => assert!(msg.contains("k=0"), "{msg}"),
        e => panic!("{e}"),
    }
}

#[test]
fn map_files_round_trip() {
    let ds = dataset(4);
    let theta = ModelParams::init(8);
    let x = (0..ds.len()).find(|&i| cam(&theta, &ds.samples[i].tensor(), ds.samples[i].class).is_ok()).unwrap();
    let cfg = small_cfg(2, 2, 1e-3);
    let a = rib_adapt(x, &theta, &ds, &cfg).unwrap();
    let side = MapSidecar {
        sample: x,
        class: a.map.class,
        k: cfg.k,
        loss: AdaptLoss::Rib.name(),
        fallback_count: a.map.fallback_count,
        logits: a.logits.clone(),
        gap_logits: a.gap_logits.clone(),
        config: cfg,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps/m.ribm");
    write_map(&a.map, &side, &path).unwrap();
    let (lm, back) = read_map(&path).unwrap();
    assert_eq!(lm, a.map);
    assert_eq!(back, side);

    let bytes = encode_map(&a.map);
    assert_eq!(&bytes[..4], b"RIBM");
    assert_eq!(bytes.len(), 4 + 12 + 8 * 784 * 4 + 4);
    let mut bad = bytes.clone();
    bad[20] ^= 1;
    assert!(matches!(decode_map(&bad, 0, 0), Err(Error::Checksum { .. })));
}

#[test]
fn pretraining_smoke_and_determinism() {
    let ds = generate(&DatasetConfig {
        n_per_class: 2,
        marker_fraction: 0.0,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(ds.indices(Split::Train).len(), 2);
    let cfg = PretrainConfig {
        epochs: 1,
        batch: 2,
        ..Default::default()
    };
    let (a, log) = pretrain(&ds, &cfg).unwrap();
    assert_eq!(log.len(), 1);
    assert!(log[0].loss.is_finite());
    let (b, _) = pretrain(&ds, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn scratch_run_with_zero_rate_is_flat() {
    let ds = dataset(6);
    let log = train_from_scratch_rib(
        &ds,
        &ScratchConfig {
            epochs: 2,
            lr: 0.0,
            batch: 4,
            max_samples: Some(8),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(log.losses.len(), 4);
    assert_eq!(log.epoch_losses[0], log.epoch_losses[1]);
    assert!(log.terminated_at_step.is_none());
}
