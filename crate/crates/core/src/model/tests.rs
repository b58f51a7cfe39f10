use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcore::{grad_check, GradCheckOptions, ProbKind};

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 1, IMAGE_SIDE, IMAGE_SIDE], |_| rng.random_range(0.0..1.0))
}

fn with_random_biases(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for l in &mut p.convs {
        l.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    p.head_bias.data_mut().copy_from_slice(&[0.3, -0.2]);
    p
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let a = ModelParams::init(5);
    assert_eq!(a, ModelParams::init(5));
    assert_ne!(a, ModelParams::init(6));
    for l in &a.convs {
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }
    assert!(a.head_bias.data().iter().all(|&b| b == 0.0));
    a.validate().unwrap();
}

#[test]
fn first_layer_std_matches_he_scale() {
    let p = ModelParams::init(21);
    let k = p.convs[0].kernel.data();
    assert_eq!(k.len(), 16 * 9);
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    let var = k.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k.len() - 1) as f64;
    let target = (2.0f64 / 9.0).sqrt();
    assert!((var.sqrt() - target).abs() <= 0.2 * target, "std {}", var.sqrt());
}

#[test]
fn snapshot_is_independent_of_original() {
    let a = ModelParams::init(1);
    let mut b = a.clone();
    b.convs[0].kernel.data_mut()[0] += 1.0;
    assert_ne!(a.convs[0].kernel.data()[0], b.convs[0].kernel.data()[0]);
}

#[test]
fn validate_rejects_broken_channel_chain() {
    let mut p = ModelParams::init(1);
    p.convs[2].kernel = Tensor::zeros([32, 8, 3, 3]);
    assert!(matches!(p.validate(), Err(Error::Dimension { .. })));
}

#[test]
fn zero_input_yields_head_bias() {
    let mut p = ModelParams::init(3);
    p.head_bias.data_mut().copy_from_slice(&[0.7, -1.1]);
    let x = Tensor::zeros([2, 1, IMAGE_SIDE, IMAGE_SIDE]);
    let t = forward(&p, &x, &Pooling::Gap, GradTargets::NONE).unwrap();
    for l in 0..NUM_LAYERS {
        assert!(t.feature(l).data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(t.logits().data(), &[0.7, -1.1, 0.7, -1.1]);
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let p = ModelParams::init(3);
    let x = Tensor::zeros([1, 1, 27, IMAGE_SIDE]);
    match forward(&p, &x, &Pooling::Gap, GradTargets::NONE).unwrap_err() {
        Error::Dimension { axis, .. } => assert_eq!(axis, "input height"),
        e => panic!("{e}"),
    }
}

#[test]
fn gap_logit_identity_and_cam_relations() {
    let p = with_random_biases(4);
    let x = image(4);
    let t = forward(&p, &x, &Pooling::Gap, GradTargets::NONE).unwrap();
    let feats = t.feature(NUM_LAYERS - 1);
    assert_eq!(feats.shape(), &[1, FEATURE_DIM, IMAGE_SIDE, IMAGE_SIDE]);
    let pooled = t.graph.value(t.pooled).data();
    for c in 0..NUM_CLASSES {
        let dot: f64 = p.class_weights(c).iter().zip(pooled).map(|(a, b)| a * b).sum();
        assert!((t.logit(0, c) - p.head_bias.data()[c] - dot).abs() <= 1e-12);
    }
    let c = (0..NUM_CLASSES)
        .max_by(|&a, &b| t.logit(0, a).total_cmp(&t.logit(0, b)))
        .unwrap();
    let m = cam(&p, &x, c).unwrap();
    assert_eq!(m.normalized.iter().copied().fold(f64::MIN, f64::max), 1.0);
    let gap_raw = m.raw.iter().sum::<f64>() / m.raw.len() as f64;
    assert!((gap_raw + p.head_bias.data()[c] - t.logit(0, c)).abs() <= 1e-12);

    let mut neg = p.clone();
    neg.head_weight.data_mut()[c * FEATURE_DIM..(c + 1) * FEATURE_DIM]
        .iter_mut()
        .for_each(|w| *w = -*w);
    let t2 = forward(&neg, &x, &Pooling::Gap, GradTargets::NONE).unwrap();
    let raw_neg = raw_cam_from_features(t2.feature(NUM_LAYERS - 1), 0, neg.class_weights(c));
    for (a, b) in raw_neg.iter().zip(&m.raw) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn cam_normalization_is_scale_invariant() {
    let p = with_random_biases(8);
    let x = image(8);
    let class = (0..NUM_CLASSES).find(|&c| cam(&p, &x, c).is_ok()).unwrap();
    let base = cam(&p, &x, class).unwrap();
    let mut scaled = p.clone();
    scaled.head_weight.data_mut()[class * FEATURE_DIM..(class + 1) * FEATURE_DIM]
        .iter_mut()
        .for_each(|w| *w *= 3.5);
    let other = cam(&scaled, &x, class).unwrap();
    for (a, b) in base.normalized.iter().zip(&other.normalized) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cam_of_degenerate_map_is_an_error() {
    let mut p = ModelParams::init(2);
    p.head_weight.data_mut().fill(0.0);
    assert!(matches!(cam(&p, &image(2), 0), Err(Error::DegenerateMap(_))));
}

#[test]
fn gndrp_with_full_threshold_reproduces_gap_logits() {
    let p = with_random_biases(9);
    let x = Tensor::from_fn([2, 1, IMAGE_SIDE, IMAGE_SIDE], |i| ((i * 31) % 17) as f64 / 16.0);
    let gap = forward(&p, &x, &Pooling::Gap, GradTargets::NONE).unwrap();
    let nd = forward(
        &p,
        &x,
        &Pooling::Gndrp {
            tau: 1.0,
            classes: vec![0, 1],
        },
        GradTargets::NONE,
    )
    .unwrap();
    assert_eq!(gap.logits().data(), nd.logits().data());
}

#[test]
fn sgd_zero_rate_and_plain_step() {
    let p0 = with_random_biases(10);
    let grads: Vec<Vec<f64>> = p0.tensors().iter().map(|t| vec![2.0; t.numel()]).collect();
    let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();

    let mut p = p0.clone();
    Sgd::new(0.0, 0.0).step(&mut p, &refs).unwrap();
    assert_eq!(p, p0);

    Sgd::new(0.1, 0.0).step(&mut p, &refs).unwrap();
    for (a, b) in p.tensors().iter().zip(p0.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y - 0.2);
        }
    }
}

#[test]
fn sgd_momentum_recurrence() {
    let p0 = ModelParams::init(11);
    let grads: Vec<Vec<f64>> = p0.tensors().iter().map(|t| vec![0.5; t.numel()]).collect();
    let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
    let mut opt = Sgd::new(0.01, 0.9);
    let mut p = p0.clone();
    opt.step(&mut p, &refs).unwrap();
    let p1 = p.clone();
    opt.step(&mut p, &refs).unwrap();
    let first = p0.head_bias.data()[0] - p1.head_bias.data()[0];
    let second = p1.head_bias.data()[0] - p.head_bias.data()[0];
    assert!((first - 0.01 * 0.5).abs() < 1e-15);
    assert!((second - 0.01 * 0.5 * 1.9).abs() < 1e-15);
}

#[test]
fn sgd_requires_every_gradient() {
    let mut p = ModelParams::init(12);
    let grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
    refs[3] = None;
    assert!(matches!(Sgd::new(0.1, 0.0).step(&mut p, &refs), Err(Error::Usage(_))));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let p = with_random_biases(13);
    let bytes = encode_checkpoint(&p);
    assert_eq!(&bytes[..4], b"RIBW");
    assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
    let mut bad = bytes.clone();
    bad[40] ^= 1;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Checksum { .. })));
}

#[test]
fn full_network_bce_gradients_match_finite_differences() {
    let p = with_random_biases(14);
    let x = image(14);
    let labels = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let mut inputs: Vec<Tensor> = p.tensors().into_iter().map(Tensor::detached).collect();
    inputs.push(x);
    let report = grad_check(
        |g, v| {
            let mut h = v[12];
            for l in 0..NUM_LAYERS {
                let z = g.conv2d(h, v[2 * l], v[2 * l + 1])?;
                h = g.relu(z)?;
            }
            let pooled = g.gap(h)?;
            let y = g.linear(pooled, v[10], v[11])?;
            g.bce_loss(y, &labels, ProbKind::Sigmoid)
        },
        &inputs,
        GradCheckOptions {
            max_samples: 200,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(report.checks.len(), 200);
    assert!(report.passed, "worst {:?}", report.worst());
}
