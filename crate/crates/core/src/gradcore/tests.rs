use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn strict() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        tol: 1e-4,
        max_samples: 200,
        seed: 11,
    }
}

#[test]
fn conv_zero_input_gives_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 1, 3, 3]));
    let k = g.constant(random(&[1, 1, 3, 3], 1));
    let b = g.constant(t(&[1], &[0.75]));
    let y = g.conv2d(x, k, b).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.75));
}

#[test]
fn conv_impulse_response_is_cross_correlation() {
    let mut impulse = Tensor::zeros([1, 1, 3, 3]);
    impulse.data_mut()[4] = 1.0;
    let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut g = Graph::new();
    let x = g.constant(impulse);
    let k = g.constant(t(&[1, 1, 3, 3], &kernel));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(x, k, b).unwrap();
    let out = g.value(y).data();
    assert_eq!(out[4], kernel[4]);
    // out(y, x) = k[2 - y, 2 - x] for an impulse under cross-correlation.
    for yy in 0..3 {
        for xx in 0..3 {
            assert_eq!(out[yy * 3 + xx], kernel[(2 - yy) * 3 + (2 - xx)]);
        }
    }
}

#[test]
fn conv_rejects_mismatched_channels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros([3, 1, 3, 3]));
    let b = g.constant(Tensor::zeros([3]));
    match g.conv2d(x, k, b).unwrap_err() {
        Error::Dimension {
            axis,
            expected,
            got,
            ..
        } => {
            assert_eq!(axis, "kernel in-channels");
            assert_eq!((expected, got), (2, 1));
        }
        e => panic!("unexpected {e}"),
    }
    let k5 = g.constant(Tensor::zeros([3, 2, 5, 5]));
    assert!(matches!(g.conv2d(x, k5, b), Err(Error::Dimension { .. })));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let inputs = [
        random(&[2, 4, 8, 8], 2),
        random(&[3, 4, 3, 3], 3),
        random(&[3], 4),
    ];
    let report = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            g.sum(y)
        },
        &inputs,
        strict(),
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_error);
    assert_eq!(report.checks.len(), 200);
}

#[test]
fn activation_values_at_zero() {
    for kind in [
        Activation::Sigmoid,
        Activation::Tanh01,
        Activation::Softsign01,
    ] {
        assert_eq!(kind.apply(0.0), 0.5);
    }
    assert_eq!(Activation::Relu.apply(-3.2), 0.0);
    assert_eq!(Activation::Relu.apply(3.2), 3.2);
    assert_eq!(Activation::Sigmoid.derivative(0.0), 0.25);
    assert_eq!(Activation::Softsign01.derivative(0.0), 0.5);
    assert_eq!(Activation::Tanh01.derivative(0.0), 0.5);
}

#[test]
fn activation_derivatives_match_finite_differences() {
    for kind in [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh01,
        Activation::Softsign01,
    ] {
        let mut x = random(&[256], 5);
        // keep relu away from its kink
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v = 0.5
            }
        });
        let report = grad_check(
            |g, v| {
                let y = g.activation(kind, v[0])?;
                g.sum_squares(y)
            },
            &[x],
            strict(),
        )
        .unwrap();
        assert!(report.passed, "{kind:?}: {}", report.max_rel_error);
    }
}

#[test]
fn squashing_activations_stay_in_unit_interval() {
    for kind in [
        Activation::Sigmoid,
        Activation::Tanh01,
        Activation::Softsign01,
    ] {
        for z in [-30.0, -2.0, 0.3, 4.0, 30.0] {
            let v = kind.apply(z);
            assert!(v >= 0.0 && v <= 1.0, "{kind:?}({z}) = {v}");
        }
    }
}

#[test]
fn gap_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.gap(x).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);

    let c = g.constant(Tensor::full([2, 3, 4, 5], -1.75));
    let pc = g.gap(c).unwrap();
    assert!(g.value(pc).data().iter().all(|&v| v == -1.75));
}

#[test]
fn gndrp_examples() {
    let feature = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let cam = t(&[1, 2, 2], &[0.25, 0.5, 0.75, 1.0]);
    let cases = [(0.4, 1.0, false), (1.0, 2.5, false), (0.1, 1.0, true)];
    for (tau, expected, fb) in cases {
        let mut g = Graph::new();
        let x = g.param(feature.clone());
        let pooled = g.gndrp(x, &cam, tau).unwrap();
        assert_eq!(g.value(pooled.var).data(), &[expected], "tau={tau}");
        assert_eq!(pooled.fallback, vec![fb]);
    }
}

#[test]
fn gndrp_routes_gradient_only_to_selected_locations() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
    let cam = t(&[1, 2, 2], &[0.1, 0.9, 0.3, 1.0]);
    let pooled = g.gndrp(x, &cam, 0.4).unwrap();
    let s = g.sum(pooled.var).unwrap();
    g.backward(s).unwrap();
    assert_eq!(
        g.grad(x).unwrap(),
        &[0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0]
    );
}

#[test]
fn gndrp_and_linear_gradients_match_finite_differences() {
    let cam = Tensor::from_fn([2, 5, 5], |i| ((i * 7) % 10) as f64 / 9.0);
    let inputs = [
        random(&[2, 6, 5, 5], 6),
        random(&[3, 6], 7),
        random(&[3], 8),
    ];
    let report = grad_check(
        |g, v| {
            let p = g.gndrp(v[0], &cam, 0.4)?;
            let y = g.linear(p.var, v[1], v[2])?;
            g.sum_squares(y)
        },
        &inputs,
        strict(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);
}

#[test]
fn bce_examples() {
    for label in [1.0, 0.0] {
        let mut g = Graph::new();
        let y = g.param(t(&[1, 1], &[0.0]));
        let l = g
            .bce_loss(y, &t(&[1, 1], &[label]), ProbKind::Sigmoid)
            .unwrap();
        assert!((g.value(l).item() - 0.693147).abs() < 1e-6);
        g.backward(l).unwrap();
        let expected = if label == 1.0 { -0.5 } else { 0.5 };
        assert!((g.grad(y).unwrap()[0] - expected).abs() < 1e-12);
    }
}

#[test]
fn bce_rejects_non_binary_labels() {
    let mut g = Graph::new();
    let y = g.param(t(&[1, 2], &[0.0, 1.0]));
    let err = g
        .bce_loss(y, &t(&[1, 2], &[0.5, 0.5]), ProbKind::Sigmoid)
        .unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn bce_gradients_match_finite_differences() {
    let labels = Tensor::from_fn([50, 4], |i| ((i * 5 + 1) % 2) as f64);
    for kind in ProbKind::ALL {
        let mut logits = random(&[50, 4], 9);
        logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let report =
            grad_check(|g, v| g.bce_loss(v[0], &labels, kind), &[logits], strict()).unwrap();
        assert!(report.passed, "{kind:?}: {}", report.max_rel_error);
    }
}

#[test]
fn rib_examples() {
    let labels = t(&[1, 2], &[1.0, 0.0]);
    for (y1, loss, grad) in [(700.0, -600.0, [0.0, 0.0]), (500.0, -500.0, [-1.0, 0.0])] {
        let mut g = Graph::new();
        let y = g.param(t(&[1, 2], &[y1, -3.0]));
        let l = g.rib_loss(y, &labels, 600.0).unwrap();
        assert_eq!(g.value(l).item(), loss);
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap(), &grad);
    }
}

#[test]
fn rib_tie_takes_zero_branch_and_margin_is_validated() {
    let mut g = Graph::new();
    let y = g.param(t(&[1, 1], &[50.0]));
    let l = g.rib_loss(y, &t(&[1, 1], &[1.0]), 50.0).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(y).unwrap(), &[0.0]);
    assert!(g.rib_loss(y, &t(&[1, 1], &[1.0]), 0.0).is_err());
}

#[test]
fn rib_gradient_check_far_below_margin() {
    let labels = Tensor::from_fn([100, 2], |i| (i % 2) as f64);
    let logits = random(&[100, 2], 10);
    let report = grad_check(
        |g, v| g.rib_loss(v[0], &labels, 600.0),
        &[logits],
        GradCheckOptions {
            tol: 1e-6,
            ..strict()
        },
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);
    for c in &report.checks {
        let expected = if c.index % 2 == 1 { -1.0 / 100.0 } else { 0.0 };
        assert_eq!(c.analytic, expected);
    }
}

#[test]
fn backward_of_sum_is_ones_and_accumulates() {
    let mut g = Graph::new();
    let x = g.param(random(&[3, 4], 12));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 2.0));
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_detached_and_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1.0));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    let v = g.param(Tensor::zeros([3]));
    let a = g.relu(v).unwrap();
    assert!(matches!(g.backward(a), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 2], 13));
    let w = g.param(random(&[2], 14));
    let xs = g.sum_squares(x).unwrap();
    let ws = g.sum(w).unwrap();
    g.backward(xs).unwrap();
    g.backward(ws).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
}

#[test]
fn grad_check_sum_of_squares() {
    let report = grad_check(
        |g, v| g.sum_squares(v[0]),
        &[t(&[3], &[1.0, 2.0, 3.0])],
        GradCheckOptions {
            tol: 1e-8,
            ..strict()
        },
    )
    .unwrap();
    assert!(report.passed);
    let analytic: Vec<f64> = report.checks.iter().map(|c| c.analytic).collect();
    assert_eq!(analytic, vec![2.0, 4.0, 6.0]);
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    // log-like blowup: 1/x at the probe coordinate
    let err = grad_check(
        |g, v| {
            let x = g.value(v[0]).data()[1];
            let w = [0.0, 1.0 / x];
            g.dot(v[0], &w)
        },
        &[t(&[2], &[1.0, 0.0])],
        strict(),
    )
    .unwrap_err();
    match err {
        Error::NonFinite { index, .. } => assert!(index <= 1),
        e => panic!("unexpected {e}"),
    }
    assert!(grad_check(
        |g, v| g.sum(v[0]),
        &[Tensor::zeros([1])],
        GradCheckOptions {
            step: 0.0,
            ..strict()
        }
    )
    .is_err());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3, 6, 6], 15));
        let k = g.constant(random(&[4, 3, 3, 3], 16));
        let b = g.constant(random(&[4], 17));
        let y = g.conv2d(x, k, b).unwrap();
        let r = g.relu(y).unwrap();
        g.value(r).data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn gndrp_equals_gap_when_tau_covers_cam(
        seed in any::<u64>(),
        extra in 0.0f64..2.0,
    ) {
        let x = random(&[2, 3, 4, 4], seed);
        let cam = random(&[2, 4, 4], seed ^ 0xA5);
        let tau = cam.max() + extra;
        let mut g = Graph::new();
        let v = g.constant(x);
        let gap = g.gap(v).unwrap();
        let nd = g.gndrp(v, &cam, tau).unwrap();
        prop_assert_eq!(g.value(gap).data(), g.value(nd.var).data());
        prop_assert!(nd.fallback.iter().all(|f| !f));
    }

    #[test]
    fn rib_gradient_is_minus_inverse_batch_or_zero(
        logits in proptest::collection::vec(-100.0f64..100.0, 1..12),
        margin in 1.0f64..80.0,
    ) {
        let n = logits.len();
        let labels = Tensor::full([n, 1], 1.0);
        let mut g = Graph::new();
        let y = g.param(Tensor::new([n, 1], logits.clone()).unwrap());
        let l = g.rib_loss(y, &labels, margin).unwrap();
        g.backward(l).unwrap();
        for (&z, &d) in logits.iter().zip(g.grad(y).unwrap()) {
            if z >= margin {
                prop_assert_eq!(d, 0.0);
            } else {
                prop_assert_eq!(d, -1.0 / n as f64);
            }
        }
    }

    #[test]
    fn bce_positive_gradient_decays_with_logit(a in -10.0f64..10.0, gap in 0.01f64..5.0) {
        let grad_at = |z: f64| {
            let mut g = Graph::new();
            let y = g.param(Tensor::new([1, 1], vec![z]).unwrap());
            let l = g.bce_loss(y, &Tensor::full([1, 1], 1.0), ProbKind::Sigmoid).unwrap();
            g.backward(l).unwrap();
            g.grad(y).unwrap()[0].abs()
        };
        prop_assert!(grad_at(a + gap) < grad_at(a));
    }
}

#[test]
fn bce_gradient_saturates_while_rib_does_not() {
    let grad = |z: f64, rib: bool| {
        let mut g = Graph::new();
        let y = g.param(Tensor::new([1, 1], vec![z]).unwrap());
        let labels = Tensor::full([1, 1], 1.0);
        let l = if rib {
            g.rib_loss(y, &labels, 600.0).unwrap()
        } else {
            g.bce_loss(y, &labels, ProbKind::Sigmoid).unwrap()
        };
        g.backward(l).unwrap();
        g.grad(y).unwrap()[0]
    };
    assert!(grad(25.0, false).abs() < 1e-6);
    for z in [-5.0, 0.0, 25.0, 300.0] {
        assert_eq!(grad(z, true), -1.0);
    }
}

#[test]
fn random_inputs_stay_finite_through_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn([1, 2, 5, 5], |_| {
        rng.random_range(-1.0..1.0)
    }));
    let k = g.param(random(&[2, 2, 3, 3], 1));
    let b = g.param(random(&[2], 2));
    let y = g.conv2d(x, k, b).unwrap();
    let a = g.activation(Activation::Tanh01, y).unwrap();
    let s = g.sum(a).unwrap();
    g.backward(s).unwrap();
    for v in [x, k, b] {
        assert!(g.grad(v).unwrap().iter().all(|v| v.is_finite()));
    }
}
