#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_affine_passes_input_through() {
    let net =
        Network::from_layers(vec![Layer::Affine { weight: Tensor2::identity(3), bias: Some(vec![0.0; 3]) }]).unwrap();
    let x = Tensor2::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
    let (y, _) = net.forward(&x, Mode::Train).unwrap();
    assert_eq!(y, x);
}

#[test]
fn rectifier_definition() {
    let net = Network::from_layers(vec![Layer::Activation { dim: 2, kind: ActivationKind::Rectifier }]).unwrap();
    let x = Tensor2::from_rows(&[vec![-1.0, 2.0]]).unwrap();
    assert_eq!(net.predict(&x).unwrap().data(), &[0.0, 2.0]);
}

#[test]
fn two_layer_forward_matches_hand_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = Network::new(&mlp_specs(&[3, 4, 2]), &mut rng).unwrap();
    if let Layer::Affine { bias: Some(b), .. } = &mut net.layers[0] {
        b.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.15);
    }
    let x = random_tensor(&mut rng, 5, 3);
    let y = net.predict(&x).unwrap();

    let (w1, b1) = match &net.layers[0] {
        Layer::Affine { weight, bias } => (weight.clone(), bias.clone().unwrap()),
        _ => unreachable!(),
    };
    let (w2, b2) = match &net.layers[2] {
        Layer::Affine { weight, bias } => (weight.clone(), bias.clone().unwrap()),
        _ => unreachable!(),
    };
    for r in 0..5 {
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut s = b1[i];
            for k in 0..3 {
                s += w1.get(i, k) * x.get(r, k);
            }
            h[i] = if s > 0.0 { s } else { 0.0 };
        }
        for o in 0..2 {
            let mut s = b2[o];
            for i in 0..4 {
                s += w2.get(o, i) * h[i];
            }
            assert!((y.get(r, o) - s).abs() < 1e-14);
        }
    }
}

#[test]
fn affine_weight_gradient_is_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Network::new(&[LayerSpec::Affine { in_dim: 3, out_dim: 2, bias: false }], &mut rng).unwrap();
    let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let g = Tensor2::from_rows(&[vec![0.5, -1.0]]).unwrap();
    let (_, cache) = net.forward(&x, Mode::Train).unwrap();
    let (_, grads) = net.backward(&cache, &g).unwrap();
    assert_eq!(grads, vec![0.5, 1.0, 1.5, -1.0, -2.0, -3.0]);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let specs = [
        LayerSpec::Affine { in_dim: 4, out_dim: 5, bias: true },
        LayerSpec::Batchnorm { dim: 5 },
        LayerSpec::Activation { dim: 5, kind: ActivationKind::Rectifier },
        LayerSpec::Affine { in_dim: 5, out_dim: 2, bias: true },
    ];
    let net = Network::new(&specs, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 6, 4);
    let (_, cache) = net.forward(&x, Mode::Train).unwrap();
    let (dx, grads) = net.backward(&cache, &Tensor2::zeros(6, 2)).unwrap();
    assert!(grads.iter().all(|&g| g == 0.0));
    assert!(dx.data().iter().all(|&g| g == 0.0));
}

/// Scalar loss `Σ c ⊙ net(x)` with fixed random `c`, so the upstream gradient is `c`.
fn linear_probe_check(net: &Network, x: &Tensor2, c: &Tensor2, mode: Mode) -> f64 {
    let (y, cache) = net.forward(x, mode).unwrap();
    assert_eq!(y.shape(), c.shape());
    let (_, grads) = net.backward(&cache, c).unwrap();
    let mut params = Vec::new();
    net.write_params(&mut params);
    let mut probe = net.clone();
    finite_difference_check(
        |theta| {
            probe.read_params(theta).unwrap();
            let (y, _) = probe.forward(x, mode).unwrap();
            y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        },
        &params,
        &grads,
        1e-6,
    )
}

#[test]
fn backward_matches_finite_differences_over_seeds() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let specs = [
            LayerSpec::Affine { in_dim: 4, out_dim: 6, bias: false },
            LayerSpec::Batchnorm { dim: 6 },
            LayerSpec::Activation { dim: 6, kind: ActivationKind::Rectifier },
            LayerSpec::Affine { in_dim: 6, out_dim: 3, bias: true },
        ];
        let mut net = Network::new(&specs, &mut rng).unwrap();
        if let Layer::Batchnorm { gamma, beta, running_mean, running_var } = &mut net.layers[1] {
            gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            running_mean.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            running_var.iter_mut().for_each(|b| *b = rng.random_range(0.5..1.5));
        }
        let x = random_tensor(&mut rng, 7, 4);
        let c = random_tensor(&mut rng, 7, 3);
        let err = linear_probe_check(&net, &x, &c, Mode::Train);
        assert!(err <= 1e-4, "seed {seed}: train-mode rel err {err}");
        let err = linear_probe_check(&net, &x, &c, Mode::Eval);
        assert!(err <= 1e-4, "seed {seed}: eval-mode rel err {err}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let specs = [
        LayerSpec::Affine { in_dim: 3, out_dim: 5, bias: true },
        LayerSpec::Batchnorm { dim: 5 },
        LayerSpec::Activation { dim: 5, kind: ActivationKind::Rectifier },
        LayerSpec::Affine { in_dim: 5, out_dim: 2, bias: true },
    ];
    let net = Network::new(&specs, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 4, 3);
    let c = random_tensor(&mut rng, 4, 2);
    let (_, cache) = net.forward(&x, Mode::Train).unwrap();
    let (dx, _) = net.backward(&cache, &c).unwrap();
    let err = finite_difference_check(
        |v| {
            let xt = Tensor2::from_vec(4, 3, v.to_vec()).unwrap();
            let y = net.forward(&xt, Mode::Train).unwrap().0;
            y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        },
        x.data(),
        dx.data(),
        1e-6,
    );
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn eval_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let specs = [
        LayerSpec::Affine { in_dim: 3, out_dim: 4, bias: true },
        LayerSpec::Batchnorm { dim: 4 },
        LayerSpec::Activation { dim: 4, kind: ActivationKind::Rectifier },
    ];
    let net = Network::new(&specs, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 1, 3);
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn train_mode_batchnorm_needs_two_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Network::new(&[LayerSpec::Batchnorm { dim: 2 }], &mut rng).unwrap();
    let x = Tensor2::zeros(1, 2);
    assert!(matches!(net.forward(&x, Mode::Train), Err(Error::DegenerateBatch(1))));
    assert!(net.forward(&x, Mode::Eval).is_ok());
}

#[test]
fn dimension_mismatch_is_shape_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Network::new(&mlp_specs(&[3, 2]), &mut rng).unwrap();
    assert!(matches!(net.forward(&Tensor2::zeros(2, 4), Mode::Eval), Err(Error::Shape(_))));
    let (_, cache) = net.forward(&Tensor2::zeros(2, 3), Mode::Train).unwrap();
    assert!(matches!(net.backward(&cache, &Tensor2::zeros(2, 3)), Err(Error::Shape(_))));
    assert!(Network::new(
        &[LayerSpec::Affine { in_dim: 2, out_dim: 3, bias: true }, LayerSpec::Batchnorm { dim: 4 }],
        &mut rng
    )
    .is_err());
}

#[test]
fn running_stats_follow_ema() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::new(&[LayerSpec::Batchnorm { dim: 1 }], &mut rng).unwrap();
    let x = Tensor2::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
    let (_, cache) = net.forward(&x, Mode::Train).unwrap();
    net.update_running_stats(&cache);
    let mut buf = Vec::new();
    net.write_buffers(&mut buf);
    // mean 2, unbiased var 2
    assert!((buf[0] - 0.2).abs() < 1e-15);
    assert!((buf[1] - (0.9 + 0.2)).abs() < 1e-15);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = random_tensor(&mut rng, 3, 4);
    let labels = [2usize, 0, 3];
    let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    // direct evaluation without the log-sum-exp shift
    let mut direct = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
        direct -= (logits.get(r, y).exp() / z).ln();
    }
    assert!((loss - direct / 3.0).abs() < 1e-14);
    let err = finite_difference_check(
        |v| softmax_cross_entropy(&Tensor2::from_vec(3, 4, v.to_vec()).unwrap(), &labels).unwrap().0,
        logits.data(),
        grad.data(),
        1e-6,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p = random_tensor(&mut rng, 4, 5);
    let q = random_tensor(&mut rng, 4, 5);
    let (_, grad) = softmax_kl(&p, &q).unwrap();
    let err = finite_difference_check(
        |v| softmax_kl(&p, &Tensor2::from_vec(4, 5, v.to_vec()).unwrap()).unwrap().0,
        q.data(),
        grad.data(),
        1e-6,
    );
    assert!(err < 1e-5, "{err}");
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn losses_nonnegative_and_finite(
            vals in proptest::collection::vec(-1e3f64..1e3, 12),
            other in proptest::collection::vec(-1e3f64..1e3, 12),
            label in 0usize..4,
        ) {
            let a = Tensor2::from_vec(3, 4, vals).unwrap();
            let b = Tensor2::from_vec(3, 4, other).unwrap();
            let (ce, g) = softmax_cross_entropy(&a, &[label, 0, 3]).unwrap();
            prop_assert!(ce >= 0.0 && ce.is_finite());
            prop_assert!(g.is_finite());
            let (kl, g) = softmax_kl(&a, &b).unwrap();
            prop_assert!(kl >= 0.0 && kl.is_finite());
            prop_assert!(g.is_finite());
        }
    }
}
