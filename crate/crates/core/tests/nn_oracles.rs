mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tierfl::nn::{
    forward, loss_and_grad, loss_and_grad_with, sgd_step, softmax_cross_entropy, Activation,
    Network, Tensor2D,
};

#[test]
fn backprop_matches_central_differences_on_random_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = (0..100).map(|_| common::gradient_trial(&mut rng)).fold(0.0, f64::max);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn single_layer_softmax_gradient_on_one_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::init(5, &[3], Activation::Identity, Activation::Identity, &mut rng);
    let x = Tensor2D::from_rows(&[vec![0.3, -1.2, 0.7, 0.05, 2.0]]).unwrap();
    let y = [2];
    let analytic: Vec<f64> = loss_and_grad(&net, &x, &y)
        .unwrap()
        .grads
        .layers()
        .iter()
        .flat_map(|g| g.weights.data().iter().chain(&g.bias).copied().collect::<Vec<_>>())
        .collect();
    let numeric = common::numeric_grad(&net, &x, &y, 1e-5);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(common::rel_err(*a, *n) < 1e-4, "{a} vs {n}");
    }
}

#[test]
fn last_layer_norms_match_flattened_per_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Network::init(6, &[8, 4], Activation::Relu, Activation::Identity, &mut rng);
    let rows: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let x = Tensor2D::from_rows(&rows).unwrap();
    let y: Vec<usize> = (0..7).map(|i| i % 4).collect();
    let batch = loss_and_grad(&net, &x, &y).unwrap();
    for r in 0..7 {
        let single = loss_and_grad(&net, &x.select_rows(&[r]), &y[r..=r]).unwrap();
        let mut acc = 0.0;
        for v in single.grads.last().unwrap().weights.data() {
            acc += v * v;
        }
        let brute = acc.sqrt();
        assert!(
            (batch.last_layer_norms[r] - brute).abs() <= 1e-12 * brute.max(1.0),
            "row {r}: {} vs {brute}",
            batch.last_layer_norms[r]
        );
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_classes() {
    for z in [2usize, 3, 10, 47] {
        let logits = Tensor2D::zeros(4, z);
        let (losses, _) = softmax_cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
        for l in losses {
            assert!((l - (z as f64).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn separable_two_class_data_is_learned_in_200_steps() {
    let data = tierfl::datagen::make_blobs(2, 50, 2, 0.05, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Network::init(2, &[2], Activation::Identity, Activation::Identity, &mut rng);
    for _ in 0..200 {
        let g = loss_and_grad(&net, &data.features, &data.labels).unwrap();
        net = sgd_step(&net, &g.grads, 0.5).unwrap();
    }
    assert_eq!(net.accuracy(&data.features, &data.labels).unwrap(), 1.0);
}

fn dims() -> impl Strategy<Value = (usize, Vec<usize>, usize)> {
    (1usize..12, prop::collection::vec(1usize..12, 1..4), 1usize..9)
}

proptest! {
    #[test]
    fn forward_macs_depend_only_on_shapes((input, widths, rows) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::init(input, &widths, Activation::Relu, Activation::Identity, &mut rng);
        let a = Tensor2D::from_vec(rows, input, (0..rows * input).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let b = Tensor2D::zeros(rows, input);
        let mut dims = vec![input];
        dims.extend(&widths);
        let expected: u64 = dims.windows(2).map(|w| (rows * w[0] * w[1]) as u64).sum();
        prop_assert_eq!(forward(&net, &a).unwrap().macs, expected);
        prop_assert_eq!(forward(&net, &b).unwrap().macs, expected);
        prop_assert_eq!(net.forward_macs(rows), expected);
    }

    #[test]
    fn backward_macs_scale_with_forward((input, widths, rows) in dims(), mult in 1u64..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = widths.clone();
        let last = w.len() - 1;
        w[last] = w[last].max(2);
        let net = Network::init(input, &w, Activation::Relu, Activation::Identity, &mut rng);
        let x = Tensor2D::zeros(rows, input);
        let y = vec![0; rows];
        let g = loss_and_grad(&net, &x, &y).unwrap();
        prop_assert_eq!(g.backward_macs, 2 * g.forward_macs);
        let g = loss_and_grad_with(&net, &x, &y, mult).unwrap();
        prop_assert_eq!(g.backward_macs, mult * g.forward_macs);
    }

    #[test]
    fn cross_entropy_is_non_negative(vals in prop::collection::vec(-30.0f64..30.0, 12), label in 0usize..4) {
        let logits = Tensor2D::from_vec(3, 4, vals).unwrap();
        let (losses, _) = softmax_cross_entropy(&logits, &[label, 0, 3]).unwrap();
        prop_assert!(losses.iter().all(|l| *l >= 0.0 && l.is_finite()));
    }
}
