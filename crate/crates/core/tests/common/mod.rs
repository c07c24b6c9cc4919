//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::Rng;
use tierfl::nn::{forward, Activation, Network, Tensor2D};
use tierfl::partition::{ClassifierCandidate, MemoryBudget, SelectionPolicy};

/// Mean softmax cross-entropy computed from scratch with log-sum-exp.
pub fn mean_ce(logits: &Tensor2D, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &label) in y.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / y.len() as f64
}

pub fn loss_of(net: &Network, x: &Tensor2D, y: &[usize]) -> f64 {
    mean_ce(&forward(net, x).unwrap().logits, y)
}

/// Random dense net: 1..=3 layers, widths in 1..=16, ReLU hidden, linear out.
pub fn random_net<R: Rng>(rng: &mut R) -> (Network, usize) {
    let depth = rng.random_range(1..=3);
    let input = rng.random_range(1..=16);
    let mut widths: Vec<usize> = (0..depth - 1).map(|_| rng.random_range(1..=16)).collect();
    widths.push(rng.random_range(2..=16));
    let net = Network::init(input, &widths, Activation::Relu, Activation::Identity, rng);
    (net, input)
}

/// Smallest |pre-activation| of any ReLU unit.
pub fn min_hidden_margin(net: &Network, x: &Tensor2D) -> f64 {
    let pass = forward(net, x).unwrap();
    let hidden = net.layers().len() - 1;
    (0..hidden)
        .flat_map(|i| pass.cache.pre_activation(i).data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Central-difference gradient of the mean loss for every parameter, in
/// layer order (weights then bias).
pub fn numeric_grad(net: &Network, x: &Tensor2D, y: &[usize], h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut probe = net.clone();
    for li in 0..net.layers().len() {
        let nw = net.layers()[li].weights().data().len();
        for j in 0..nw {
            let orig = probe.layers()[li].weights().data()[j];
            probe.layers_mut()[li].weights_mut().data_mut()[j] = orig + h;
            let up = loss_of(&probe, x, y);
            probe.layers_mut()[li].weights_mut().data_mut()[j] = orig - h;
            let down = loss_of(&probe, x, y);
            probe.layers_mut()[li].weights_mut().data_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
        for j in 0..net.layers()[li].bias().len() {
            let orig = probe.layers()[li].bias()[j];
            probe.layers_mut()[li].bias_mut()[j] = orig + h;
            let up = loss_of(&probe, x, y);
            probe.layers_mut()[li].bias_mut()[j] = orig - h;
            let down = loss_of(&probe, x, y);
            probe.layers_mut()[li].bias_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error between backprop and central differences over one
/// random net with kink-free inputs.
pub fn gradient_trial<R: Rng>(rng: &mut R) -> f64 {
    let (net, input) = random_net(rng);
    let classes = net.output_dim().unwrap();
    let rows = rng.random_range(1..=6);
    let (x, y) = loop {
        let data: Vec<f64> = (0..rows * input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor2D::from_vec(rows, input, data).unwrap();
        if net.layers().len() == 1 || min_hidden_margin(&net, &x) > 1e-3 {
            let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            break (x, y);
        }
    };
    let analytic: Vec<f64> = tierfl::nn::loss_and_grad(&net, &x, &y)
        .unwrap()
        .grads
        .layers()
        .iter()
        .flat_map(|g| g.weights.data().iter().chain(g.bias.iter()).copied().collect::<Vec<_>>())
        .collect();
    let numeric = numeric_grad(&net, &x, &y, 1e-5);
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Exhaustive-filter oracle for classifier selection: index of the winner,
/// `None` when nothing fits.
pub fn brute_select(
    cands: &[ClassifierCandidate],
    input: usize,
    budget: &MemoryBudget,
    policy: SelectionPolicy,
) -> Option<usize> {
    let feasible: Vec<(usize, u128)> = cands
        .iter()
        .enumerate()
        .map(|(i, c)| (i, brute_param_count(c, input) as u128))
        .filter(|(_, p)| p * budget.bytes_per_param as u128 <= budget.available_bytes as u128 - 1)
        .collect();
    let target = match policy {
        SelectionPolicy::SmallestFeasible => feasible.iter().map(|f| f.1).min()?,
        SelectionPolicy::LargestFeasible => feasible.iter().map(|f| f.1).max()?,
    };
    feasible.iter().find(|f| f.1 == target).map(|f| f.0)
}

/// Parameter count by walking the layer widths directly.
pub fn brute_param_count(c: &ClassifierCandidate, input: usize) -> usize {
    let mut dims = vec![input];
    dims.extend(&c.hidden_widths);
    dims.push(c.output_classes);
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Elementwise mean of the flattened parameter vectors.
pub fn flatten_average(models: &[Network]) -> Vec<f64> {
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten()).collect();
    let n = flats[0].len();
    (0..n)
        .map(|j| flats.iter().map(|f| f[j]).sum::<f64>() / flats.len() as f64)
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Class-histogram Shannon entropy (nats).
pub fn entropy(hist: &[usize]) -> f64 {
    let n: usize = hist.iter().sum();
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// A few clients and rounds on a small blobs task; seconds to run.
pub fn small_config() -> tierfl::config::ExperimentConfig {
    let mut cfg = tierfl::config::ExperimentConfig::default();
    cfg.data.per_class = 40;
    cfg.data.test_per_class = 20;
    cfg.federation.num_clients = 6;
    cfg.federation.rounds = 4;
    cfg
}
