//! Minimal dense neural-network engine.
//!
//! Everything here is a pure function over value types: a [`Network`] is a
//! chain of [`DenseLayer`]s, [`forward`] returns logits together with the
//! activation record needed for backprop, and [`loss_and_grad`] produces
//! per-sample softmax cross-entropy losses and the gradient of their mean.
//!
//! MAC accounting is exact for dense layers: a layer with `in` inputs and
//! `out` outputs costs `rows * in * out` MACs on a batch of `rows` samples.
//! Backward passes are charged a fixed multiple of the forward MACs of the
//! layers that receive gradients (2x by default).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Backward-pass MAC cost as a multiple of the forward MACs.
pub const DEFAULT_BACKWARD_MAC_MULTIPLIER: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer {layer}: expected input width {expected}, got {actual}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{labels} labels for a batch of {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("gradient shape does not match network at layer {0}")]
    GradientShape(usize),
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("non-finite value produced in layer {0}")]
    NonFinite(usize),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NnError::BadShape {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the given rows (in order, duplicates allowed) into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = activation(x W + b)` with `W` stored as an `in x out` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Tensor2D,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor2D, bias: Vec<f64>, activation: Activation) -> Result<Self, NnError> {
        if bias.len() != weights.cols() {
            return Err(NnError::BadShape {
                rows: 1,
                cols: weights.cols(),
                len: bias.len(),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = 1.0 / (input.max(1) as f64).sqrt();
        let mut draw = || rng.random_range(-limit..=limit);
        let weights: Vec<f64> = (0..input * output).map(|_| draw()).collect();
        let bias: Vec<f64> = (0..output).map(|_| draw()).collect();
        Self {
            weights: Tensor2D {
                rows: input,
                cols: output,
                data: weights,
            },
            bias,
            activation,
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor2D {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor2D {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.data.len() + self.bias.len()
    }

    pub fn forward_macs(&self, rows: usize) -> u64 {
        (rows * self.input_dim() * self.output_dim()) as u64
    }

    /// Returns `(pre_activation, activation)` for a batch.
    fn apply(&self, x: &Tensor2D) -> (Tensor2D, Tensor2D) {
        let (n, k, m) = (x.rows(), self.input_dim(), self.output_dim());
        let mut z = Tensor2D::zeros(n, m);
        for r in 0..n {
            let xr = x.row(r);
            let zr = &mut z.data[r * m..(r + 1) * m];
            zr.copy_from_slice(&self.bias);
            for (i, &xi) in xr.iter().enumerate().take(k) {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &self.weights.data[i * m..(i + 1) * m];
                for (zj, &wij) in zr.iter_mut().zip(wrow) {
                    *zj += xi * wij;
                }
            }
        }
        let mut a = z.clone();
        if self.activation != Activation::Identity {
            for v in a.data.iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
        (z, a)
    }
}

/// Ordered chain of dense layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NnError::DimensionMismatch {
                    layer: i + 1,
                    expected: pair[1].input_dim(),
                    actual: pair[0].output_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds `input -> widths[0] -> ... -> widths[last]` with seeded uniform
    /// init. Every layer but the last uses `hidden`; the last uses `output`.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            let act = if i + 1 == widths.len() { output } else { hidden };
            layers.push(DenseLayer::init(prev, w, act, rng));
            prev = w;
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(DenseLayer::output_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Forward MACs for a batch of `rows`; depends on shapes only.
    pub fn forward_macs(&self, rows: usize) -> u64 {
        self.layers.iter().map(|l| l.forward_macs(rows)).sum()
    }

    /// `self` followed by `tail`.
    pub fn concat(&self, tail: &Network) -> Result<Network, NnError> {
        let mut layers = self.layers.clone();
        layers.extend(tail.layers.iter().cloned());
        Network::new(layers)
    }

    /// Splits into the first `n` layers and the rest.
    pub fn split_at(&self, n: usize) -> (Network, Network) {
        let (a, b) = self.layers.split_at(n.min(self.layers.len()));
        (
            Network { layers: a.to_vec() },
            Network { layers: b.to_vec() },
        )
    }

    /// All parameters, layer by layer, weights (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn same_shape(&self, other: &Network) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| {
                    a.input_dim() == b.input_dim()
                        && a.output_dim() == b.output_dim()
                        && a.activation == b.activation
                })
    }

    /// Index of the most probable class per row.
    pub fn predict(&self, x: &Tensor2D) -> Result<Vec<usize>, NnError> {
        let pass = forward(self, x)?;
        Ok((0..pass.logits.rows())
            .map(|r| argmax(pass.logits.row(r)))
            .collect())
    }

    /// Fraction of rows whose argmax prediction equals the label.
    pub fn accuracy(&self, x: &Tensor2D, y: &[usize]) -> Result<f64, NnError> {
        if y.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / y.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inputs and pre-activations of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor2D>,
    pre_activations: Vec<Tensor2D>,
}

impl ForwardCache {
    /// Input fed to layer `i` (the encoder output when `i` is the first
    /// classifier layer of a composed net).
    pub fn layer_input(&self, i: usize) -> &Tensor2D {
        &self.inputs[i]
    }

    pub fn pre_activation(&self, i: usize) -> &Tensor2D {
        &self.pre_activations[i]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor2D,
    pub cache: ForwardCache,
    pub macs: u64,
}

pub fn forward(net: &Network, x: &Tensor2D) -> Result<ForwardPass, NnError> {
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut cur = x.clone();
    let mut macs = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        if cur.cols() != layer.input_dim() {
            return Err(NnError::DimensionMismatch {
                layer: i,
                expected: layer.input_dim(),
                actual: cur.cols(),
            });
        }
        macs += layer.forward_macs(cur.rows());
        let (z, a) = layer.apply(&cur);
        if !a.is_finite() {
            return Err(NnError::NonFinite(i));
        }
        inputs.push(cur);
        pre.push(z);
        cur = a;
    }
    Ok(ForwardPass {
        logits: cur,
        cache: ForwardCache {
            inputs,
            pre_activations: pre,
        },
        macs,
    })
}

/// Per-sample softmax cross-entropy and `d(mean loss)/d(logits)`.
pub fn softmax_cross_entropy(
    logits: &Tensor2D,
    y: &[usize],
) -> Result<(Vec<f64>, Tensor2D), NnError> {
    let (n, z) = (logits.rows(), logits.cols());
    if y.len() != n {
        return Err(NnError::LabelCount {
            labels: y.len(),
            rows: n,
        });
    }
    let mut losses = Vec::with_capacity(n);
    let mut grad = Tensor2D::zeros(n, z);
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    for (r, &label) in y.iter().enumerate() {
        if label >= z {
            return Err(NnError::LabelOutOfRange {
                row: r,
                label,
                classes: z,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        // ln(sum) >= 0 because the max term contributes exp(0) = 1.
        losses.push((log_sum - row[label]).max(0.0));
        for c in 0..z {
            let p = (row[c] - log_sum).exp();
            let t = if c == label { 1.0 } else { 0.0 };
            grad.set(r, c, (p - t) * scale);
        }
    }
    Ok((losses, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Tensor2D,
    pub bias: Vec<f64>,
}

/// Gradients of the mean batch loss, one entry per layer of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn layers(&self) -> &[LayerGrad] {
        &self.layers
    }

    pub fn last(&self) -> Option<&LayerGrad> {
        self.layers.last()
    }

    /// Rebuilds from raw parts; used by tests and oracles.
    pub fn from_layers(layers: Vec<LayerGrad>) -> Self {
        Self { layers }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub losses: Vec<f64>,
    pub grads: GradientSet,
    /// Per-sample L2 norm of the last layer's weight gradient.
    pub last_layer_norms: Vec<f64>,
    pub forward_macs: u64,
    pub backward_macs: u64,
}

impl LossGrad {
    pub fn macs(&self) -> u64 {
        self.forward_macs + self.backward_macs
    }

    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            0.0
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }
}

pub fn loss_and_grad(net: &Network, x: &Tensor2D, y: &[usize]) -> Result<LossGrad, NnError> {
    loss_and_grad_with(net, x, y, DEFAULT_BACKWARD_MAC_MULTIPLIER)
}

/// Forward, softmax cross-entropy and backprop through every layer of `net`.
pub fn loss_and_grad_with(
    net: &Network,
    x: &Tensor2D,
    y: &[usize],
    backward_multiplier: u64,
) -> Result<LossGrad, NnError> {
    if net.is_empty() {
        return Err(NnError::EmptyNetwork);
    }
    if y.len() != x.rows() {
        return Err(NnError::LabelCount {
            labels: y.len(),
            rows: x.rows(),
        });
    }
    let pass = forward(net, x)?;
    let (losses, dlogits) = softmax_cross_entropy(&pass.logits, y)?;
    let n = x.rows();

    let mut grads: Vec<LayerGrad> = Vec::with_capacity(net.layers.len());
    let mut upstream = dlogits;
    let mut last_layer_norms = Vec::new();
    for (li, layer) in net.layers.iter().enumerate().rev() {
        let (k, m) = (layer.input_dim(), layer.output_dim());
        let z = &pass.cache.pre_activations[li];
        let a_in = &pass.cache.inputs[li];
        let mut dz = upstream;
        if layer.activation != Activation::Identity {
            for (d, &zv) in dz.data.iter_mut().zip(&z.data) {
                *d *= layer.activation.derivative(zv);
            }
        }
        if li + 1 == net.layers.len() {
            // Per-sample weight gradient is the outer product a_i^T dz_i
            // (dz carries a 1/n factor from the mean).
            let scale = n as f64;
            last_layer_norms = (0..n)
                .map(|r| {
                    let an: f64 = a_in.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dn: f64 = dz.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    an * dn * scale
                })
                .collect();
        }
        let mut dw = Tensor2D::zeros(k, m);
        let mut db = vec![0.0; m];
        for r in 0..n {
            let ar = a_in.row(r);
            let dr = dz.row(r);
            for (j, &d) in dr.iter().enumerate() {
                db[j] += d;
            }
            for (i, &ai) in ar.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dwrow = &mut dw.data[i * m..(i + 1) * m];
                for (g, &d) in dwrow.iter_mut().zip(dr) {
                    *g += ai * d;
                }
            }
        }
        if li > 0 {
            let mut da = Tensor2D::zeros(n, k);
            for r in 0..n {
                let dr = dz.row(r);
                for i in 0..k {
                    let wrow = &layer.weights.data[i * m..(i + 1) * m];
                    da.data[r * k + i] = wrow.iter().zip(dr).map(|(w, d)| w * d).sum();
                }
            }
            upstream = da;
        } else {
            upstream = Tensor2D::zeros(0, 0);
        }
        if !dw.is_finite() || db.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(li));
        }
        grads.push(LayerGrad {
            weights: dw,
            bias: db,
        });
    }
    grads.reverse();
    Ok(LossGrad {
        losses,
        grads: GradientSet { layers: grads },
        last_layer_norms,
        forward_macs: pass.macs,
        backward_macs: backward_multiplier * pass.macs,
    })
}

fn check_congruent(net: &Network, grads: &GradientSet) -> Result<(), NnError> {
    if grads.layers.len() != net.layers.len() {
        return Err(NnError::GradientShape(grads.layers.len().min(net.layers.len())));
    }
    for (i, (l, g)) in net.layers.iter().zip(&grads.layers).enumerate() {
        if l.weights.rows() != g.weights.rows()
            || l.weights.cols() != g.weights.cols()
            || l.bias.len() != g.bias.len()
        {
            return Err(NnError::GradientShape(i));
        }
    }
    Ok(())
}

/// Returns `net` with `w <- w - lr * g` applied to every parameter.
pub fn sgd_step(net: &Network, grads: &GradientSet, lr: f64) -> Result<Network, NnError> {
    let mut out = net.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(net: &mut Network, grads: &GradientSet, lr: f64) -> Result<(), NnError> {
    check_congruent(net, grads)?;
    for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in l.weights.data.iter_mut().zip(&g.weights.data) {
            *w -= lr * d;
        }
        for (b, d) in l.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }
    Ok(())
}

/// L2 norm over the last layer's weight-gradient entries.
pub fn last_layer_grad_norm(grads: &GradientSet) -> f64 {
    grads
        .last()
        .map(|g| g.weights.data.iter().map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(0.0)
}
