//! On-device data selection.
//!
//! Each UCD keeps two fixed-capacity FIFO queues, one of recent loss values
//! and one of recent last-layer gradient norms. The empirical CDF of a queue
//! turns a fresh value into a rank in `[0, 1]`, and that rank drives the
//! routing probabilities:
//!
//! - discard: `1 - cdf_loss(l)^alpha`
//! - transmit on loss: `cdf_loss(l)^beta`
//! - transmit on gradient norm: `cdf_grad(g)^gamma`
//!
//! Routing is sequential per sample. The discard test is drawn first; only
//! survivors draw the loss-based transmit test, and everything else lands in
//! the classifier set. Gradient-norm selection runs afterwards over the
//! classifier set and copies (not moves) winners into the transmit set.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1000;
pub const DEFAULT_WARMUP_MIN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectorError {
    #[error("cold start: queue holds {len} values, need at least {needed}")]
    ColdStart { len: usize, needed: usize },
    #[error("selection parameter {name} must be finite and >= 0, got {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("queue capacity must be > 0")]
    ZeroCapacity,
    #[error("{values} values given for {indices} indices")]
    LengthMismatch { values: usize, indices: usize },
}

/// Fixed-capacity FIFO with an empirical CDF. A sorted mirror of the queue
/// answers `cdf` queries by binary search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingCdf {
    queue: VecDeque<f64>,
    sorted: Vec<f64>,
    capacity: usize,
}

impl SlidingCdf {
    pub fn new(capacity: usize) -> Result<Self, SelectorError> {
        if capacity == 0 {
            return Err(SelectorError::ZeroCapacity);
        }
        Ok(Self {
            queue: VecDeque::with_capacity(capacity),
            sorted: Vec::with_capacity(capacity),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.queue.iter().copied()
    }

    /// Appends `v`, evicting the oldest value when full. Non-finite values are ignored.
    pub fn push(&mut self, v: f64) {
        if !v.is_finite() {
            return;
        }
        if self.queue.len() == self.capacity {
            if let Some(old) = self.queue.pop_front() {
                let pos = self.sorted.partition_point(|&x| x < old);
                self.sorted.remove(pos);
            }
        }
        self.queue.push_back(v);
        let pos = self.sorted.partition_point(|&x| x <= v);
        self.sorted.insert(pos, v);
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, values: I) {
        for v in values {
            self.push(v);
        }
    }

    /// Fraction of queued values `<= v`.
    pub fn cdf(&self, v: f64) -> Result<f64, SelectorError> {
        if self.sorted.is_empty() {
            return Err(SelectorError::ColdStart { len: 0, needed: 1 });
        }
        let count = self.sorted.partition_point(|&x| x <= v);
        Ok(count as f64 / self.sorted.len() as f64)
    }

    fn warm(&self, warmup_min: usize) -> bool {
        !self.queue.is_empty() && self.queue.len() >= warmup_min
    }
}

/// `alpha`/`beta` shape the loss-based routes, `gamma` the gradient route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub warmup_min: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 3.0,
            gamma: 0.0,
            warmup_min: DEFAULT_WARMUP_MIN,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<(), SelectorError> {
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !value.is_finite() || value < 0.0 {
                return Err(SelectorError::InvalidParam { name, value });
            }
        }
        Ok(())
    }
}

#[inline]
pub fn discard_probability(cdf: f64, alpha: f64) -> f64 {
    (1.0 - cdf.clamp(0.0, 1.0).powf(alpha)).clamp(0.0, 1.0)
}

#[inline]
pub fn transmit_probability(cdf: f64, exponent: f64) -> f64 {
    cdf.clamp(0.0, 1.0).powf(exponent).clamp(0.0, 1.0)
}

/// Per-client queue pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub loss_cdf: SlidingCdf,
    pub grad_cdf: SlidingCdf,
}

impl SelectionState {
    pub fn new(capacity: usize) -> Result<Self, SelectorError> {
        Ok(Self {
            loss_cdf: SlidingCdf::new(capacity)?,
            grad_cdf: SlidingCdf::new(capacity)?,
        })
    }

    pub fn queued_values(&self) -> usize {
        self.loss_cdf.len() + self.grad_cdf.len()
    }
}

/// Batch positions per route: `discard` (D_N), `classifier` (D_C), and the
/// transmit set D_M split by which rule selected the sample.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutedBatch {
    pub discard: Vec<usize>,
    pub classifier: Vec<usize>,
    pub transmit_by_loss: Vec<usize>,
    pub transmit_by_grad: Vec<usize>,
    /// True when the loss queue was below warmup and everything went to D_C.
    pub cold_start: bool,
}

impl RoutedBatch {
    /// D_M: loss-selected then gradient-selected positions.
    pub fn transmit(&self) -> Vec<usize> {
        let mut t = self.transmit_by_loss.clone();
        t.extend_from_slice(&self.transmit_by_grad);
        t
    }

    /// Checks the route invariants for a batch of `len` samples.
    pub fn check(&self, len: usize) -> Result<(), String> {
        let mut seen = vec![0u8; len];
        for (name, set) in [
            ("discard", &self.discard),
            ("classifier", &self.classifier),
            ("transmit_by_loss", &self.transmit_by_loss),
        ] {
            for &i in set.iter() {
                if i >= len {
                    return Err(format!("{name} index {i} out of range {len}"));
                }
                seen[i] += 1;
            }
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(format!("position {i} routed {} times", seen[i]));
        }
        for i in &self.transmit_by_grad {
            if !self.classifier.contains(i) {
                return Err(format!("gradient-selected {i} is not in the classifier set"));
            }
        }
        Ok(())
    }
}

/// Loss-based routing of one batch. All losses are enqueued after routing,
/// including on the cold-start path.
pub fn route_by_loss<R: Rng + ?Sized>(
    losses: &[f64],
    cdf: &mut SlidingCdf,
    params: &SelectionParams,
    rng: &mut R,
) -> RoutedBatch {
    let mut out = RoutedBatch::default();
    if !cdf.warm(params.warmup_min) {
        out.cold_start = true;
        out.classifier = (0..losses.len()).collect();
    } else {
        for (i, &l) in losses.iter().enumerate() {
            let c = cdf.cdf(l).unwrap_or(0.0);
            if rng.random::<f64>() < discard_probability(c, params.alpha) {
                out.discard.push(i);
            } else if rng.random::<f64>() < transmit_probability(c, params.beta) {
                out.transmit_by_loss.push(i);
            } else {
                out.classifier.push(i);
            }
        }
    }
    cdf.extend(losses.iter().copied());
    out
}

/// Gradient-norm routing over the classifier set. `indices[i]` is the batch
/// position whose norm is `norms[i]`; returns the positions copied into D_M.
pub fn route_by_grad<R: Rng + ?Sized>(
    indices: &[usize],
    norms: &[f64],
    cdf: &mut SlidingCdf,
    params: &SelectionParams,
    rng: &mut R,
) -> Result<Vec<usize>, SelectorError> {
    if indices.len() != norms.len() {
        return Err(SelectorError::LengthMismatch {
            values: norms.len(),
            indices: indices.len(),
        });
    }
    let mut picked = Vec::new();
    if cdf.warm(params.warmup_min) {
        for (&i, &g) in indices.iter().zip(norms) {
            let c = cdf.cdf(g).unwrap_or(0.0);
            if rng.random::<f64>() < transmit_probability(c, params.gamma) {
                picked.push(i);
            }
        }
    }
    cdf.extend(norms.iter().copied());
    Ok(picked)
}
