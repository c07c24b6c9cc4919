//! Encoder/classifier split and memory-budgeted classifier selection.
//!
//! A classifier candidate is feasible when `params * bytes_per_param` is
//! strictly below the device's available memory. Only parameter memory is
//! counted; activation memory is not modelled.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{forward, Activation, Network, NnError, Tensor2D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("budget infeasible: no classifier candidate fits in {available_bytes} bytes at {bytes_per_param} bytes/param (smallest needs {smallest_bytes} bytes)")]
    BudgetInfeasible {
        available_bytes: u64,
        bytes_per_param: u64,
        smallest_bytes: u64,
    },
    #[error("no classifier candidates given")]
    NoCandidates,
    #[error("invalid memory budget: {0}")]
    InvalidBudget(&'static str),
    #[error("invalid classifier candidate: {0}")]
    InvalidCandidate(String),
    #[error("encoder output width {encoder} does not match classifier input width {classifier}")]
    WidthMismatch { encoder: usize, classifier: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Exact number of weight and bias entries.
pub fn count_params(net: &Network) -> usize {
    net.param_count()
}

/// Fully connected head: zero or more ReLU hidden layers, then `output_classes` logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierCandidate {
    pub hidden_widths: Vec<usize>,
    pub output_classes: usize,
}

impl ClassifierCandidate {
    pub fn new(hidden_widths: Vec<usize>, output_classes: usize) -> Result<Self, PartitionError> {
        let c = Self {
            hidden_widths,
            output_classes,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.output_classes == 0 || self.hidden_widths.contains(&0) {
            return Err(PartitionError::InvalidCandidate(format!(
                "widths must be > 0 (hidden {:?}, classes {})",
                self.hidden_widths, self.output_classes
            )));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = self.hidden_widths.clone();
        w.push(self.output_classes);
        w
    }

    /// Parameter count when stacked on an encoder with `input_dim` outputs.
    pub fn param_count(&self, input_dim: usize) -> usize {
        let mut prev = input_dim;
        let mut total = 0;
        for w in self.widths() {
            total += prev * w + w;
            prev = w;
        }
        total
    }

    pub fn build<R: Rng + ?Sized>(&self, input_dim: usize, rng: &mut R) -> Network {
        Network::init(
            input_dim,
            &self.widths(),
            Activation::Relu,
            Activation::Identity,
            rng,
        )
    }
}

/// The small / medium / large heads: no hidden layer, one hidden layer of 64,
/// one hidden layer of 128.
pub fn standard_candidates(classes: usize) -> Vec<ClassifierCandidate> {
    vec![
        ClassifierCandidate {
            hidden_widths: vec![],
            output_classes: classes,
        },
        ClassifierCandidate {
            hidden_widths: vec![64],
            output_classes: classes,
        },
        ClassifierCandidate {
            hidden_widths: vec![128],
            output_classes: classes,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub available_bytes: u64,
    pub bytes_per_param: u64,
}

impl MemoryBudget {
    pub fn new(available_bytes: u64, bytes_per_param: u64) -> Result<Self, PartitionError> {
        let b = Self {
            available_bytes,
            bytes_per_param,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.available_bytes == 0 {
            return Err(PartitionError::InvalidBudget("available_bytes must be > 0"));
        }
        if self.bytes_per_param == 0 {
            return Err(PartitionError::InvalidBudget("bytes_per_param must be > 0"));
        }
        Ok(())
    }

    /// Strict inequality: `params * bytes_per_param < available_bytes`.
    pub fn fits(&self, params: usize) -> bool {
        (params as u128) * (self.bytes_per_param as u128) < self.available_bytes as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    SmallestFeasible,
    #[default]
    LargestFeasible,
}

/// Picks the feasible candidate preferred by `policy`. Ties on parameter
/// count resolve to the earliest candidate in the list.
pub fn select_classifier(
    candidates: &[ClassifierCandidate],
    input_dim: usize,
    budget: &MemoryBudget,
    policy: SelectionPolicy,
) -> Result<ClassifierCandidate, PartitionError> {
    budget.validate()?;
    if candidates.is_empty() {
        return Err(PartitionError::NoCandidates);
    }
    let mut best: Option<(usize, &ClassifierCandidate)> = None;
    for c in candidates {
        c.validate()?;
        let p = c.param_count(input_dim);
        if !budget.fits(p) {
            continue;
        }
        let better = match (best, policy) {
            (None, _) => true,
            (Some((bp, _)), SelectionPolicy::SmallestFeasible) => p < bp,
            (Some((bp, _)), SelectionPolicy::LargestFeasible) => p > bp,
        };
        if better {
            best = Some((p, c));
        }
    }
    match best {
        Some((_, c)) => Ok(c.clone()),
        None => {
            let smallest = candidates
                .iter()
                .map(|c| c.param_count(input_dim))
                .min()
                .unwrap_or(0);
            Err(PartitionError::BudgetInfeasible {
                available_bytes: budget.available_bytes,
                bytes_per_param: budget.bytes_per_param,
                smallest_bytes: smallest as u64 * budget.bytes_per_param,
            })
        }
    }
}

/// Dense+ReLU feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl EncoderSpec {
    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Network {
        Network::init(
            self.input_dim,
            &self.widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        )
    }
}

/// Encoder `E` and classifier `C` of the split model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPartition {
    pub encoder: Network,
    pub classifier: Network,
    pub encoder_frozen_on_ucd: bool,
}

impl ModelPartition {
    pub fn new(encoder: Network, classifier: Network) -> Result<Self, PartitionError> {
        if let (Some(out), Some(inp)) = (encoder.output_dim(), classifier.input_dim()) {
            if out != inp {
                return Err(PartitionError::WidthMismatch {
                    encoder: out,
                    classifier: inp,
                });
            }
        }
        Ok(Self {
            encoder,
            classifier,
            encoder_frozen_on_ucd: true,
        })
    }

    /// Encoder followed by classifier as one network.
    pub fn compose(&self) -> Network {
        self.encoder
            .concat(&self.classifier)
            .expect("partition widths are checked on construction")
    }

    /// Inverse of [`compose`](Self::compose) given the encoder depth.
    pub fn from_composed(net: &Network, encoder_layers: usize) -> Result<Self, PartitionError> {
        let (e, c) = net.split_at(encoder_layers);
        Self::new(e, c)
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder.layers().len()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.classifier.param_count()
    }

    pub fn same_shape(&self, other: &ModelPartition) -> bool {
        self.encoder.same_shape(&other.encoder) && self.classifier.same_shape(&other.classifier)
    }

    pub fn logits(&self, x: &Tensor2D) -> Result<Tensor2D, NnError> {
        let feats = forward(&self.encoder, x)?.logits;
        Ok(forward(&self.classifier, &feats)?.logits)
    }

    pub fn accuracy(&self, x: &Tensor2D, y: &[usize]) -> Result<f64, NnError> {
        self.compose().accuracy(x, y)
    }
}

/// Builds a seeded partition and re-checks the classifier against the budget.
pub fn build_partition<R: Rng + ?Sized>(
    encoder: &EncoderSpec,
    chosen: &ClassifierCandidate,
    budget: &MemoryBudget,
    rng: &mut R,
) -> Result<ModelPartition, PartitionError> {
    chosen.validate()?;
    let enc = encoder.build(rng);
    let cls = chosen.build(encoder.output_dim(), rng);
    let partition = ModelPartition::new(enc, cls)?;
    let params = count_params(&partition.classifier);
    if !budget.fits(params) {
        return Err(PartitionError::BudgetInfeasible {
            available_bytes: budget.available_bytes,
            bytes_per_param: budget.bytes_per_param,
            smallest_bytes: params as u64 * budget.bytes_per_param,
        });
    }
    Ok(partition)
}

/// Like [`build_partition`] but keeps an existing (e.g. pretrained) encoder.
pub fn attach_classifier<R: Rng + ?Sized>(
    encoder: Network,
    chosen: &ClassifierCandidate,
    budget: &MemoryBudget,
    rng: &mut R,
) -> Result<ModelPartition, PartitionError> {
    chosen.validate()?;
    let width = encoder.output_dim().unwrap_or(0);
    let cls = chosen.build(width, rng);
    if !budget.fits(count_params(&cls)) {
        return Err(PartitionError::BudgetInfeasible {
            available_bytes: budget.available_bytes,
            bytes_per_param: budget.bytes_per_param,
            smallest_bytes: count_params(&cls) as u64 * budget.bytes_per_param,
        });
    }
    ModelPartition::new(encoder, cls)
}
