//! Mobility-driven connectivity.
//!
//! A client's exclusive-online association matrix (eOAM) is a `T x S` binary
//! matrix with exactly one `1` per row: in time slot `t` the user is at one
//! location. A global per-location connectivity vector `lambda` gives the
//! probability of being online at each location. FL rounds map onto slots
//! cyclically, and every round spent offline is one unit of offline time,
//! later converted into extra local epochs on a 20% slice of the extra shard.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("eOAM needs at least one slot and one location (got {slots}x{locations})")]
    EmptyShape { slots: usize, locations: usize },
    #[error("eOAM row {0} is not one-hot")]
    NotOneHot(usize),
    #[error("connectivity probability {value} at location {index} is outside [0, 1]")]
    BadProbability { index: usize, value: f64 },
    #[error("lambda has {lambda} entries but the eOAM has {locations} locations")]
    LocationCount { lambda: usize, locations: usize },
    #[error("slot {slot} out of range for {slots} slots")]
    SlotOutOfRange { slot: usize, slots: usize },
}

/// One-hot-row binary matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eoam {
    slots: usize,
    locations: usize,
    matrix: Vec<u8>,
}

impl Eoam {
    pub fn from_matrix(slots: usize, locations: usize, matrix: Vec<u8>) -> Result<Self, MobilityError> {
        if slots == 0 || locations == 0 || matrix.len() != slots * locations {
            return Err(MobilityError::EmptyShape { slots, locations });
        }
        let eoam = Self {
            slots,
            locations,
            matrix,
        };
        eoam.validate()?;
        Ok(eoam)
    }

    pub fn validate(&self) -> Result<(), MobilityError> {
        for t in 0..self.slots {
            let row = self.row(t);
            let binary = row.iter().all(|&v| v <= 1);
            let sum: usize = row.iter().map(|&v| v as usize).sum();
            if !binary || sum != 1 {
                return Err(MobilityError::NotOneHot(t));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn locations(&self) -> usize {
        self.locations
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.matrix[t * self.locations..(t + 1) * self.locations]
    }

    /// Column holding the `1` in row `t`.
    pub fn location(&self, t: usize) -> usize {
        self.row(t).iter().position(|&v| v == 1).unwrap_or(0)
    }
}

/// Random eOAM with a uniformly chosen location per slot.
pub fn generate_eoam<R: Rng + ?Sized>(
    slots: usize,
    locations: usize,
    rng: &mut R,
) -> Result<Eoam, MobilityError> {
    if slots == 0 || locations == 0 {
        return Err(MobilityError::EmptyShape { slots, locations });
    }
    let mut matrix = vec![0u8; slots * locations];
    for t in 0..slots {
        let loc = rng.random_range(0..locations);
        matrix[t * locations + loc] = 1;
    }
    Eoam::from_matrix(slots, locations, matrix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityVector {
    lambda: Vec<f64>,
}

impl ConnectivityVector {
    pub fn new(lambda: Vec<f64>) -> Result<Self, MobilityError> {
        for (index, &value) in lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(MobilityError::BadProbability { index, value });
            }
        }
        Ok(Self { lambda })
    }

    pub fn values(&self) -> &[f64] {
        &self.lambda
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.lambda.is_empty() {
            0.0
        } else {
            self.lambda.iter().sum::<f64>() / self.lambda.len() as f64
        }
    }

    /// `locations` values drawn uniformly from `[lo, hi]`.
    pub fn sample<R: Rng + ?Sized>(
        locations: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self, MobilityError> {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let lambda = (0..locations)
            .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
            .collect();
        Self::new(lambda)
    }
}

/// Bernoulli(lambda[location(slot)]).
pub fn sample_online<R: Rng + ?Sized>(
    eoam: &Eoam,
    lambda: &ConnectivityVector,
    slot: usize,
    rng: &mut R,
) -> Result<bool, MobilityError> {
    if slot >= eoam.slots() {
        return Err(MobilityError::SlotOutOfRange {
            slot,
            slots: eoam.slots(),
        });
    }
    if lambda.len() != eoam.locations() {
        return Err(MobilityError::LocationCount {
            lambda: lambda.len(),
            locations: eoam.locations(),
        });
    }
    let p = lambda.values()[eoam.location(slot)];
    Ok(rng.random::<f64>() < p)
}

/// Extra epochs and their slice size for `units` of offline time: one epoch
/// per unit, each on `ceil(20% of extra_shard_size)` samples.
pub fn offline_to_epochs(units: u32, extra_shard_size: usize) -> (u32, usize) {
    (units, extra_shard_size.div_ceil(5))
}

/// Reporting buckets for the connectivity probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaBucket {
    Low,
    Mid,
    High,
}

impl LambdaBucket {
    pub fn range(self) -> (f64, f64) {
        match self {
            LambdaBucket::Low => (0.1, 0.4),
            LambdaBucket::Mid => (0.4, 0.7),
            LambdaBucket::High => (0.7, 1.0),
        }
    }

    /// Bucket for a mean connectivity value; boundaries go to the lower bucket.
    pub fn classify(lambda: f64) -> Option<Self> {
        if !(0.1..=1.0).contains(&lambda) {
            return None;
        }
        Some(if lambda <= 0.4 {
            LambdaBucket::Low
        } else if lambda <= 0.7 {
            LambdaBucket::Mid
        } else {
            LambdaBucket::High
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LambdaBucket::Low => "low",
            LambdaBucket::Mid => "mid",
            LambdaBucket::High => "high",
        }
    }
}

impl std::str::FromStr for LambdaBucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(LambdaBucket::Low),
            "mid" => Ok(LambdaBucket::Mid),
            "high" => Ok(LambdaBucket::High),
            other => Err(format!("unknown lambda bucket '{other}' (expected low|mid|high)")),
        }
    }
}

/// Per-client online history and the offline time not yet spent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityTrace {
    online: Vec<bool>,
    offline_units: u32,
}

impl ConnectivityTrace {
    pub fn record(&mut self, online: bool) {
        self.online.push(online);
        if !online {
            self.offline_units += 1;
        }
    }

    pub fn offline_units(&self) -> u32 {
        self.offline_units
    }

    /// Returns the accrued units and resets the counter.
    pub fn spend(&mut self) -> u32 {
        std::mem::take(&mut self.offline_units)
    }

    pub fn history(&self) -> &[bool] {
        &self.online
    }

    pub fn last(&self) -> Option<bool> {
        self.online.last().copied()
    }
}

/// How a client's UCD-to-AP link is sampled each round.
#[derive(Debug, Clone, PartialEq)]
pub enum LinkModel {
    /// Location-free Bernoulli with a fixed disconnect probability.
    Bernoulli { disconnect_prob: f64 },
    /// Slot `round mod T` of the client's eOAM, then Bernoulli(lambda[loc]).
    Mobility {
        eoam: Eoam,
        lambda: ConnectivityVector,
    },
}

impl LinkModel {
    pub fn sample<R: Rng + ?Sized>(&self, round: usize, rng: &mut R) -> bool {
        match self {
            LinkModel::Bernoulli { disconnect_prob } => rng.random::<f64>() >= *disconnect_prob,
            LinkModel::Mobility { eoam, lambda } => {
                sample_online(eoam, lambda, round % eoam.slots(), rng).unwrap_or(false)
            }
        }
    }
}
