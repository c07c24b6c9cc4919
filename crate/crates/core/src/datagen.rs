//! Synthetic data and non-IID client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Tensor2D};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameter: {0}")]
    InvalidParam(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv has no 'label' column")]
    MissingLabel,
    #[error("csv row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor2D,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor2D, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if features.rows() != labels.len() {
            return Err(DataError::InvalidParam(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidParam(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self, idx: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in idx {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Features plus an integer column named `label`; every other column is a feature.
    pub fn from_csv(path: &Path) -> Result<Self, DataError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let label_col = headers
            .iter()
            .position(|h| h.trim() == "label")
            .ok_or(DataError::MissingLabel)?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (c, field) in rec.iter().enumerate() {
                let field = field.trim();
                if c == label_col {
                    let l: usize = field.parse().map_err(|_| DataError::BadRow {
                        row,
                        msg: format!("label '{field}' is not a non-negative integer"),
                    })?;
                    labels.push(l);
                } else {
                    let v: f64 = field.parse().map_err(|_| DataError::BadRow {
                        row,
                        msg: format!("feature '{field}' is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(DataError::BadRow {
                            row,
                            msg: "non-finite feature".into(),
                        });
                    }
                    data.push(v);
                }
            }
        }
        let cols = headers.len() - 1;
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let features = Tensor2D::from_vec(labels.len(), cols, data)?;
        Dataset::new(features, labels, classes)
    }
}

/// Gaussian class clusters sharing one set of centers, so train, test and
/// pretraining splits can be drawn from the same task.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobTask {
    centers: Vec<Vec<f64>>,
    spread: f64,
}

impl BlobTask {
    /// Centers have i.i.d. standard normal coordinates.
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        dim: usize,
        spread: f64,
        rng: &mut R,
    ) -> Result<Self, DataError> {
        if classes == 0 || dim == 0 {
            return Err(DataError::InvalidParam("classes and dim must be > 0".into()));
        }
        if !(spread.is_finite() && spread >= 0.0) {
            return Err(DataError::InvalidParam(format!("spread must be >= 0, got {spread}")));
        }
        let centers = (0..classes)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Ok(Self { centers, spread })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// `per_class` samples of every class, class-major order.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Dataset {
        let (z, d) = (self.classes(), self.dim());
        let mut data = Vec::with_capacity(z * per_class * d);
        let mut labels = Vec::with_capacity(z * per_class);
        for (c, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                for &m in center {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(m + self.spread * noise);
                }
                labels.push(c);
            }
        }
        Dataset {
            features: Tensor2D::from_vec(z * per_class, d, data).expect("sized above"),
            labels,
            classes: z,
        }
    }
}

pub fn make_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if per_class == 0 {
        return Err(DataError::InvalidParam("per_class must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = BlobTask::new(classes, dim, spread, &mut rng)?;
    Ok(task.sample(per_class, &mut rng))
}

/// One draw from a symmetric Dirichlet(`alpha`) over `k` components.
///
/// Works in log space so that very small concentrations (1e-3) still give a
/// valid, nearly one-hot vector instead of underflowing to all zeros.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    // G(a) = G(a + 1) * U^(1/a) for a < 1.
    let boosted = alpha < 1.0;
    let shape = if boosted { alpha + 1.0 } else { alpha };
    let gamma = Gamma::new(shape, 1.0).expect("shape is positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut lg = g.max(f64::MIN_POSITIVE).ln();
            if boosted {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                lg += u.ln() / alpha;
            }
            lg
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Class-wise Dirichlet allocation: for every class, client proportions are
/// drawn from Dirichlet(`lda_alpha`) and that class's shuffled samples are
/// cut at the rounded cumulative proportions. Every index lands in exactly one client.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    num_clients: usize,
    lda_alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, DataError> {
    if num_clients == 0 {
        return Err(DataError::InvalidParam("num_clients must be >= 1".into()));
    }
    if !(lda_alpha.is_finite() && lda_alpha > 0.0) {
        return Err(DataError::InvalidParam(format!(
            "lda_alpha must be > 0, got {lda_alpha}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(DataError::InvalidParam(format!("label {l} outside [0, {classes})")));
        }
        by_class[l].push(i);
    }
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for mut members in by_class {
        members.shuffle(rng);
        let props = sample_dirichlet(lda_alpha, num_clients, rng);
        let n = members.len();
        let mut start = 0;
        let mut acc = 0.0;
        for (k, p) in props.iter().enumerate() {
            acc += p;
            let end = if k + 1 == num_clients {
                n
            } else {
                ((acc * n as f64).round() as usize).clamp(start, n)
            };
            clients[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for c in clients.iter_mut() {
        c.sort_unstable();
    }
    Ok(clients)
}

/// Clients left without samples by a partition.
pub fn empty_clients(parts: &[Vec<usize>]) -> Vec<usize> {
    parts
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_empty())
        .map(|(i, _)| i)
        .collect()
}

/// A client's online training shard and the extra shard collected offline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShards {
    pub online: Vec<usize>,
    pub extra: Vec<usize>,
}

impl ClientShards {
    pub fn len(&self) -> usize {
        self.online.len() + self.extra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random disjoint split; `round(fraction * n)` indices go online.
pub fn split_online_extra<R: Rng + ?Sized>(
    indices: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<ClientShards, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidParam(format!(
            "online fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let k = ((indices.len() as f64) * fraction).round() as usize;
    let extra = shuffled.split_off(k.min(shuffled.len()));
    Ok(ClientShards {
        online: shuffled,
        extra,
    })
}

/// Largest class share among the client's samples; `None` for empty clients.
pub fn max_class_share(labels: &[usize], classes: usize, idx: &[usize]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    let mut h = vec![0usize; classes];
    for &i in idx {
        h[labels[i]] += 1;
    }
    Some(*h.iter().max().unwrap() as f64 / idx.len() as f64)
}
