//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::DeviceProfile;
use crate::fedsim::StrategyKind;
use crate::mobility::LambdaBucket;
use crate::partition::{ClassifierCandidate, MemoryBudget, SelectionPolicy};
use crate::selector::SelectionParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {msg}")]
    Field { field: String, msg: String },
}

fn field(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategyKind>,
    pub outdir: PathBuf,
    /// Client-phase worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub selection: SelectionConfig,
    pub model: ModelConfig,
    pub devices: DevicesConfig,
    pub mobility: MobilityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Within-class standard deviation of the blobs.
    pub spread: f64,
    pub test_per_class: usize,
    /// Size of the shard used to pretrain the starting encoder.
    pub pretrain_per_class: usize,
    pub lda_alpha: f64,
    /// Share of each client's samples available for regular training; the
    /// rest is the extra shard consumed by offline epochs.
    pub online_fraction: f64,
    pub bytes_per_sample: u64,
    /// Optional real dataset; replaces the blobs when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_holdout")]
    pub csv_test_fraction: f64,
    #[serde(default = "default_holdout")]
    pub csv_pretrain_fraction: f64,
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub fraction: f64,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight client updates by trained-sample count instead of 1/K.
    #[serde(default)]
    pub weighted_fedavg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub queue_capacity: usize,
    pub warmup_min: usize,
}

impl SelectionConfig {
    pub fn params(&self) -> SelectionParams {
        SelectionParams {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            warmup_min: self.warmup_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of each classifier candidate, in preference-tie order.
    pub classifiers: Vec<Vec<usize>>,
    pub memory_budget_bytes: u64,
    pub bytes_per_param: u64,
    pub policy: SelectionPolicy,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Backward-pass MACs as a multiple of the forward MACs of trained layers.
    #[serde(default = "default_backward_multiplier")]
    pub backward_mac_multiplier: u64,
}

fn default_backward_multiplier() -> u64 {
    crate::nn::DEFAULT_BACKWARD_MAC_MULTIPLIER
}

impl ModelConfig {
    pub fn budget(&self) -> MemoryBudget {
        MemoryBudget {
            available_bytes: self.memory_budget_bytes,
            bytes_per_param: self.bytes_per_param,
        }
    }

    pub fn candidates(&self, classes: usize) -> Vec<ClassifierCandidate> {
        self.classifiers
            .iter()
            .map(|h| ClassifierCandidate {
                hidden_widths: h.clone(),
                output_classes: classes,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevicesConfig {
    pub ucd: DeviceProfile,
    pub ap: DeviceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityConfig {
    /// When off, UCD links use `devices.ucd.disconnect_prob`.
    pub enabled: bool,
    pub slots: usize,
    pub locations: usize,
    pub lambda_low: f64,
    pub lambda_high: f64,
}

impl MobilityConfig {
    pub fn set_bucket(&mut self, bucket: LambdaBucket) {
        let (lo, hi) = bucket.range();
        self.enabled = true;
        self.lambda_low = lo;
        self.lambda_high = hi;
    }
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: 20 clients, 40 rounds, 10-class blobs.
    fn default() -> Self {
        Self {
            seeds: vec![1],
            strategies: vec![StrategyKind::Centaur, StrategyKind::UcdOnly, StrategyKind::ApOnly],
            outdir: PathBuf::from("out"),
            workers: 0,
            data: DataConfig {
                classes: 10,
                per_class: 200,
                dim: 32,
                spread: 1.0,
                test_per_class: 100,
                pretrain_per_class: 20,
                lda_alpha: 1000.0,
                online_fraction: 0.5,
                bytes_per_sample: 30_000,
                csv: None,
                csv_test_fraction: default_holdout(),
                csv_pretrain_fraction: default_holdout(),
            },
            federation: FederationConfig {
                num_clients: 20,
                fraction: 0.5,
                rounds: 40,
                epochs: 3,
                batch_size: 64,
                lr: 0.1,
                weighted_fedavg: false,
            },
            selection: SelectionConfig {
                alpha: 5.0,
                beta: 3.0,
                gamma: 0.0,
                queue_capacity: crate::selector::DEFAULT_QUEUE_CAPACITY,
                warmup_min: crate::selector::DEFAULT_WARMUP_MIN,
            },
            model: ModelConfig {
                encoder_widths: vec![16],
                classifiers: vec![vec![], vec![64], vec![128]],
                memory_budget_bytes: 8 * 1024,
                bytes_per_param: 4,
                policy: SelectionPolicy::LargestFeasible,
                pretrain_epochs: 5,
                pretrain_lr: 0.1,
                backward_mac_multiplier: default_backward_multiplier(),
            },
            devices: DevicesConfig {
                ucd: DeviceProfile::ucd(),
                ap: DeviceProfile::ap(),
            },
            mobility: MobilityConfig {
                enabled: false,
                slots: 24,
                locations: 4,
                lambda_low: 0.1,
                lambda_high: 1.0,
            },
        }
    }
}

impl ExperimentConfig {
    /// Full-scale federation settings: 100 clients, 10% sampled per round,
    /// 100 rounds, lr 0.01. Data and model stay at desk scale.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.data.per_class = 1000;
        c.federation.num_clients = 100;
        c.federation.fraction = 0.1;
        c.federation.rounds = 100;
        c.federation.lr = 0.01;
        c
    }
}

/// Bare names accepted by [`ExperimentConfig::set`] in place of dotted paths.
const ALIASES: &[(&str, &str)] = &[
    ("alpha", "selection.alpha"),
    ("beta", "selection.beta"),
    ("gamma", "selection.gamma"),
    ("warmup_min", "selection.warmup_min"),
    ("queue_capacity", "selection.queue_capacity"),
    ("lr", "federation.lr"),
    ("epochs", "federation.epochs"),
    ("rounds", "federation.rounds"),
    ("fraction", "federation.fraction"),
    ("num_clients", "federation.num_clients"),
    ("batch_size", "federation.batch_size"),
    ("lda_alpha", "data.lda_alpha"),
    ("spread", "data.spread"),
    ("memory_budget_bytes", "model.memory_budget_bytes"),
    ("policy", "model.policy"),
];

pub fn resolve_key(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(k, _)| *k == key)
        .map_or(key, |(_, full)| full)
}

fn parse_scalar(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(raw.to_string())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Sets a dotted key (or alias such as `alpha`) to a scalar parsed from
    /// `raw`, then revalidates.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let full = resolve_key(key);
        let mut root = toml::Value::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cur = &mut root;
        let parts: Vec<&str> = full.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| field(full, "not a table"))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*p) {
                    return Err(field(full, "unknown key"));
                }
                table.insert(p.to_string(), parse_scalar(raw));
                break;
            }
            cur = table.get_mut(*p).ok_or_else(|| field(full, "unknown key"))?;
        }
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| field(full, format!("bad value '{raw}': {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        if self.strategies.is_empty() {
            return Err(field("strategies", "at least one strategy is required"));
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(field("data.classes", "must be >= 2"));
        }
        if d.csv.is_none() {
            for (name, v) in [
                ("data.per_class", d.per_class),
                ("data.dim", d.dim),
                ("data.test_per_class", d.test_per_class),
                ("data.pretrain_per_class", d.pretrain_per_class),
            ] {
                if v == 0 {
                    return Err(field(name, "must be > 0"));
                }
            }
        }
        if !(d.spread.is_finite() && d.spread >= 0.0) {
            return Err(field("data.spread", "must be finite and >= 0"));
        }
        if !(d.lda_alpha.is_finite() && d.lda_alpha > 0.0) {
            return Err(field("data.lda_alpha", "must be > 0"));
        }
        if !(d.online_fraction > 0.0 && d.online_fraction < 1.0) {
            return Err(field("data.online_fraction", "must be in (0, 1)"));
        }
        if d.bytes_per_sample == 0 {
            return Err(field("data.bytes_per_sample", "must be > 0"));
        }
        for (name, v) in [
            ("data.csv_test_fraction", d.csv_test_fraction),
            ("data.csv_pretrain_fraction", d.csv_pretrain_fraction),
        ] {
            if !(v > 0.0 && v < 0.5) {
                return Err(field(name, "must be in (0, 0.5)"));
            }
        }

        let f = &self.federation;
        if f.num_clients == 0 {
            return Err(field("federation.num_clients", "must be >= 1"));
        }
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return Err(field("federation.fraction", "must be in (0, 1]"));
        }
        if (f.num_clients as f64 * f.fraction).round() < 1.0 {
            return Err(field(
                "federation.fraction",
                "round(num_clients * fraction) must be >= 1",
            ));
        }
        if f.rounds == 0 {
            return Err(field("federation.rounds", "must be >= 1"));
        }
        if f.epochs == 0 {
            return Err(field("federation.epochs", "must be >= 1"));
        }
        if f.batch_size == 0 {
            return Err(field("federation.batch_size", "must be >= 1"));
        }
        if !(f.lr.is_finite() && f.lr > 0.0) {
            return Err(field("federation.lr", "must be > 0"));
        }

        let s = &self.selection;
        for (name, v) in [
            ("selection.alpha", s.alpha),
            ("selection.beta", s.beta),
            ("selection.gamma", s.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(field(name, "must be finite and >= 0"));
            }
        }
        if s.queue_capacity == 0 {
            return Err(field("selection.queue_capacity", "must be >= 1"));
        }

        let m = &self.model;
        if m.classifiers.is_empty() {
            return Err(field("model.classifiers", "at least one candidate is required"));
        }
        if m.encoder_widths.iter().chain(m.classifiers.iter().flatten()).any(|&w| w == 0) {
            return Err(field("model", "layer widths must be > 0"));
        }
        if m.memory_budget_bytes == 0 {
            return Err(field("model.memory_budget_bytes", "must be > 0"));
        }
        if m.bytes_per_param == 0 {
            return Err(field("model.bytes_per_param", "must be > 0"));
        }
        if m.backward_mac_multiplier == 0 {
            return Err(field("model.backward_mac_multiplier", "must be >= 1"));
        }
        if !(m.pretrain_lr.is_finite() && m.pretrain_lr > 0.0) {
            return Err(field("model.pretrain_lr", "must be > 0"));
        }

        self.devices
            .ucd
            .validate()
            .map_err(|e| field("devices.ucd", e))?;
        self.devices
            .ap
            .validate()
            .map_err(|e| field("devices.ap", e))?;

        let mo = &self.mobility;
        if mo.slots == 0 {
            return Err(field("mobility.slots", "must be >= 1"));
        }
        if mo.locations == 0 {
            return Err(field("mobility.locations", "must be >= 1"));
        }
        for (name, v) in [
            ("mobility.lambda_low", mo.lambda_low),
            ("mobility.lambda_high", mo.lambda_high),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(field(name, "must be in [0, 1]"));
            }
        }
        if mo.lambda_low > mo.lambda_high {
            return Err(field("mobility.lambda_low", "must be <= lambda_high"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring settings that cannot
    /// change results (output directory, worker count).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.outdir = PathBuf::new();
        c.workers = 0;
        hex_digest(serde_json::to_string(&c).expect("serializable").as_bytes())
    }

    /// Hash of everything that determines the generated data and its split
    /// across clients (seed excluded).
    pub fn dataset_hash(&self) -> String {
        let key = serde_json::json!({
            "data": self.data,
            "num_clients": self.federation.num_clients,
        });
        hex_digest(key.to_string().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn full_scale_preset() {
        let c = ExperimentConfig::full_scale();
        c.validate().unwrap();
        assert_eq!(c.federation.rounds, 100);
        assert_eq!(c.federation.num_clients, 100);
        assert_eq!(crate::fedsim::target_participants(100, c.federation.fraction), 10);
        assert_eq!((c.federation.epochs, c.federation.batch_size), (3, 64));
        assert_eq!((c.selection.alpha, c.selection.beta, c.selection.gamma), (5.0, 3.0, 0.0));
        assert_eq!(c.data.lda_alpha, 1000.0);
        assert_eq!(c.data.bytes_per_sample, 30_000);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::default().to_toml_string();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(ConfigError::Parse(_))
        ));
        let text = ExperimentConfig::default()
            .to_toml_string()
            .replace("lr = ", "learning_rate = ");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn field_level_messages() {
        let mut c = ExperimentConfig::default();
        c.federation.fraction = 0.0;
        match c.validate() {
            Err(ConfigError::Field { field, .. }) => assert_eq!(field, "federation.fraction"),
            other => panic!("{other:?}"),
        }
        let mut c = ExperimentConfig::default();
        c.devices.ucd.cpu_freq_hz = 0.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.starts_with("devices.ucd:"), "{msg}");
    }

    #[test]
    fn set_by_alias_and_path() {
        let mut c = ExperimentConfig::default();
        c.set("alpha", "1").unwrap();
        assert_eq!(c.selection.alpha, 1.0);
        c.set("federation.rounds", "7").unwrap();
        assert_eq!(c.federation.rounds, 7);
        c.set("policy", "smallest_feasible").unwrap();
        assert_eq!(c.model.policy, SelectionPolicy::SmallestFeasible);
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("federation.rounds", "x").is_err());
        assert!(c.set("fraction", "0").is_err());
        assert_eq!(c.federation.fraction, 0.5);
    }

    #[test]
    fn hashes_track_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![9];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.dataset_hash(), b.dataset_hash());
        let mut c = a.clone();
        c.workers = 8;
        c.outdir = "elsewhere".into();
        assert_eq!(a.hash(), c.hash());
        b.data.spread = 3.0;
        assert_ne!(a.dataset_hash(), b.dataset_hash());
    }
}
