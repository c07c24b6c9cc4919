//! Device cost model and the per-round cost ledger.
//!
//! Compute latency is `c * MACs / f`, compute energy is latency times the
//! processor power (`power density * f`), communication latency is
//! `8 * bytes / bitrate` and communication energy is that time times the
//! radio power. Everything is linear in MACs or bytes by construction.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub cpu_freq_hz: f64,
    pub storage_bytes: u64,
    /// Processor power per unit of clock frequency (W/Hz).
    pub compute_power_w_per_hz: f64,
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    pub comm_power_w: f64,
    pub disconnect_prob: f64,
    /// Instructions per MAC (`c`).
    pub instr_per_mac: f64,
}

const MB: u64 = 1024 * 1024;

/// mW/MHz to W/Hz.
pub fn mw_per_mhz(v: f64) -> f64 {
    v * 1e-3 / 1e6
}

impl DeviceProfile {
    /// MCU-class wearable: 100 MHz, 5 MB storage, 0.05 mW/MHz,
    /// 2/2 Mbit/s, 0.1 mW radio, disconnects half the time.
    pub fn ucd() -> Self {
        Self {
            cpu_freq_hz: 100e6,
            storage_bytes: 5 * MB,
            compute_power_w_per_hz: 0.05e-3 / 1e6,
            uplink_bps: 2e6,
            downlink_bps: 2e6,
            comm_power_w: 0.0001,
            disconnect_prob: 0.5,
            instr_per_mac: 2.0,
        }
    }

    /// Phone/router class: 2 GHz, 4096 MB, 1.5 mW/MHz, 10/100 Mbit/s, 10 W radio.
    pub fn ap() -> Self {
        Self {
            cpu_freq_hz: 2000e6,
            storage_bytes: 4096 * MB,
            compute_power_w_per_hz: 1.5e-3 / 1e6,
            uplink_bps: 10e6,
            downlink_bps: 100e6,
            comm_power_w: 10.0,
            disconnect_prob: 0.0,
            instr_per_mac: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("cpu_freq_hz", self.cpu_freq_hz),
            ("compute_power_w_per_hz", self.compute_power_w_per_hz),
            ("uplink_bps", self.uplink_bps),
            ("downlink_bps", self.downlink_bps),
            ("comm_power_w", self.comm_power_w),
            ("instr_per_mac", self.instr_per_mac),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if self.storage_bytes == 0 {
            return Err("storage_bytes must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.disconnect_prob) {
            return Err(format!(
                "disconnect_prob must be in [0, 1], got {}",
                self.disconnect_prob
            ));
        }
        Ok(())
    }

    /// Processor power draw in watts.
    pub fn compute_power_w(&self) -> f64 {
        self.compute_power_w_per_hz * self.cpu_freq_hz
    }
}

pub fn compute_latency(macs: u64, profile: &DeviceProfile) -> f64 {
    profile.instr_per_mac * macs as f64 / profile.cpu_freq_hz
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyMode {
    Compute,
    Comm,
}

pub fn compute_energy(seconds: f64, profile: &DeviceProfile, mode: EnergyMode) -> f64 {
    match mode {
        EnergyMode::Compute => seconds * profile.compute_power_w(),
        EnergyMode::Comm => seconds * profile.comm_power_w,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

/// `(seconds, joules)` to move `bytes` over the device's link.
pub fn compute_comm(bytes: u64, direction: Direction, profile: &DeviceProfile) -> (f64, f64) {
    let rate = match direction {
        Direction::Up => profile.uplink_bps,
        Direction::Down => profile.downlink_bps,
    };
    let seconds = 8.0 * bytes as f64 / rate;
    (seconds, compute_energy(seconds, profile, EnergyMode::Comm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Ucd,
    Ap,
    Server,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Ucd, Tier::Ap, Tier::Server];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Ucd => "ucd",
            Tier::Ap => "ap",
            Tier::Server => "server",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown tier '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    TrainCompute,
    SelectionCompute,
    CommUp,
    CommDown,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::TrainCompute,
        Category::SelectionCompute,
        Category::CommUp,
        Category::CommDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::TrainCompute => "train_compute",
            Category::SelectionCompute => "selection_compute",
            Category::CommUp => "comm_up",
            Category::CommDown => "comm_down",
        }
    }

    pub fn is_compute(self) -> bool {
        matches!(self, Category::TrainCompute | Category::SelectionCompute)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub macs: u64,
    pub bytes: u64,
    pub seconds: f64,
    pub joules: f64,
}

impl CostEntry {
    pub fn add(&mut self, other: &CostEntry) {
        self.macs += other.macs;
        self.bytes += other.bytes;
        self.seconds += other.seconds;
        self.joules += other.joules;
    }

    pub fn is_zero(&self) -> bool {
        self.macs == 0 && self.bytes == 0 && self.seconds == 0.0 && self.joules == 0.0
    }
}

/// Priced cost for one record.
pub fn price(category: Category, macs: u64, bytes: u64, profile: &DeviceProfile) -> CostEntry {
    let (seconds, joules) = match category {
        Category::TrainCompute | Category::SelectionCompute => {
            let s = compute_latency(macs, profile);
            (s, compute_energy(s, profile, EnergyMode::Compute))
        }
        Category::CommUp => compute_comm(bytes, Direction::Up, profile),
        Category::CommDown => compute_comm(bytes, Direction::Down, profile),
    };
    CostEntry {
        macs,
        bytes,
        seconds,
        joules,
    }
}

pub type LedgerKey = (usize, Tier, Category);

/// Accumulated costs keyed by `(round, tier, category)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: BTreeMap<LedgerKey, CostEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prices `macs`/`bytes` against `profile` and accumulates them.
    pub fn record(
        &mut self,
        round: usize,
        tier: Tier,
        category: Category,
        macs: u64,
        bytes: u64,
        profile: &DeviceProfile,
    ) -> &mut Self {
        if macs == 0 && bytes == 0 {
            return self;
        }
        let cost = price(category, macs, bytes, profile);
        self.entries
            .entry((round, tier, category))
            .or_default()
            .add(&cost);
        self
    }

    /// Adds every entry of `other`, in key order.
    pub fn merge(&mut self, other: &CostLedger) {
        for (k, v) in &other.entries {
            self.entries.entry(*k).or_default().add(v);
        }
    }

    pub fn get(&self, round: usize, tier: Tier, category: Category) -> CostEntry {
        self.entries
            .get(&(round, tier, category))
            .copied()
            .unwrap_or_default()
    }

    /// Sum over every entry matching the given filters (`None` = any).
    pub fn total(
        &self,
        round: Option<usize>,
        tier: Option<Tier>,
        category: Option<Category>,
    ) -> CostEntry {
        let mut out = CostEntry::default();
        for ((r, t, c), e) in &self.entries {
            if round.is_some_and(|x| x != *r)
                || tier.is_some_and(|x| x != *t)
                || category.is_some_and(|x| x != *c)
            {
                continue;
            }
            out.add(e);
        }
        out
    }

    pub fn tier_total(&self, tier: Tier) -> CostEntry {
        self.total(None, Some(tier), None)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&LedgerKey, &CostEntry)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rounds(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.entries.keys().map(|k| k.0).collect();
        r.dedup();
        r
    }
}
