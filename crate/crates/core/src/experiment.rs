//! Experiment orchestration: strategy × seed runs, output files, parameter
//! sweeps and cross-run comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::cost::{Category, CostLedger, Tier};
use crate::fedsim::{run_in, Environment, RunResult, SimError, StrategyKind};

pub const SUMMARY_FILE: &str = "summary.json";
pub const DETAIL_DIR: &str = "detail";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("infeasible classifier budget: {0}")]
    Budget(SimError),
    #[error("simulation failed: {0}")]
    Sim(SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("compare: {0}")]
    Compare(String),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for an infeasible budget, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Budget(_) => 3,
            _ => 1,
        }
    }
}

impl From<SimError> for ExperimentError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => ExperimentError::Config(c),
            e if e.is_budget_infeasible() => ExperimentError::Budget(e),
            e => ExperimentError::Sim(e),
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-tier cost columns of one metrics row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TierCost {
    pub macs: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub seconds: f64,
    pub joules: f64,
}

impl TierCost {
    fn add(&mut self, o: &TierCost) {
        self.macs += o.macs;
        self.bytes_up += o.bytes_up;
        self.bytes_down += o.bytes_down;
        self.seconds += o.seconds;
        self.joules += o.joules;
    }

    fn from_ledger(ledger: &CostLedger, round: usize, tier: Tier) -> Self {
        let mut out = TierCost::default();
        for cat in Category::ALL {
            let e = ledger.get(round, tier, cat);
            out.macs += e.macs;
            match cat {
                Category::CommUp => out.bytes_up += e.bytes,
                Category::CommDown => out.bytes_down += e.bytes,
                _ => {}
            }
            out.seconds += e.seconds;
            out.joules += e.joules;
        }
        out
    }
}

pub fn metrics_header() -> Vec<String> {
    let mut h = vec!["round".to_string(), "accuracy".to_string()];
    for t in Tier::ALL {
        for c in ["macs", "bytes_up", "bytes_down", "seconds", "joules"] {
            h.push(format!("{}_{c}", t.name()));
        }
    }
    h.extend(["online", "participants", "uploaded_samples"].map(String::from));
    h
}

/// Per-tier costs of each round, in round order.
fn round_costs(r: &RunResult) -> Vec<[TierCost; 3]> {
    r.metrics
        .iter()
        .map(|m| Tier::ALL.map(|t| TierCost::from_ledger(&r.ledger, m.round, t)))
        .collect()
}

fn write_metrics_csv(path: &Path, r: &RunResult, costs: &[[TierCost; 3]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(metrics_header())?;
    for (m, tiers) in r.metrics.iter().zip(costs) {
        let mut rec = vec![m.round.to_string(), m.accuracy.to_string()];
        for c in tiers {
            rec.extend([
                c.macs.to_string(),
                c.bytes_up.to_string(),
                c.bytes_down.to_string(),
                c.seconds.to_string(),
                c.joules.to_string(),
            ]);
        }
        rec.extend([
            m.online.to_string(),
            m.participants.to_string(),
            m.uploaded_samples.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_ledger_csv(path: &Path, ledger: &CostLedger) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "tier", "category", "macs", "bytes", "seconds", "joules"])?;
    for ((round, tier, cat), e) in ledger.rows() {
        w.write_record([
            round.to_string(),
            tier.to_string(),
            cat.to_string(),
            e.macs.to_string(),
            e.bytes.to_string(),
            e.seconds.to_string(),
            e.joules.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: Option<usize>,
    pub initial_accuracy: f64,
    /// Column sums of the metrics CSV, per tier.
    pub totals: BTreeMap<String, TierCost>,
    pub storage_warnings: usize,
    pub encoder_train_macs: u64,
    pub mean_lambda: Option<f64>,
    pub metrics_file: String,
    pub ledger_file: String,
}

impl RunRecord {
    pub fn tier(&self, t: Tier) -> TierCost {
        self.totals.get(t.name()).copied().unwrap_or_default()
    }

    /// Bytes moved over every link, both directions.
    pub fn total_bytes(&self) -> u64 {
        self.totals.values().map(|c| c.bytes_up + c.bytes_down).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub dataset_hash: String,
    pub classifier_hidden_widths: Vec<usize>,
    pub classifier_params: usize,
    pub runs: Vec<RunRecord>,
    /// Every file written, relative to the output directory.
    pub files: Vec<String>,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(SUMMARY_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs every strategy × seed of `cfg` into `outdir` and writes
/// `summary.json`. Wall-clock times go to `detail/timing.json` so the
/// summary stays byte-identical across reruns.
pub fn run_experiment(cfg: &ExperimentConfig, outdir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let detail = outdir.join(DETAIL_DIR);
    fs::create_dir_all(&detail).map_err(io_err(&detail))?;
    let mut runs = Vec::new();
    let mut files = Vec::new();
    let mut timing = BTreeMap::new();
    let mut chosen = None;
    for &seed in &cfg.seeds {
        let env = Environment::build(cfg, seed)?;
        let input = env.initial.classifier.input_dim().unwrap_or(0);
        chosen.get_or_insert((
            env.classifier.hidden_widths.clone(),
            env.classifier.param_count(input),
        ));
        for &strategy in &cfg.strategies {
            let start = Instant::now();
            let result = run_in(strategy, cfg, &env, seed)?;
            let stem = format!("{strategy}_{seed}");
            timing.insert(stem.clone(), start.elapsed().as_secs_f64());
            runs.push(write_run(outdir, &stem, &result, &mut files)?);
            log::info!(
                "{stem}: final accuracy {:.4}, UCD energy {:.6} J",
                result.final_accuracy(),
                result.ledger.tier_total(Tier::Ucd).joules
            );
        }
    }
    let timing_path = detail.join("timing.json");
    fs::write(&timing_path, serde_json::to_string_pretty(&timing)?).map_err(io_err(&timing_path))?;
    files.push(format!("{DETAIL_DIR}/timing.json"));
    let (widths, params) = chosen.unwrap_or_default();
    let summary = RunSummary {
        config_hash: cfg.hash(),
        dataset_hash: cfg.dataset_hash(),
        classifier_hidden_widths: widths,
        classifier_params: params,
        runs,
        files,
    };
    let path = outdir.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(io_err(&path))?;
    Ok(summary)
}

fn write_run(outdir: &Path, stem: &str, r: &RunResult, files: &mut Vec<String>) -> Result<RunRecord> {
    let metrics_file = format!("{stem}.csv");
    let ledger_file = format!("{DETAIL_DIR}/{stem}_ledger.csv");
    let costs = round_costs(r);
    write_metrics_csv(&outdir.join(&metrics_file), r, &costs)?;
    write_ledger_csv(&outdir.join(&ledger_file), &r.ledger)?;
    files.push(metrics_file.clone());
    files.push(ledger_file.clone());

    let mut totals: BTreeMap<String, TierCost> = BTreeMap::new();
    for tiers in &costs {
        for (t, c) in Tier::ALL.iter().zip(tiers) {
            totals.entry(t.name().to_string()).or_default().add(c);
        }
    }
    let best = r
        .metrics
        .iter()
        .fold(None::<(usize, f64)>, |acc, m| match acc {
            Some((_, a)) if a >= m.accuracy => acc,
            _ => Some((m.round, m.accuracy)),
        });
    Ok(RunRecord {
        strategy: r.strategy,
        seed: r.seed,
        final_accuracy: r.final_accuracy(),
        best_accuracy: r.best_accuracy(),
        best_round: best.map(|b| b.0),
        initial_accuracy: r.initial_accuracy,
        totals,
        storage_warnings: r.storage_warnings,
        encoder_train_macs: r.encoder_train_macs,
        mean_lambda: r.mean_lambda,
        metrics_file,
        ledger_file,
    })
}

/// A `KEY=V1,V2,...` sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| format!("sweep '{s}' must look like KEY=V1,V2,..."))?;
        let values: Vec<String> = vals
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(format!("sweep '{s}' needs a key and at least one value"));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn sweep_grid(axes: &[SweepAxis]) -> Vec<Vec<(String, String)>> {
    let mut grid = vec![Vec::new()];
    for axis in axes {
        grid = grid
            .into_iter()
            .flat_map(|point: Vec<(String, String)>| {
                axis.values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    grid
}

pub fn point_name(point: &[(String, String)]) -> String {
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("_")
}

/// One experiment per grid point in `<outdir>/<point>/`, plus `sweep.csv`
/// with one line per point × strategy × seed.
pub fn run_sweep(
    base: &ExperimentConfig,
    axes: &[SweepAxis],
    outdir: &Path,
) -> Result<Vec<(String, RunSummary)>> {
    let grid = sweep_grid(axes);
    let mut configs = Vec::with_capacity(grid.len());
    for point in &grid {
        let mut cfg = base.clone();
        for (k, v) in point {
            cfg.set(k, v)?;
        }
        configs.push((point_name(point), cfg));
    }
    fs::create_dir_all(outdir).map_err(io_err(outdir))?;
    let path = outdir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.extend(
        [
            "strategy",
            "seed",
            "final_accuracy",
            "best_accuracy",
            "ucd_joules",
            "ucd_seconds",
            "total_bytes",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    let mut out = Vec::new();
    for ((name, cfg), point) in configs.into_iter().zip(&grid) {
        let summary = run_experiment(&cfg, &outdir.join(&name))?;
        for r in &summary.runs {
            let mut rec: Vec<String> = point.iter().map(|(_, v)| v.clone()).collect();
            let ucd = r.tier(Tier::Ucd);
            rec.extend([
                r.strategy.to_string(),
                r.seed.to_string(),
                r.final_accuracy.to_string(),
                r.best_accuracy.to_string(),
                ucd.joules.to_string(),
                ucd.seconds.to_string(),
                r.total_bytes().to_string(),
            ]);
            w.write_record(&rec)?;
        }
        out.push((name, summary));
    }
    w.flush().map_err(io_err(&path))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: StrategyKind,
    pub runs: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub ucd_joules: f64,
    pub ucd_seconds: f64,
    pub total_bytes: f64,
    pub delta_accuracy_pp: f64,
    pub delta_energy_pct: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-strategy medians (accuracy) and means (costs) over every run found in
/// `summaries`, with deltas against `baseline`.
pub fn compare(summaries: &[RunSummary], baseline: StrategyKind) -> Result<Vec<ComparisonRow>> {
    let runs: Vec<&RunRecord> = summaries.iter().flat_map(|s| &s.runs).collect();
    if runs.len() < 2 {
        return Err(ExperimentError::Compare(format!(
            "need at least 2 runs to compare, found {}",
            runs.len()
        )));
    }
    if let Some(s) = summaries
        .iter()
        .find(|s| s.dataset_hash != summaries[0].dataset_hash)
    {
        return Err(ExperimentError::Compare(format!(
            "runs use different datasets ({} vs {}); refusing to compare",
            summaries[0].dataset_hash, s.dataset_hash
        )));
    }
    let mut groups: BTreeMap<StrategyKind, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.strategy).or_default().push(r);
    }
    let mut rows: Vec<ComparisonRow> = groups
        .iter()
        .map(|(&strategy, rs)| ComparisonRow {
            strategy,
            runs: rs.len(),
            final_accuracy: median(rs.iter().map(|r| r.final_accuracy).collect()),
            best_accuracy: median(rs.iter().map(|r| r.best_accuracy).collect()),
            ucd_joules: mean(&rs.iter().map(|r| r.tier(Tier::Ucd).joules).collect::<Vec<_>>()),
            ucd_seconds: mean(&rs.iter().map(|r| r.tier(Tier::Ucd).seconds).collect::<Vec<_>>()),
            total_bytes: mean(&rs.iter().map(|r| r.total_bytes() as f64).collect::<Vec<_>>()),
            delta_accuracy_pp: 0.0,
            delta_energy_pct: 0.0,
        })
        .collect();
    let base = rows
        .iter()
        .find(|r| r.strategy == baseline)
        .cloned()
        .ok_or_else(|| ExperimentError::Compare(format!("baseline '{baseline}' not among the runs")))?;
    for r in &mut rows {
        r.delta_accuracy_pp = (r.final_accuracy - base.final_accuracy) * 100.0;
        r.delta_energy_pct = if base.ucd_joules > 0.0 {
            (r.ucd_joules - base.ucd_joules) / base.ucd_joules * 100.0
        } else {
            f64::NAN
        };
    }
    Ok(rows)
}

pub fn comparison_table(rows: &[ComparisonRow], baseline: StrategyKind) -> String {
    let mut s = format!(
        "{:<10} {:>4} {:>9} {:>9} {:>12} {:>12} {:>14} {:>9} {:>9}\n",
        "strategy", "runs", "final", "best", "ucd_J", "ucd_s", "bytes", "dacc_pp", "dE_%"
    );
    for r in rows {
        s += &format!(
            "{:<10} {:>4} {:>9.4} {:>9.4} {:>12.6} {:>12.3} {:>14.0} {:>9.2} {:>9.2}\n",
            r.strategy.name(),
            r.runs,
            r.final_accuracy,
            r.best_accuracy,
            r.ucd_joules,
            r.ucd_seconds,
            r.total_bytes,
            r.delta_accuracy_pp,
            r.delta_energy_pct
        );
    }
    s += &format!("deltas relative to {baseline}\n");
    s
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
