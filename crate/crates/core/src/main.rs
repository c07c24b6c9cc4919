use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tierfl::config::ExperimentConfig;
use tierfl::experiment::{
    compare, comparison_table, run_experiment, run_sweep, write_comparison_csv, ExperimentError,
    RunSummary, SweepAxis,
};
use tierfl::fedsim::StrategyKind;
use tierfl::mobility::LambdaBucket;

#[derive(Parser)]
#[command(name = "tierfl", version, about = "Multitier federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy × seed and write metrics CSVs plus summary.json.
    Run {
        /// TOML config; the built-in desk-scale defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated strategies (centaur, ap_only, ucd_only).
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<StrategyKind>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Grid axis KEY=V1,V2,...; repeat for a cartesian product.
        #[arg(long, num_args = 1..)]
        sweep: Vec<SweepAxis>,
        /// Override any config value, e.g. --set federation.lr=0.05.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        outdir: Option<PathBuf>,
        #[arg(long, value_enum)]
        mobility: Option<Switch>,
        /// Draw connectivity probabilities from one bucket (implies --mobility on).
        #[arg(long)]
        lambda_bucket: Option<LambdaBucket>,
        /// Client-phase worker threads (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Tabulate runs from two or more output directories or summary files.
    Compare {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "ucd_only")]
        baseline: StrategyKind,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, ExperimentError> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run {
            config,
            strategy,
            seeds,
            sweep,
            overrides,
            outdir,
            mobility,
            lambda_bucket,
            workers,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if !strategy.is_empty() {
                cfg.strategies = strategy;
            }
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            if let Some(o) = outdir {
                cfg.outdir = o;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            match mobility {
                Some(Switch::On) => cfg.mobility.enabled = true,
                Some(Switch::Off) => cfg.mobility.enabled = false,
                None => {}
            }
            if let Some(b) = lambda_bucket {
                cfg.mobility.set_bucket(b);
            }
            for kv in &overrides {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    tierfl::config::ConfigError::Parse(format!("--set '{kv}' must be KEY=VALUE"))
                })?;
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            let outdir = cfg.outdir.clone();
            if sweep.is_empty() {
                let summary = run_experiment(&cfg, &outdir)?;
                for r in &summary.runs {
                    println!(
                        "{:<9} seed {:<4} final {:.4} best {:.4}",
                        r.strategy.name(),
                        r.seed,
                        r.final_accuracy,
                        r.best_accuracy
                    );
                }
            } else {
                let points = run_sweep(&cfg, &sweep, &outdir)?;
                println!("{} grid points written to {}", points.len(), outdir.display());
            }
            Ok(())
        }
        Command::Compare {
            inputs,
            baseline,
            out,
        } => {
            let summaries = inputs
                .iter()
                .map(|p| RunSummary::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = compare(&summaries, baseline)?;
            print!("{}", comparison_table(&rows, baseline));
            if let Some(path) = out {
                write_comparison_csv(&path, &rows)?;
            }
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
