use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use eki_node::config::{ConfigErrors, ExperimentConfig};
use eki_node::runner::{run_to_dir, RunError};
use eki_node::{plot, presets, table};

const SEED_ENV: &str = "EKI_NODE_SEED";

#[derive(Parser)]
#[command(
    name = "eki-node",
    version,
    about = "Train neural ODEs with ensemble Kalman inversion or BPTT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write log.csv and report.json.
    Run {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Name of a built-in preset (see `presets`).
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the config seed and the EKI_NODE_SEED variable.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run configs over several seeds and summarize median and minimum errors.
    Table {
        /// JSON array of experiment configs.
        #[arg(long, conflicts_with = "set", required_unless_present = "set")]
        configs: Option<PathBuf>,
        /// Built-in column set: table1 (spiral) or table2 (pendulum).
        #[arg(long)]
        set: Option<String>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "runs/table")]
        out: PathBuf,
    },
    /// Export plot data and a matplotlib script for finished runs.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        report: Vec<PathBuf>,
        #[arg(long, default_value = "runs/plots")]
        out: PathBuf,
    },
    /// List the built-in presets, or print one as JSON.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={v:?} is not a non-negative integer"))
            .map_err(Failure::Config),
        Err(_) => Ok(None),
    }
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<(), Failure> {
    if let Some(s) = seed.or(env_seed()?) {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = Some(e);
        cfg.wall_clock_budget_seconds = None;
    }
    cfg.validate().map_err(config_error)
}

fn load_preset(name: &str) -> Result<ExperimentConfig, Failure> {
    presets::get(name).ok_or_else(|| {
        config_error(anyhow::anyhow!(
            "unknown preset {name:?}; available: {}",
            presets::names().join(", ")
        ))
    })
}

fn load_config_list(path: &Path) -> Result<Vec<ExperimentConfig>, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Config)?;
    let raw: Vec<serde_json::Value> = serde_json::from_str(&text)
        .with_context(|| format!("{} must hold a JSON array of configs", path.display()))
        .map_err(Failure::Config)?;
    raw.iter()
        .enumerate()
        .map(|(i, v)| {
            ExperimentConfig::from_json(&v.to_string()).map_err(|e| {
                let prefixed = ConfigErrors(
                    e.0.into_iter()
                        .map(|mut issue| {
                            issue.path = format!("[{i}].{}", issue.path);
                            issue
                        })
                        .collect(),
                );
                config_error(prefixed)
            })
        })
        .collect()
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            preset,
            seed,
            epochs,
            out,
        } => {
            let mut cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::from_file(&path).map_err(config_error)?,
                (None, Some(name)) => load_preset(&name)?,
                (None, None) => unreachable!("clap requires one of --config and --preset"),
            };
            apply_overrides(&mut cfg, seed, epochs)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = run_to_dir(&cfg, &dir)?;
            let r = &outcome.report;
            println!(
                "{}: {} epochs, train {:.6e}, test {:.6e}, {:.2}s -> {}",
                r.name,
                r.epochs_completed,
                r.final_metrics.train_mse,
                r.final_metrics.test_mse,
                r.runtime_seconds,
                dir.display()
            );
            if let Some(f) = &r.failure {
                return Err(Failure::Runtime(anyhow::anyhow!("run failed: {f}")));
            }
            Ok(())
        }
        Command::Table {
            configs,
            set,
            replicates,
            epochs,
            out,
        } => {
            if replicates == 0 {
                return Err(config_error(anyhow::anyhow!(
                    "--replicates must be at least 1"
                )));
            }
            let mut cfgs = match (configs, set) {
                (Some(path), _) => load_config_list(&path)?,
                (None, Some(name)) => presets::table_set(&name).ok_or_else(|| {
                    config_error(anyhow::anyhow!(
                        "unknown table set {name:?}; use table1 or table2"
                    ))
                })?,
                (None, None) => unreachable!("clap requires one of --configs and --set"),
            };
            for cfg in &mut cfgs {
                apply_overrides(cfg, None, epochs)?;
            }
            let rows = table::build_table(&cfgs, replicates, &out)?;
            table::write_table(&rows, &out)?;
            print!("{}", table::render_text(&rows));
            if rows.iter().any(|r| r.failures > 0) {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "some table cells contain failed runs"
                )));
            }
            Ok(())
        }
        Command::Plot { report, out } => {
            let files = plot::export_runs(&report, &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Presets { show } => {
            match show {
                Some(name) => println!("{}", load_preset(&name)?.to_json()),
                None => {
                    let mut stdout = std::io::stdout().lock();
                    for p in presets::all() {
                        // A closed pipe (e.g. `| head`) is not an error worth reporting.
                        if writeln!(stdout, "{:<22} {}", p.name, p.description).is_err() {
                            break;
                        }
                    }
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
