//! Experiment runner for ensemble Kalman training of neural ODEs: JSON configs, built-in
//! presets, per-epoch logs, run reports, replicated tables and plot exports.

pub mod config;
pub mod plot;
pub mod presets;
pub mod runner;
pub mod table;

pub use config::ExperimentConfig;
pub use runner::{evaluate, run, run_to_dir, RunError, RunOutcome, RunReport};
