//! Experiment runner behind the `akl` command-line tool.

pub mod config;
pub mod emit;
pub mod run;

pub use config::{ConfigFile, Experiment, ExperimentConfig, Overrides, SequenceSettings};
pub use emit::{emit_results, OutputFormat};
pub use run::{execute, run_experiment, ExperimentOutput, Summary};
