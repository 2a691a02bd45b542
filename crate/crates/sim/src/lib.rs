//! Experiment engine, file formats and dynamics verification suite for the
//! `fsdadmm` command-line tool.

pub mod config;
pub mod engine;
pub mod formats;
pub mod verify;

pub use config::{AlgorithmName, ConfigError, ExperimentConfig};
pub use engine::{run_experiment, run_in_memory, sweep, EngineError, RunOutcome, SweepGrid};
