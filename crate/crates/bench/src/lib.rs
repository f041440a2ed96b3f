//! Synthetic tasks, parameter counting and the experiment grid runner.

pub mod config;
pub mod error;
pub mod experiment;
pub mod params;
pub mod report;
pub mod task;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{BenchError, Result};
pub use experiment::{run_experiment, ExperimentReport};
pub use report::{compare_methods, Direction, Row};
