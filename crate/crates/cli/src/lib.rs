//! Configuration, experiment drivers and output formats behind the `holdout`
//! binary.

pub mod config;
pub mod experiment;
pub mod sweep;

pub use config::{ExperimentConfig, Variant};
pub use experiment::{run_experiment, Summary, CSV_COLUMNS};
pub use sweep::{run_sweep, Axis};
