//! Benchmark harness for the gradient estimators in `rebar-core`: datasets,
//! run configuration, training and variance-probe loops, and telemetry.

pub mod checks;
pub mod config;
pub mod data;
pub mod runner;
pub mod telemetry;

pub use config::{RunConfig, Task};
pub use runner::{run_eval, run_training, run_variance_probe, RunOutput};
