//! Drivers behind the `dsrt` binary: run configuration, run directories,
//! the training pipeline, ablations and benchmarks.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod rundir;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
