//! Command-line pipeline: dataset generation, training, evaluation,
//! attention ablations and single-sequence utilities, with the on-disk
//! dataset and checkpoint formats they exchange.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::{Family, RunConfig};
pub use error::{CliError, ExitCode};
