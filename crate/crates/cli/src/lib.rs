//! Experiment runner: dataset generation, federated and baseline runs,
//! ablations, evaluation of saved runs, and CSV/SVG reporting.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use error::{CliError, Result};
