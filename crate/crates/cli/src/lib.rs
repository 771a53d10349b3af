//! Command-line front end and desk-scale experiments: template, search,
//! desensitization, training, federated simulation, evaluation and reports.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

pub use error::{CliError, ExitClass, Result};
