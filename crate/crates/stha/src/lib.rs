//! File formats, checkpoints, plots and the `stha` command line on top of
//! [`stha_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod plot;
pub mod report;

pub use error::{CliError, Result};
