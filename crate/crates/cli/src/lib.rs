//! Library side of the `flowcritic` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod pgm;
pub mod state;

pub use config::RunConfig;
pub use error::{CheckpointError, CliError};
