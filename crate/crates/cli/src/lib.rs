//! Command-line pipeline: simulate, generate datasets, train, evaluate and
//! calibrate single frames.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli};
pub use config::RunConfig;
pub use error::CliError;
