//! Experiment driver: configuration, command execution and gradient checks.

pub mod config;
pub mod gradcheck;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, RunConfig};
pub use runner::{run, Command, Outcome, RunError};
