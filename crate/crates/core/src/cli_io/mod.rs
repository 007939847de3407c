//! Configuration, file formats and subcommand drivers.

pub mod commands;
pub mod config;
pub mod files;

pub use commands::{run, Command};
pub use config::{parse_config, RunConfig, KEYS};
