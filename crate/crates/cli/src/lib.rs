//! Command-line driver: configuration, run orchestration and result files.

pub mod commands;
pub mod config;
pub mod pixmap;

pub use config::{parse_config, RunConfig, DEFAULT_SEEDS};
