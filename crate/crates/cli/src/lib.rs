//! Config-file driven runner for fedlab experiments: `run` for a single
//! experiment, `compare` for algorithm × seed sweeps.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{compare_command, exit_code, run_command, RunOptions};
pub use config::{parse_config, ComparisonSpec, ParsedConfig};
