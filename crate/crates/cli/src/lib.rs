//! Command-line front end for the equilibrium solver: config parsing,
//! command dispatch and artifact export.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run_compare, run_solve, run_verify, Overrides};
pub use config::{parse_config, RunConfig};
pub use error::CliError;
