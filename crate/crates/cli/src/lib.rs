//! Command-line front end for the modular-composition experiments.

pub mod check;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod report;
pub mod run;
pub mod sweep;

pub use error::{CliError, CliResult};
