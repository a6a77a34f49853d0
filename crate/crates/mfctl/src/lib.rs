//! File formats, reports and subcommands behind the `mfctl` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod report;

pub use commands::{run, BackendKind, Command, Outcome, RunConfig};
