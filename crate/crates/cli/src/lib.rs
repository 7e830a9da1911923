//! Command-line front end: configuration, dataset files and subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod palette;

pub use commands::run_cli;
