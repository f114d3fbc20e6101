//! Command-line layer: configuration, subcommands, reports and plots.

pub mod commands;
pub mod config;
pub mod svg;
