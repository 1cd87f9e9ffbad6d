//! Command-line experiment driver. Every subcommand is also callable as a
//! library function so the acceptance suite can run protocols in-process.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod plot;
pub mod report;
