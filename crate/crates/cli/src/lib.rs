//! Library half of the `msdamil` command: configuration parsing and the
//! subcommand implementations, kept here so they can be tested in-process.

pub mod commands;
pub mod config;
