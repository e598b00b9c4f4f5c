//! Configuration parsing and subcommands of the `spgi` binary.

pub mod commands;
pub mod config;
