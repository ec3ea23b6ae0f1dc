//! Library half of the CLI: configuration schema and command
//! implementations, kept separate from argument parsing so integration tests
//! can drive whole experiments in-process.

pub mod commands;
pub mod config;
