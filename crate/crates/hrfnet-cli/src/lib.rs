//! Library surface of the command-line tool: config resolution and the
//! subcommand implementations, kept importable so integration tests can
//! drive them without spawning processes.

pub mod commands;
pub mod config;
