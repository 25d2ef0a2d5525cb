//! Files, configuration and the command implementations behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
