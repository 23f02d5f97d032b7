//! Command-line orchestration for the ntkrl laboratory: configuration,
//! run directories and the subcommands.

pub mod commands;
pub mod config;
pub mod rundir;
