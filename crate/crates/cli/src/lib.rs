//! Configuration, checkpoints and the subcommands behind the `omreid`
//! binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
