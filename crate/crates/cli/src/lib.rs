//! Experiment harness around `card-core`: configuration, the subcommands,
//! and the files they write.

pub mod commands;
pub mod config;
pub mod io;
pub mod stats;

pub use config::RunConfig;
