//! Experiment driver: run configuration and subcommands.

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig, TaskKind};

/// Process exit status for an error: 2 for I/O, 1 for everything else.
pub fn exit_code(err: &latentkv::Error) -> i32 {
    if err.is_io() {
        2
    } else {
        1
    }
}
