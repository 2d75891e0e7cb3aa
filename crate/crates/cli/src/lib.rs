//! Experiment runner around the core engine: configuration files, the
//! `train` / `sweep` / `exploit` / `oracle-check` / `report` subcommands,
//! and their output formats (JSONL histories, CSV summaries, SVG plots,
//! binary checkpoints).

pub mod config;
pub mod oracle_check;
pub mod plot;
pub mod runner;

/// Process exit codes: configuration problems, runtime failures, and failed
/// oracle checks are distinguishable by the caller.
pub mod exit_codes {
    pub const OK: i32 = 0;
    pub const CONFIG_ERROR: i32 = 2;
    pub const RUNTIME_ERROR: i32 = 3;
    pub const ORACLE_CHECK_FAILED: i32 = 4;
}
