//! Harness behind the `cor` binary. Each `cmd_*` function takes the effective
//! [`RunConfig`], writes its outputs plus a config snapshot, and returns the
//! rows it wrote so callers can check them directly.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod report;

pub use ablation::{cmd_ablate, AblationRow};
pub use commands::{cmd_complexity, cmd_eval, cmd_run, cmd_synth, cmd_train_dd, EvalRow, RunReport, TrainSummary};
pub use config::RunConfig;
