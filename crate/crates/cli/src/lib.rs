//! Library side of the `segqa` command: config files and the four commands
//! (`generate`, `train`, `eval`, `sweep`), usable without spawning the binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_eval, cmd_generate, cmd_sweep, cmd_train, format_table, train_run, EvalOptions, EvalResult, RunOptions,
    Runner, SweepOptions, SweepRow, TrainResult,
};
pub use config::{Data, DataConfig, RunConfig};
pub use error::{CliError, CliResult};
