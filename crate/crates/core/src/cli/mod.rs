//! Experiment driver behind the `zselect` binary: train, eval, distort.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_distort, cmd_eval, cmd_train, run, EvalOutcome, OperatingPoint, TrainOutcome, CLEAN,
};
pub use config::{
    merge, parse_blob_spec, parse_config_file, Command, DataSource, DistortedPolicy,
    MethodSelection, RunConfig, SrSource,
};

/// Printed by `--version`.
pub const VERSION_LINE: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint format ZSELMDL1, dataset format ZSELDS1, score matrix CSV v1)"
);
