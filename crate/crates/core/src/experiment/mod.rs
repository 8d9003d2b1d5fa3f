//! Config files, named presets, plan execution and result emission.

mod config;
mod emit;
mod preset;
mod run;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::train::TrainError;

pub use config::{config_hash, load_config, parse_config, to_toml};
pub use emit::{
    comparison_table, format_sig6, read_results_csv, result_rows, summarize_entries, sweep_rows,
    write_outputs, write_results_csv, write_sweep_csv, ClassEntry, EntrySummary, ResultRow,
    SweepRow, RESULT_COLUMNS, SWEEP_COLUMNS,
};
pub use preset::{
    Plan, PlanEntry, Preset, PresetOptions, SweepAxis, SweepSpec, DEFAULT_BATCH_GRID,
    DEFAULT_RATIO_GRID,
};
pub use run::{execute_plan, ExecutedPlan, RunCache};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("results file: {0}")]
    Results(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExperimentError {
    /// Process exit code: 2 for usage and config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::UnknownPreset(_) => 2,
            ExperimentError::Train(
                TrainError::Config(_) | TrainError::Data(DataError::InvalidSpec(_)),
            ) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.into(),
            source,
        }
    }
}
