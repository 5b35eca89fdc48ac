//! End-to-end experiment pipeline: train, trace, score, dynamics,
//! calibrate/evaluate and sweep studies. The `dynsel` binary is a thin clap
//! front end over the `cmd_*` functions exported here.

pub mod config;
pub mod pipeline;
pub mod report;

use thiserror::Error;

pub use config::{DatasetSpec, EvaluationSettings, ExperimentConfig, Protocol, ScoreSettings, Splits, SweepSettings};
pub use pipeline::{
    cmd_dynamics, cmd_evaluate, cmd_run, cmd_score, cmd_sweep, cmd_trace_export, cmd_train, evaluate_sets,
    load_scored_set, prepare_data, score_methods, PreparedData, RunMetadata, TrainOutcome,
};
pub use report::{MethodReport, Report, ReportRow, SweepReport, SweepRow, SweepSummaryRow};

/// Pipeline failure, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input; exit code 1.
    #[error("validation error: {0}")]
    Validation(String),
    /// Failure during compute or I/O; exit code 2.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    csv::Error,
    dynsel_core::TrainError,
    dynsel_core::TraceError,
    dynsel_core::DatasetError,
    dynsel_core::SelectiveError,
    dynsel_core::DynamicsError
);

impl From<dynsel_core::ScoreError> for CliError {
    fn from(e: dynsel_core::ScoreError) -> Self {
        use dynsel_core::ScoreError as E;
        match e {
            E::MissingProbabilities(_) | E::Parse { .. } | E::BadExponent(_) | E::BadEt(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}
