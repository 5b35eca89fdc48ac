//! Selective classification driven by training dynamics.
//!
//! A classifier is trained while its predictions on an evaluation split are
//! recorded at a fixed cadence of optimizer steps. The resulting
//! [`PredictionTrace`] is the only input the scoring, dynamics and selective
//! evaluation layers ever see: points whose intermediate predictions keep
//! disagreeing with the final model late in training are rejected first.
//!
//! Modules:
//!
//! - [`trace`]: the checkpoint prediction record and its on-disk format.
//! - [`trainer`]: a small fully connected network trainer and dataset readers.
//! - [`scores`]: disagreement-based scores and the softmax-response baseline.
//! - [`dynamics`]: per-checkpoint disagreement statistics and the Markov bound.
//! - [`selective`]: gating, risk-coverage curves and threshold calibration.

pub mod dynamics;
pub mod scores;
pub mod selective;
pub mod trace;
pub mod trainer;

pub use dynamics::{estimate_dynamics, markov_bound, simulate_disagreement_process, DynamicsError, DynamicsProfile};
pub use scores::{
    continuous_metric, score_avg, score_jump, score_min, score_trace, score_var, softmax_response,
    weight_schedule, EtModel, MetricKind, ScoreError, ScoreMethod, ScoredSet, WeightSchedule,
};
pub use selective::{
    auroc, calibrate_for_coverage, calibrate_for_error, coverage_accuracy, gate, risk_coverage_curve,
    Calibration, CurvePoint, RiskCoverageCurve, SelectiveError, SelectiveResult,
};
pub use trace::{
    disagreement_vector, read_trace, subsample_checkpoints, write_trace, DisagreementVector,
    PredictionTrace, TraceError,
};
pub use trainer::{
    load_dataset, synth_dataset, train, Activation, Dataset, DatasetError, DatasetFormat, LrSchedule,
    Model, OptimizerKind, SynthSpec, TrainConfig, TrainError,
};
