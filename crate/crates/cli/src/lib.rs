//! Experiment harness behind the `tubelet` binary.

pub mod config;
pub mod experiment;

pub use config::{toy_model, DataConfig, EvalConfig, ExperimentConfig};
pub use experiment::{ablate, evaluate_records, run_eval, run_experiment, run_train, AblationAxis, AblationRow, EvalSummary};
