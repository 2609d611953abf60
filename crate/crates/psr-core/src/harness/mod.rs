//! Experiment orchestration: configuration, threat-model evaluation,
//! reporting and the end-to-end pipeline.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use eval::{clean_accuracy, robust_accuracy, run_transfer_eval, RobustStats, ThreatKind, TransferRow};
pub use pipeline::run_pipeline;
pub use report::{EvalRow, ModelSummary, RobustnessReport};
