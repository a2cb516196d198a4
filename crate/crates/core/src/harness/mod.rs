//! Fine-tuning, evaluation, imbalance remedies, cross-subject transfer,
//! experiment orchestration and reporting.

pub mod access;
pub mod config;
pub mod metrics;
pub mod report;
pub mod run;
pub mod synth;
pub mod train;

pub use access::{AccessAudit, AccessEvent, Phase, SubjectPool};
pub use config::{ExperimentConfig, GridSpec, ImbalanceMode, Method, Protocol, ResolvedConfig};
pub use metrics::{evaluate, MetricsBundle};
pub use report::{aggregate_report, Layout};
pub use run::{
    load_results, run_experiment, run_experiment_on, run_fold, run_grid, transfer_experiment, FoldFailure, FoldResult,
    GridOutcome, MeanStd, ResultStore, RunOptions, RunResult, RunSummary,
};
pub use synth::{generate_synthetic, synthesize_subjects, SynthConfig};
pub use train::{class_aware_weights, finetune, two_stage_train, FinetuneOutcome, TrainBudget};
