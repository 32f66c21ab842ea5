//! Experiment commands, run configuration, reporting and charts.

pub mod baselines;
pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

pub use baselines::{published, BaselineConstants, MethodNumbers, PublishedBlock, PUBLISHED_KEYS};
pub use commands::{
    cmd_block_accuracy, cmd_block_importance, cmd_run_ga, hardware_descriptor, pretrained_model, target_prototype,
    ArtifactEntry, ArtifactIndex, BlockAccuracyReport, BlockImportanceOptions, RunGaOptions, RunGaOutcome, RunInfo,
    RunLock, RunSummary,
};
pub use config::{cache_dir, BaselineRef, ModelConfig, RunConfig};
pub use report::{cmd_plot, cmd_report, spearman, ReportOutput};
