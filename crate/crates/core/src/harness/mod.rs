//! Experiment runner: configuration, end-to-end runs in every supported
//! mode, metrics sinks and cross-run comparison.

mod config;
mod report;
mod run;

pub use config::{
    load_config, parse_config, ConvSpec, DataConfig, ExperimentConfig, Mode, ModelConfig,
    PartitionConfig, PruningConfig,
};
pub use report::{compare_report, Comparison, ComparisonRow};
pub use run::{
    run_experiment, MetricsEvent, PruneEvent, RunOptions, ExperimentOutput, SummaryReport,
};
