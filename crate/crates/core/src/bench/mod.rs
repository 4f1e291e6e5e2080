//! Configuration-driven experiments and comparison reports.

pub mod compare;
pub mod config;
pub mod runner;

pub use compare::{compare, relative_delta, render_report, round_half_away, ComparisonRow, MetricSummary, ReportFormat};
pub use config::{ExperimentConfig, ModelConfig, ModelKind, DATA_ENV};
pub use runner::{
    load_dataset, prepare_for_seed, tune_seed,
    run_experiment, run_experiment_with, Aggregate, ExperimentOutcome, ExperimentRecord, RunMode, RunOptions, SeedRecord,
    Stat,
};
