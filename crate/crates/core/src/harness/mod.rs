//! Experiment orchestration: configuration, deterministic seeding, training
//! and evaluation runs, ablations, task-count sweeps, cross-domain transfer,
//! the lemma checks, and metric aggregation with 95% intervals.
//!
//! Under a training seed `s`, every random choice comes from
//! `substream(s, path)` with a fixed path per purpose (see [`STREAM_INIT`] and
//! friends), so runs, seeds and episodes can execute in any order.

mod config;
mod experiments;
mod metrics;
mod presets;
mod run;
mod theory;

use thiserror::Error;

use crate::learners::LearnError;
use crate::mlti::MixError;
use crate::taskgen::BankError;
use crate::theorylab::TheoryError;

pub use config::{apply_override, Learner, RunConfig, SweepConfig, TheoryConfig, SCHEMA_VERSION};
pub use experiments::{
    ablation, condition_config, cross_domain, sweep_csv, sweep_svg, sweep_tasks, write_sweep,
    ComparisonOutput, SweepOutput, SweepPoint, CONDITIONS, SWEEP_HEADER,
};
pub use metrics::{
    format_value, mean_ci95, metrics_csv, parse_metrics_csv, pooled, summarize, summary_csv,
    MetricsRecord, Phase, Summary, METRICS_HEADER, SUMMARY_HEADER,
};
pub use presets::{preset, PRESETS};
pub use run::{
    check_compatible, evaluate_model, init_model, metric_kind, run_experiment, run_on_banks,
    train_model, write_run, write_tables, RunOutput, STREAM_INIT, STREAM_MIX, STREAM_TEST,
    STREAM_TRAIN,
};
pub use theory::{run_theory, variance_instance, write_theory, TheoryOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("summary: {0}")]
    Summary(String),
    #[error("run {run_id}, seed {seed}: {source}")]
    Run {
        run_id: String,
        seed: u64,
        #[source]
        source: LearnError,
    },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}
