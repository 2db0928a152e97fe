//! Experiment configuration, the multi-seed runner, and result statistics.

mod config;
mod run;
mod stats;

pub use config::{DataSpec, ExperimentConfig, GridSpec, ModelSpec, TaskKind};
pub use run::{prepare_data, record_path, run, run_seed, RunRecord};
pub use stats::{compare, curves, mean_std, paired_z, two_proportion_z, Comparison, RoundSummary, ZTest};
