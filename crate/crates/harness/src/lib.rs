//! Experiment harness for `kcd-core`: JSONL datasets, TOML experiment
//! configs, a parallel batch runner, CSV/JSON reports, a completion-API
//! client for remote models and a local mock of that API.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod mock;
pub mod remote;
pub mod report;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig, ScorerSpec, Strategy};
pub use runner::{run_experiment, Experiment, RunError, RunOutcome};
