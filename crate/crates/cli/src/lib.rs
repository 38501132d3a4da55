//! Experiment runner: single runs, comparison matrices and history queries.

pub mod compare;
pub mod config;
pub mod query;
pub mod run;
pub mod stats;

pub use histune_core::{bus, engine, graph, harness, pipeline, tuner};

pub use compare::{cmd_compare, final_quartile_mean, ComparisonResult, MatrixSpec};
pub use config::{RunConfig, ThresholdMode, TunerKind};
pub use query::{best, cmd_query, reconstruct_gammas, Best, Query};
pub use run::{cmd_run, RunArtifacts};
pub use stats::SummaryStats;

use histune_core::bus::BusError;
use histune_core::harness::HarnessError;
use histune_core::pipeline::PipelineError;
use histune_core::tuner::TunerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("bus unavailable: {0}")]
    BusUnavailable(String),
    #[error("component failure: {0}")]
    Component(String),
    #[error("partial matrix: {0}")]
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Component(_) => 3,
            CliError::Partial(_) => 4,
            CliError::BusUnavailable(_) => 5,
        }
    }

    pub(crate) fn io(context: &str, e: impl std::fmt::Display) -> Self {
        CliError::Component(format!("{context}: {e}"))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Bus(BusError::Transport(m)) => CliError::BusUnavailable(m),
            PipelineError::Harness(HarnessError::Config(m)) => CliError::Config(m),
            PipelineError::Tuner(e @ TunerError::InvalidConfig(_)) => CliError::Config(e.to_string()),
            other => CliError::Component(other.to_string()),
        }
    }
}
