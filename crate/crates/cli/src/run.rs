//! One lifetime with all components wired together.

use std::fs;
use std::path::PathBuf;

use histune_core::harness::RunLog;
use histune_core::pipeline::run_pipeline;

use crate::query::{best, Best};
use crate::{CliError, RunConfig};

pub const REWARDS_CSV: &str = "rewards.csv";
pub const COMMIT_LOG: &str = "history.htgl";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub rewards_csv: PathBuf,
    pub commit_log: PathBuf,
    pub config_copy: PathBuf,
    pub log: RunLog,
    pub best: Option<Best>,
    pub stable_windows: usize,
}

/// Runs the configured lifetime and writes `rewards.csv`, the graph commit
/// log and a resolved copy of the configuration into `config.out`.
pub fn cmd_run(config: &RunConfig) -> Result<RunArtifacts, CliError> {
    let mut pipeline = config.pipeline_config()?;
    let dir = config.out.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    let commit_log = dir.join(COMMIT_LOG);
    pipeline.commit_log = Some(commit_log.clone());

    let out = run_pipeline(&pipeline)?;
    log::info!(
        "run finished: {} episodes, {} history events, {} graph nodes",
        out.log.episodes.len(),
        out.history_events,
        out.graph.node_count()
    );

    let rewards_csv = dir.join(REWARDS_CSV);
    let file = fs::File::create(&rewards_csv).map_err(|e| CliError::io(REWARDS_CSV, e))?;
    out.log.write_csv(file).map_err(|e| CliError::io(REWARDS_CSV, e))?;

    let resolved = RunConfig {
        initial_gamma: Some(pipeline.training.initial_gamma),
        ..config.clone()
    };
    let config_copy = dir.join(CONFIG_COPY);
    fs::write(&config_copy, resolved.to_text()).map_err(|e| CliError::io(CONFIG_COPY, e))?;

    let stable_windows = out
        .graph
        .nodes_of_kind(histune_core::graph::NodeKind::TuningRecord)
        .len();
    Ok(RunArtifacts {
        best: best(&out.graph)?,
        dir,
        rewards_csv,
        commit_log,
        config_copy,
        log: out.log,
        stable_windows,
    })
}
