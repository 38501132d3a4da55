//! Tuner kinds × seeds comparison matrix.
//!
//! Sub-runs use the single-threaded pipeline, which produces the same logs
//! as the threaded one, and are spread over the available cores.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use histune_core::harness::RunLog;
use histune_core::pipeline::run_inline;
use histune_core::tuner::CompensatedSum;

use crate::stats::SummaryStats;
use crate::{CliError, RunConfig, TunerKind};

pub const RAW_CSV: &str = "raw.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const STATS_CSV: &str = "stats.csv";
pub const PARTIAL_MARKER: &str = "PARTIAL";

pub const SWEEP: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone)]
pub struct MatrixSpec {
    pub base: RunConfig,
    pub kinds: Vec<TunerKind>,
    pub seeds: Vec<u64>,
    /// Run every kind from each γ0 in 0.1..0.9 instead of its default start.
    pub sweep: bool,
    pub out: PathBuf,
}

/// One matrix row: a tuner kind with an optional fixed starting γ.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub kind: TunerKind,
    pub initial_gamma: Option<f64>,
}

impl MatrixSpec {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for kind in &self.kinds {
            if self.sweep {
                for g in SWEEP {
                    out.push(Variant {
                        label: format!("{kind}@{g}"),
                        kind: *kind,
                        initial_gamma: Some(g),
                    });
                }
            } else {
                out.push(Variant {
                    label: kind.to_string(),
                    kind: *kind,
                    initial_gamma: self.base.initial_gamma,
                });
            }
        }
        out
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.kinds.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Config("matrix needs at least one tuner kind and one seed".into()));
        }
        self.base.validate()
    }

    fn config_for(&self, variant: &Variant, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            tuner: variant.kind,
            initial_gamma: variant.initial_gamma,
            tcp: false,
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub label: String,
    pub seed: u64,
    pub log: RunLog,
}

#[derive(Debug, Clone)]
pub struct ComparisonResult {
    pub variants: Vec<Variant>,
    pub runs: Vec<SeedRun>,
    /// Pooled per-episode rewards across seeds, per variant label.
    pub stats: BTreeMap<String, SummaryStats>,
    /// Set when a sub-run failed; `runs` then holds what completed.
    pub partial: Option<String>,
}

impl ComparisonResult {
    pub fn runs_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a SeedRun> + 'a {
        self.runs.iter().filter(move |r| r.label == label)
    }

    /// Rewards of `label` for `seed`, if that sub-run completed.
    pub fn rewards(&self, label: &str, seed: u64) -> Option<Vec<f64>> {
        self.runs_of(label).find(|r| r.seed == seed).map(|r| r.log.rewards())
    }
}

/// Mean reward over the last quarter of the episodes.
pub fn final_quartile_mean(rewards: &[f64]) -> f64 {
    let start = rewards.len() * 3 / 4;
    rewards[start..]
        .iter()
        .copied()
        .collect::<CompensatedSum>()
        .mean()
        .unwrap_or(f64::NAN)
}

/// Runs jobs on a small worker pool. After the first failure no new job
/// starts; jobs that never ran come back as `None`.
fn run_all(spec: &MatrixSpec, jobs: &[(Variant, u64)]) -> Vec<Option<Result<RunLog, CliError>>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let results: Mutex<Vec<Option<Result<RunLog, CliError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((variant, seed)) = jobs.get(i) else {
                    return;
                };
                let r = spec
                    .config_for(variant, *seed)
                    .pipeline_config()
                    .and_then(|pc| run_inline(&pc).map_err(CliError::from))
                    .map(|o| o.log);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                results.lock().expect("results poisoned")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results poisoned")
}

fn write_outputs(dir: &Path, result: &ComparisonResult) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    fn csv_err(name: &'static str) -> impl Fn(csv::Error) -> CliError {
        move |e| CliError::io(name, e)
    }

    let mut raw = csv::Writer::from_path(dir.join(RAW_CSV)).map_err(csv_err(RAW_CSV))?;
    raw.write_record(["label", "seed", "episode", "mean_reward", "gamma"])
        .map_err(csv_err(RAW_CSV))?;
    for run in &result.runs {
        for e in &run.log.episodes {
            raw.write_record([
                run.label.clone(),
                run.seed.to_string(),
                e.episode.to_string(),
                e.mean_reward.to_string(),
                e.gamma.to_string(),
            ])
            .map_err(csv_err(RAW_CSV))?;
        }
    }
    raw.flush().map_err(|e| CliError::io(RAW_CSV, e))?;

    let mut curves = csv::Writer::from_path(dir.join(CURVES_CSV)).map_err(csv_err(CURVES_CSV))?;
    curves
        .write_record(["label", "episode", "mean_reward", "seeds"])
        .map_err(csv_err(CURVES_CSV))?;
    for v in &result.variants {
        let mut by_episode: BTreeMap<u64, CompensatedSum> = BTreeMap::new();
        for run in result.runs_of(&v.label) {
            for e in &run.log.episodes {
                by_episode.entry(e.episode).or_default().add(e.mean_reward);
            }
        }
        for (episode, sum) in by_episode {
            curves
                .write_record([
                    v.label.clone(),
                    episode.to_string(),
                    sum.mean().expect("non-empty").to_string(),
                    sum.count().to_string(),
                ])
                .map_err(csv_err(CURVES_CSV))?;
        }
    }
    curves.flush().map_err(|e| CliError::io(CURVES_CSV, e))?;

    let mut stats = csv::Writer::from_path(dir.join(STATS_CSV)).map_err(csv_err(STATS_CSV))?;
    stats
        .write_record(["label", "n", "min", "q1", "median", "q3", "max", "mean"])
        .map_err(csv_err(STATS_CSV))?;
    for v in &result.variants {
        if let Some(s) = result.stats.get(&v.label) {
            stats
                .write_record([
                    v.label.clone(),
                    s.n.to_string(),
                    s.min.to_string(),
                    s.q1.to_string(),
                    s.median.to_string(),
                    s.q3.to_string(),
                    s.max.to_string(),
                    s.mean.to_string(),
                ])
                .map_err(csv_err(STATS_CSV))?;
        }
    }
    stats.flush().map_err(|e| CliError::io(STATS_CSV, e))?;

    let marker = dir.join(PARTIAL_MARKER);
    match &result.partial {
        Some(msg) => fs::write(&marker, format!("{msg}\n")).map_err(|e| CliError::io(PARTIAL_MARKER, e))?,
        None if marker.exists() => fs::remove_file(&marker).map_err(|e| CliError::io(PARTIAL_MARKER, e))?,
        None => {}
    }
    Ok(())
}

/// Runs every (variant, seed) pair, writes `raw.csv`, `curves.csv` and
/// `stats.csv` into `spec.out`, and returns the collected logs.
///
/// The first failing sub-run aborts the matrix: no further sub-run starts,
/// the completed ones are still written, the result is flagged as partial
/// and a `PARTIAL` marker is written next to the CSVs.
pub fn cmd_compare(spec: &MatrixSpec) -> Result<ComparisonResult, CliError> {
    spec.validate()?;
    let variants = spec.variants();
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |s| (v.clone(), *s)))
        .collect();
    let mut runs = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    let mut skipped = 0;
    for ((variant, seed), result) in jobs.iter().zip(run_all(spec, &jobs)) {
        match result {
            Some(Ok(log)) => runs.push(SeedRun {
                label: variant.label.clone(),
                seed: *seed,
                log,
            }),
            Some(Err(e)) => failures.push(format!("{} seed {seed}: {e}", variant.label)),
            None => skipped += 1,
        }
    }
    let mut stats = BTreeMap::new();
    for v in &variants {
        let pooled: Vec<f64> = runs
            .iter()
            .filter(|r| r.label == v.label)
            .flat_map(|r| r.log.rewards())
            .collect();
        if let Some(s) = SummaryStats::from_samples(&pooled) {
            stats.insert(v.label.clone(), s);
        }
    }
    let partial = (!failures.is_empty()).then(|| {
        format!(
            "{} of {} sub-runs failed, {skipped} not started: {}",
            failures.len(),
            jobs.len(),
            failures.join("; ")
        )
    });
    let result = ComparisonResult {
        variants,
        runs,
        stats,
        partial,
    };
    write_outputs(&spec.out, &result)?;
    Ok(result)
}

/// Text table of the summary statistics.
pub fn stats_table(result: &ComparisonResult) -> String {
    let mut out = format!(
        "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "config", "n", "min", "q1", "median", "q3", "max", "mean"
    );
    for v in &result.variants {
        if let Some(s) = result.stats.get(&v.label) {
            out.push_str(&format!(
                "{:<14} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                v.label, s.n, s.min, s.q1, s.median, s.q3, s.max, s.mean
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_expands_every_kind() {
        let spec = MatrixSpec {
            base: RunConfig::default(),
            kinds: vec![TunerKind::Static, TunerKind::History],
            seeds: vec![0],
            sweep: true,
            out: PathBuf::new(),
        };
        let v = spec.variants();
        assert_eq!(v.len(), 18);
        assert_eq!(v[0].label, "static@0.1");
        assert_eq!(v[17].initial_gamma, Some(0.9));
    }

    #[test]
    fn final_quartile_of_hundred_episodes() {
        let r: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(final_quartile_mean(&r), 87.0);
    }
}
