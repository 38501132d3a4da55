//! Reward aggregation over episodes and tumbling windows, and the stability
//! predicate evaluated on each window.

use serde::{Deserialize, Serialize};

use super::{HyperparameterVector, TunerError};

/// Neumaier-compensated running sum.
///
/// Keeps long episodes (thousands of steps) within 1e-9 relative of a
/// two-pass mean without buffering the samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
    count: u64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean of the accumulated values, `None` when nothing was added.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total() / self.count as f64)
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Compensated arithmetic mean; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    values.iter().copied().collect::<CompensatedSum>().mean()
}

/// Mean per-step reward of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAverage {
    pub episode: u64,
    pub r_e: f64,
    pub step_count: u64,
}

/// One tumbling window of `x` consecutive episode averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window_index: u64,
    pub first_episode: u64,
    pub episode_averages: Vec<EpisodeAverage>,
    pub r_win: f64,
    pub lambda_at_window: HyperparameterVector,
}

impl WindowSummary {
    pub fn members(&self) -> impl Iterator<Item = f64> + '_ {
        self.episode_averages.iter().map(|e| e.r_e)
    }

    pub fn last_episode(&self) -> u64 {
        self.first_episode + self.episode_averages.len() as u64 - 1
    }
}

/// Averages the per-step rewards of one episode.
pub fn reward_by_episode(episode: u64, step_rewards: &[f64]) -> Result<EpisodeAverage, TunerError> {
    let acc: CompensatedSum = step_rewards.iter().copied().collect();
    let r_e = acc.mean().ok_or(TunerError::EmptyEpisode { episode })?;
    Ok(EpisodeAverage {
        episode,
        r_e,
        step_count: acc.count(),
    })
}

/// Builds the summary of a complete window. The averages must be exactly
/// `x` entries with consecutive episode indices.
pub fn reward_by_window(
    window_index: u64,
    episode_averages: &[EpisodeAverage],
    x: usize,
    lambda: HyperparameterVector,
) -> Result<WindowSummary, TunerError> {
    if x == 0 || episode_averages.len() != x {
        return Err(TunerError::MalformedWindow(format!(
            "expected {x} episode averages, got {}",
            episode_averages.len()
        )));
    }
    for pair in episode_averages.windows(2) {
        if pair[1].episode != pair[0].episode + 1 {
            return Err(TunerError::MalformedWindow(format!(
                "episode {} does not follow episode {}",
                pair[1].episode, pair[0].episode
            )));
        }
    }
    let r_win = episode_averages
        .iter()
        .map(|e| e.r_e)
        .collect::<CompensatedSum>()
        .mean()
        .expect("non-empty window");
    Ok(WindowSummary {
        window_index,
        first_episode: episode_averages[0].episode,
        episode_averages: episode_averages.to_vec(),
        r_win,
        lambda_at_window: lambda,
    })
}

/// True iff every episode average lies strictly closer than `th_stable` to
/// the window mean.
pub fn is_stable(window: &WindowSummary, th_stable: f64) -> bool {
    window
        .members()
        .all(|r_e| (r_e - window.r_win).abs() < th_stable)
}
