//! History-aware epsilon-greedy tuning of the discount factor.
//!
//! Rewards are averaged per episode, episode averages are grouped into
//! tumbling windows of `x` episodes, and a window whose members all sit
//! within `th_stable` of the window mean is *stable*. Only stable windows
//! reach [`hpo_step`]: a window that beats the best known window reward is
//! recorded as the new maximum and the current discount factor is kept,
//! anything else triggers [`xi_explore`].
//!
//! Everything here is pure: state goes in, state comes out, randomness is
//! drawn from a caller-supplied seeded source.

mod hpo;
mod reward;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hpo::{
    hpo_step, optimal_lambda, xi_explore, DecisionKind, Direction, ExplorationMove, Tuner,
    TunerState, TuningDecision,
};
pub use reward::{
    is_stable, mean, reward_by_episode, reward_by_window, CompensatedSum, EpisodeAverage,
    WindowSummary,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TunerError {
    #[error("empty episode: episode {episode} has no steps")]
    EmptyEpisode { episode: u64 },
    #[error("malformed window: {0}")]
    MalformedWindow(String),
    #[error("invalid tuner configuration: {0}")]
    InvalidConfig(String),
}

/// Closed interval the tuned discount factor is clamped into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaBounds {
    pub min: f64,
    pub max: f64,
}

impl GammaBounds {
    pub fn new(min: f64, max: f64) -> Result<Self, TunerError> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(TunerError::InvalidConfig(format!(
                "gamma bounds must satisfy min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn clamp(&self, gamma: f64) -> f64 {
        gamma.clamp(self.min, self.max)
    }

    pub fn contains(&self, gamma: f64) -> bool {
        (self.min..=self.max).contains(&gamma)
    }
}

impl Default for GammaBounds {
    fn default() -> Self {
        Self {
            min: 0.01,
            max: 0.99,
        }
    }
}

impl From<(f64, f64)> for GammaBounds {
    fn from((min, max): (f64, f64)) -> Self {
        Self { min, max }
    }
}

/// The tuned discount factor together with the hyperparameters that stay
/// fixed for the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterVector {
    gamma: f64,
    kappa: BTreeMap<String, f64>,
}

impl HyperparameterVector {
    /// Builds a vector, clamping `gamma` into `bounds`.
    pub fn new(gamma: f64, kappa: BTreeMap<String, f64>, bounds: impl Into<GammaBounds>) -> Self {
        Self {
            gamma: bounds.into().clamp(gamma),
            kappa,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kappa(&self) -> &BTreeMap<String, f64> {
        &self.kappa
    }

    /// Same fixed hyperparameters, new (clamped) discount factor.
    pub fn with_gamma(&self, gamma: f64, bounds: impl Into<GammaBounds>) -> Self {
        Self {
            gamma: bounds.into().clamp(gamma),
            kappa: self.kappa.clone(),
        }
    }
}

impl fmt::Display for HyperparameterVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "λ(γ={}", self.gamma)?;
        for (k, v) in &self.kappa {
            write!(f, ", {k}={v}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    /// Episodes per tumbling window.
    pub window_length: usize,
    /// Maximum deviation (reward units) of an episode average from its
    /// window mean for the window to count as stable.
    pub th_stable: f64,
    /// Probability of exploring instead of returning to the best known λ.
    pub epsilon: f64,
    /// Increment used by directed exploration moves.
    pub step_c: f64,
    pub bounds: GammaBounds,
    /// Share of exploration moves that ignore the direction hint and
    /// sample uniformly inside the bounds.
    pub p_random: f64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            window_length: 3,
            th_stable: 30.0,
            epsilon: 0.3,
            step_c: 0.1,
            bounds: GammaBounds::default(),
            p_random: 0.2,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<(), TunerError> {
        let bad = |msg: String| Err(TunerError::InvalidConfig(msg));
        if self.window_length < 1 {
            return bad("window length must be at least 1".into());
        }
        if !(self.th_stable > 0.0 && self.th_stable.is_finite()) {
            return bad(format!("th_stable must be > 0, got {}", self.th_stable));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if !(self.step_c > 0.0 && self.step_c.is_finite()) {
            return bad(format!("step c must be > 0, got {}", self.step_c));
        }
        if !(0.0..=1.0).contains(&self.p_random) {
            return bad(format!("p_random must be in [0, 1], got {}", self.p_random));
        }
        GammaBounds::new(self.bounds.min, self.bounds.max)?;
        Ok(())
    }
}
