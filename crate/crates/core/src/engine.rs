//! Complex event detection over the per-step trace stream.
//!
//! The pattern is a three-stage hierarchy: per-episode averages feed a
//! tumbling-window average, and a stability gate fires when every episode
//! average of a complete window lies within `th_stable` of the window mean.
//! Windows are aligned to absolute episode numbers: window `k` covers
//! episodes `k·x … k·x + x − 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{HistoryKind, HistoryPayload, TracePayload};
use crate::tuner::{is_stable, reward_by_window, CompensatedSum, EpisodeAverage, HyperparameterVector};

/// One agent step as seen by the engine.
pub type TraceEvent = TracePayload;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("ordering violation: episode {episode} step {step} after episode {last_episode} step {last_step}")]
    OrderingViolation {
        episode: u64,
        step: u64,
        last_episode: u64,
        last_step: u64,
    },
    #[error("trace from agent {got:?} on the stream of agent {expected:?}")]
    ForeignAgent { expected: String, got: String },
    #[error("invalid pattern configuration: {0}")]
    InvalidPattern(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    EpisodeAggregate,
    WindowAggregate,
    StableGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    pub window_length: usize,
    pub th_stable: f64,
}

/// A node of the pattern graph; `downstream` consumes this node's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternNode {
    pub kind: PatternKind,
    pub params: PatternParams,
    pub downstream: Vec<PatternNode>,
}

impl PatternNode {
    /// Kinds along the first downstream chain, root first.
    pub fn chain(&self) -> Vec<PatternKind> {
        let mut out = vec![self.kind];
        let mut node = self;
        while let Some(next) = node.downstream.first() {
            out.push(next.kind);
            node = next;
        }
        out
    }
}

/// Builds the episode → window → stability-gate hierarchy. With `x = 3`
/// and `th_stable = 30` this is the stock stability pattern.
pub fn build_listing1_pattern(window_length: usize, th_stable: f64) -> Result<PatternNode, EngineError> {
    if window_length < 1 {
        return Err(EngineError::InvalidPattern("window length must be at least 1".into()));
    }
    if !(th_stable > 0.0 && th_stable.is_finite()) {
        return Err(EngineError::InvalidPattern(format!("th_stable must be > 0, got {th_stable}")));
    }
    let params = PatternParams {
        window_length,
        th_stable,
    };
    let gate = PatternNode {
        kind: PatternKind::StableGate,
        params,
        downstream: vec![],
    };
    let window = PatternNode {
        kind: PatternKind::WindowAggregate,
        params,
        downstream: vec![gate],
    };
    Ok(PatternNode {
        kind: PatternKind::EpisodeAggregate,
        params,
        downstream: vec![window],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ComplexEvent {
    EpisodeAvg {
        episode: u64,
        value: f64,
        gamma: f64,
    },
    WindowAvg {
        window_index: u64,
        first_episode: u64,
        value: f64,
        members: Vec<f64>,
        gamma: f64,
    },
    StableWindow {
        window_index: u64,
        first_episode: u64,
        value: f64,
        members: Vec<f64>,
        gamma: f64,
    },
}

impl ComplexEvent {
    pub fn kind(&self) -> HistoryKind {
        match self {
            ComplexEvent::EpisodeAvg { .. } => HistoryKind::EpisodeAvg,
            ComplexEvent::WindowAvg { .. } => HistoryKind::WindowAvg,
            ComplexEvent::StableWindow { .. } => HistoryKind::StableWindow,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            ComplexEvent::EpisodeAvg { value, .. }
            | ComplexEvent::WindowAvg { value, .. }
            | ComplexEvent::StableWindow { value, .. } => *value,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            ComplexEvent::EpisodeAvg { gamma, .. }
            | ComplexEvent::WindowAvg { gamma, .. }
            | ComplexEvent::StableWindow { gamma, .. } => *gamma,
        }
    }

    pub fn to_payload(&self) -> HistoryPayload {
        match self {
            ComplexEvent::EpisodeAvg { episode, value, gamma } => HistoryPayload {
                kind: HistoryKind::EpisodeAvg,
                episode: Some(*episode),
                window_index: None,
                value: *value,
                members: None,
                gamma: *gamma,
            },
            ComplexEvent::WindowAvg {
                window_index,
                first_episode,
                value,
                members,
                gamma,
            }
            | ComplexEvent::StableWindow {
                window_index,
                first_episode,
                value,
                members,
                gamma,
            } => HistoryPayload {
                kind: self.kind(),
                episode: Some(*first_episode),
                window_index: Some(*window_index),
                value: *value,
                members: Some(members.clone()),
                gamma: *gamma,
            },
        }
    }

    /// Inverse of [`ComplexEvent::to_payload`]. Window events need the
    /// window length to recover the first episode when it is absent.
    pub fn from_payload(p: &HistoryPayload, window_length: usize) -> Result<Self, EngineError> {
        let missing = |f: &str| EngineError::Schema(format!("{:?} without {f}", p.kind));
        Ok(match p.kind {
            HistoryKind::EpisodeAvg => ComplexEvent::EpisodeAvg {
                episode: p.episode.ok_or_else(|| missing("episode"))?,
                value: p.value,
                gamma: p.gamma,
            },
            HistoryKind::WindowAvg | HistoryKind::StableWindow => {
                let window_index = p.window_index.ok_or_else(|| missing("window_index"))?;
                let first_episode = p.episode.unwrap_or(window_index * window_length as u64);
                let members = p.members.clone().unwrap_or_default();
                if p.kind == HistoryKind::StableWindow {
                    if p.members.is_none() {
                        return Err(missing("members"));
                    }
                    ComplexEvent::StableWindow {
                        window_index,
                        first_episode,
                        value: p.value,
                        members,
                        gamma: p.gamma,
                    }
                } else {
                    ComplexEvent::WindowAvg {
                        window_index,
                        first_episode,
                        value: p.value,
                        members,
                        gamma: p.gamma,
                    }
                }
            }
        })
    }
}

#[derive(Debug, Clone)]
struct OpenEpisode {
    episode: u64,
    rewards: CompensatedSum,
    gamma: f64,
}

/// Incremental evaluator for one agent's trace stream.
#[derive(Debug, Clone)]
pub struct StreamEngine {
    pattern: PatternNode,
    params: PatternParams,
    agent: Option<String>,
    last_position: Option<(u64, u64)>,
    open: Option<OpenEpisode>,
    window: Vec<(EpisodeAverage, f64)>,
}

impl StreamEngine {
    pub fn new(pattern: PatternNode) -> Result<Self, EngineError> {
        let expected = [PatternKind::EpisodeAggregate, PatternKind::WindowAggregate, PatternKind::StableGate];
        if pattern.chain() != expected {
            return Err(EngineError::InvalidPattern(format!(
                "expected episode → window → stable-gate chain, got {:?}",
                pattern.chain()
            )));
        }
        let params = pattern.params;
        build_listing1_pattern(params.window_length, params.th_stable)?;
        Ok(Self {
            pattern,
            params,
            agent: None,
            last_position: None,
            open: None,
            window: Vec::with_capacity(params.window_length),
        })
    }

    pub fn with_params(window_length: usize, th_stable: f64) -> Result<Self, EngineError> {
        Self::new(build_listing1_pattern(window_length, th_stable)?)
    }

    pub fn pattern(&self) -> &PatternNode {
        &self.pattern
    }

    pub fn params(&self) -> PatternParams {
        self.params
    }

    /// Consumes one trace event; returns the complex events it completes
    /// in the order episode average, window average, stable window.
    pub fn on_trace(&mut self, event: &TraceEvent) -> Result<Vec<ComplexEvent>, EngineError> {
        match &self.agent {
            Some(agent) if agent != &event.agent => {
                return Err(EngineError::ForeignAgent {
                    expected: agent.clone(),
                    got: event.agent.clone(),
                })
            }
            Some(_) => {}
            None => self.agent = Some(event.agent.clone()),
        }
        let position = (event.episode, event.step);
        if let Some(last) = self.last_position {
            if position <= last {
                return Err(EngineError::OrderingViolation {
                    episode: event.episode,
                    step: event.step,
                    last_episode: last.0,
                    last_step: last.1,
                });
            }
        }
        self.last_position = Some(position);

        let mut out = Vec::new();
        if self.open.as_ref().is_some_and(|o| o.episode != event.episode) {
            self.close_episode(&mut out);
        }
        let open = self.open.get_or_insert_with(|| OpenEpisode {
            episode: event.episode,
            rewards: CompensatedSum::new(),
            gamma: event.gamma,
        });
        open.rewards.add(event.reward);
        open.gamma = event.gamma;
        Ok(out)
    }

    /// Closes the last open episode. A trailing partial window is dropped.
    pub fn flush_end_of_run(&mut self) -> Vec<ComplexEvent> {
        let mut out = Vec::new();
        self.close_episode(&mut out);
        self.window.clear();
        out
    }

    fn close_episode(&mut self, out: &mut Vec<ComplexEvent>) {
        let Some(open) = self.open.take() else {
            return;
        };
        let avg = EpisodeAverage {
            episode: open.episode,
            r_e: open.rewards.mean().expect("open episodes have at least one step"),
            step_count: open.rewards.count(),
        };
        out.push(ComplexEvent::EpisodeAvg {
            episode: avg.episode,
            value: avg.r_e,
            gamma: open.gamma,
        });

        let x = self.params.window_length as u64;
        let window_index = avg.episode / x;
        if self.window.first().is_some_and(|(first, _)| first.episode / x != window_index) {
            // a missing episode left the previous window incomplete
            self.window.clear();
        }
        self.window.push((avg, open.gamma));
        if self.window.len() as u64 == x {
            let averages: Vec<_> = self.window.iter().map(|(a, _)| a.clone()).collect();
            let gamma = self.window.last().map(|(_, g)| *g).unwrap_or(open.gamma);
            let lambda = HyperparameterVector::new(gamma, Default::default(), (0.0, 1.0));
            self.window.clear();
            let summary = match reward_by_window(window_index, &averages, x as usize, lambda) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("dropping window {window_index}: {e}");
                    return;
                }
            };
            let members: Vec<f64> = summary.members().collect();
            out.push(ComplexEvent::WindowAvg {
                window_index,
                first_episode: summary.first_episode,
                value: summary.r_win,
                members: members.clone(),
                gamma,
            });
            if is_stable(&summary, self.params.th_stable) {
                out.push(ComplexEvent::StableWindow {
                    window_index,
                    first_episode: summary.first_episode,
                    value: summary.r_win,
                    members,
                    gamma,
                });
            }
        }
    }
}
