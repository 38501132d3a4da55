//! Topic-based publish/subscribe hub.
//!
//! [`Bus`] is the in-process broker; [`tcp`] carries the same envelopes over
//! a stream socket as one JSON object per line.

mod broker;
pub mod tcp;
mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use broker::{Bus, Clock, Subscription, DEFAULT_QUEUE_CAPACITY};
pub use wire::{decode, encode};

pub const RL_TRACES: &str = "rl-traces";
pub const HISTORY_AWARENESS: &str = "history-awareness";
pub const FEEDBACK: &str = "feedback";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BusError {
    #[error("bus closed")]
    Closed,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("transport error: {0}")]
    Transport(String),
}

impl From<std::io::Error> for BusError {
    fn from(err: std::io::Error) -> Self {
        BusError::Transport(err.to_string())
    }
}

/// Case-sensitive topic name without newlines.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Topic(String);

impl Topic {
    pub fn new(name: impl Into<String>) -> Result<Self, BusError> {
        let name = name.into();
        if name.is_empty() {
            return Err(BusError::SchemaViolation("empty topic name".into()));
        }
        if name.contains('\n') {
            return Err(BusError::SchemaViolation("topic name contains a newline".into()));
        }
        Ok(Topic(name))
    }

    pub fn rl_traces() -> Self {
        Topic(RL_TRACES.into())
    }

    pub fn history_awareness() -> Self {
        Topic(HISTORY_AWARENESS.into())
    }

    pub fn feedback() -> Self {
        Topic(FEEDBACK.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Topic {
    type Error = BusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Topic::new(value)
    }
}

impl From<Topic> for String {
    fn from(t: Topic) -> String {
        t.0
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One agent step on the `rl-traces` topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePayload {
    pub agent: String,
    pub episode: u64,
    pub step: u64,
    pub reward: f64,
    pub action: String,
    pub state: String,
    pub qvalues: Vec<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKind {
    EpisodeAvg,
    WindowAvg,
    StableWindow,
}

/// A complex event on the `history-awareness` topic.
///
/// `episode` is the closed episode for `episode_avg` and the first episode of
/// the window for the window kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPayload {
    pub kind: HistoryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_index: Option<u64>,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<f64>>,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    SetHyperparameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackDecision {
    NewMax,
    ReturnToMax,
    Random,
    Increment,
    Decrement,
}

impl FeedbackDecision {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackDecision::NewMax => "new_max",
            FeedbackDecision::ReturnToMax => "return_to_max",
            FeedbackDecision::Random => "random",
            FeedbackDecision::Increment => "increment",
            FeedbackDecision::Decrement => "decrement",
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        Some(match label {
            "new_max" => FeedbackDecision::NewMax,
            "return_to_max" => FeedbackDecision::ReturnToMax,
            "random" => FeedbackDecision::Random,
            "increment" => FeedbackDecision::Increment,
            "decrement" => FeedbackDecision::Decrement,
            _ => return None,
        })
    }
}

impl fmt::Display for FeedbackDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameter suggestion on the `feedback` topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPayload {
    pub kind: FeedbackKind,
    pub name: String,
    pub value: f64,
    pub effective_episode: u64,
    pub decision: FeedbackDecision,
}

impl FeedbackPayload {
    pub fn set_gamma(value: f64, effective_episode: u64, decision: FeedbackDecision) -> Self {
        Self {
            kind: FeedbackKind::SetHyperparameter,
            name: "gamma".into(),
            value,
            effective_episode,
            decision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Payload {
    Trace(TracePayload),
    History(HistoryPayload),
    Feedback(FeedbackPayload),
    /// Free-form object for user topics.
    Custom(Map<String, Value>),
}

impl Payload {
    /// Checks the payload against the schema of `topic`.
    pub fn validate_for(&self, topic: &Topic) -> Result<(), BusError> {
        let ok = match (topic.as_str(), self) {
            (RL_TRACES, Payload::Trace(t)) => {
                check_finite("reward", t.reward)?;
                check_finite("gamma", t.gamma)?;
                t.qvalues.iter().try_for_each(|q| check_finite("qvalues", *q))?;
                true
            }
            (HISTORY_AWARENESS, Payload::History(h)) => {
                check_finite("value", h.value)?;
                check_finite("gamma", h.gamma)?;
                if let Some(m) = &h.members {
                    m.iter().try_for_each(|v| check_finite("members", *v))?;
                }
                validate_history_fields(h)?;
                true
            }
            (FEEDBACK, Payload::Feedback(f)) => {
                check_finite("value", f.value)?;
                true
            }
            (RL_TRACES | HISTORY_AWARENESS | FEEDBACK, _) => false,
            (_, Payload::Custom(_)) => true,
            (_, _) => false,
        };
        if ok {
            Ok(())
        } else {
            Err(BusError::SchemaViolation(format!(
                "payload does not match the schema of topic {topic}"
            )))
        }
    }

    /// Parses a raw JSON payload according to the schema of `topic`.
    pub fn from_value(topic: &Topic, value: Value) -> Result<Self, BusError> {
        let schema = |e: serde_json::Error| BusError::SchemaViolation(format!("{topic}: {e}"));
        let payload = match topic.as_str() {
            RL_TRACES => Payload::Trace(serde_json::from_value(value).map_err(schema)?),
            HISTORY_AWARENESS => Payload::History(serde_json::from_value(value).map_err(schema)?),
            FEEDBACK => Payload::Feedback(serde_json::from_value(value).map_err(schema)?),
            _ => match value {
                Value::Object(map) => Payload::Custom(map),
                _ => {
                    return Err(BusError::SchemaViolation(format!(
                        "{topic}: payload must be a JSON object"
                    )))
                }
            },
        };
        payload.validate_for(topic)?;
        Ok(payload)
    }
}

fn check_finite(field: &str, v: f64) -> Result<(), BusError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(BusError::SchemaViolation(format!("{field} is not a finite number")))
    }
}

fn validate_history_fields(h: &HistoryPayload) -> Result<(), BusError> {
    let missing = |f: &str| BusError::SchemaViolation(format!("{:?} event without {f}", h.kind));
    match h.kind {
        HistoryKind::EpisodeAvg => {
            h.episode.ok_or_else(|| missing("episode"))?;
        }
        HistoryKind::WindowAvg => {
            h.window_index.ok_or_else(|| missing("window_index"))?;
        }
        HistoryKind::StableWindow => {
            h.window_index.ok_or_else(|| missing("window_index"))?;
            h.members.as_ref().ok_or_else(|| missing("members"))?;
        }
    }
    Ok(())
}

/// A payload stamped with its topic, per-topic sequence number and
/// millisecond timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub topic: Topic,
    pub seq: u64,
    pub ts: i64,
    pub payload: Payload,
}

/// Anything that can push payloads onto a fixed topic.
pub trait Publish: Send {
    fn publish(&mut self, payload: Payload) -> Result<(), BusError>;
}

/// In-process publisher bound to one topic.
#[derive(Clone)]
pub struct TopicPublisher {
    bus: Bus,
    topic: Topic,
}

impl TopicPublisher {
    pub fn new(bus: Bus, topic: Topic) -> Self {
        Self { bus, topic }
    }
}

impl Publish for TopicPublisher {
    fn publish(&mut self, payload: Payload) -> Result<(), BusError> {
        self.bus.publish(&self.topic, payload).map(|_| ())
    }
}

/// Default TCP address of the broker, overridable via `HISTUNE_BUS_ADDR`.
pub fn default_bus_addr() -> String {
    std::env::var("HISTUNE_BUS_ADDR").unwrap_or_else(|_| "127.0.0.1:7878".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn trace() -> TracePayload {
        TracePayload {
            agent: "abs".into(),
            episode: 0,
            step: 0,
            reward: 3.0,
            action: "up|stay".into(),
            state: "1,2|3,4".into(),
            qvalues: vec![0.0, 0.5],
            gamma: 0.9,
        }
    }

    #[test]
    fn topic_rules() {
        assert!(Topic::new("").is_err());
        assert!(Topic::new("a\nb").is_err());
        assert_ne!(Topic::new("Feedback").unwrap(), Topic::feedback());
    }

    #[test]
    fn payload_must_match_topic() {
        let p = Payload::Trace(trace());
        assert!(p.validate_for(&Topic::rl_traces()).is_ok());
        assert!(matches!(
            p.validate_for(&Topic::feedback()),
            Err(BusError::SchemaViolation(_))
        ));
        let mut bad = trace();
        bad.reward = f64::NAN;
        assert!(Payload::Trace(bad).validate_for(&Topic::rl_traces()).is_err());
    }

    #[test]
    fn stable_window_requires_members() {
        let h = HistoryPayload {
            kind: HistoryKind::StableWindow,
            episode: Some(0),
            window_index: Some(0),
            value: 2.0,
            members: None,
            gamma: 0.5,
        };
        assert!(Payload::History(h).validate_for(&Topic::history_awareness()).is_err());
    }

    #[test]
    fn decision_labels_round_trip() {
        for d in [
            FeedbackDecision::NewMax,
            FeedbackDecision::ReturnToMax,
            FeedbackDecision::Random,
            FeedbackDecision::Increment,
            FeedbackDecision::Decrement,
        ] {
            assert_eq!(FeedbackDecision::parse(d.as_str()), Some(d));
            assert_eq!(serde_json::to_string(&d).unwrap(), format!("\"{d}\""));
        }
    }
}
