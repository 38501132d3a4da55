//! Mapping of complex events and traces onto the RL history metamodel, and
//! the listener that runs the tuner on stable windows.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::bus::{FeedbackDecision, FeedbackPayload, Payload, Publish, TracePayload};
use crate::engine::ComplexEvent;
use crate::tuner::{reward_by_window, DecisionKind, EpisodeAverage, Tuner, TunerState};

use super::{
    event_timepoint, ChangeSet, CommitHandle, CommitInfo, GraphError, GraphListener, NodeId, NodeKind, NodeState,
    PropertySnapshot, TemporalGraph, Timepoint, Value,
};

const EPISODE_MEASURE: &str = "mean episode reward";
const WINDOW_MEASURE: &str = "mean window reward";

#[derive(Debug, Clone, Copy)]
struct Anchors {
    log: NodeId,
    agent: NodeId,
    episode_measure: NodeId,
    window_measure: NodeId,
}

/// Writes complex events (and optionally raw traces) into the graph as
/// new versions of the agent's history.
#[derive(Debug)]
pub struct HistoryRecorder {
    agent_name: String,
    anchors: Option<Anchors>,
    last_window_measurement: Option<(u64, NodeId)>,
    states: HashMap<String, NodeId>,
}

impl HistoryRecorder {
    pub fn new(agent_name: impl Into<String>) -> Self {
        Self {
            agent_name: agent_name.into(),
            anchors: None,
            last_window_measurement: None,
            states: HashMap::new(),
        }
    }

    pub fn agent(&self) -> Option<NodeId> {
        self.anchors.map(|a| a.agent)
    }

    /// Creates the log, agent and measure nodes on first use.
    fn bootstrap(&mut self, graph: &TemporalGraph, cs: &mut ChangeSet, gamma: f64) -> Anchors {
        if let Some(a) = self.anchors {
            return a;
        }
        let a = Anchors {
            log: graph.allocate_id(),
            agent: graph.allocate_id(),
            episode_measure: graph.allocate_id(),
            window_measure: graph.allocate_id(),
        };
        cs.create(a.log, NodeKind::Log, PropertySnapshot::new().with("name", "history"));
        cs.create(
            a.agent,
            NodeKind::RLAgent,
            PropertySnapshot::new()
                .with("name", self.agent_name.as_str())
                .with("initial_gamma", gamma)
                .with("gamma", gamma)
                .with_edge("log", vec![a.log]),
        );
        cs.create(a.episode_measure, NodeKind::Measure, PropertySnapshot::new().with("name", EPISODE_MEASURE));
        cs.create(a.window_measure, NodeKind::Measure, PropertySnapshot::new().with("name", WINDOW_MEASURE));
        self.anchors = Some(a);
        a
    }

    /// Commits one complex event at the timepoint derived from its bus
    /// sequence number.
    pub fn ingest_complex_event(
        &mut self,
        graph: &mut TemporalGraph,
        event: &ComplexEvent,
        seq: u64,
        ts: i64,
    ) -> Result<CommitHandle, GraphError> {
        self.ingest_at(graph, event, event_timepoint(seq), ts)
    }

    pub fn ingest_at(
        &mut self,
        graph: &mut TemporalGraph,
        event: &ComplexEvent,
        timepoint: Timepoint,
        ts: i64,
    ) -> Result<CommitHandle, GraphError> {
        if !event.value().is_finite() || !event.gamma().is_finite() {
            return Err(GraphError::Schema("non-finite value in complex event".into()));
        }
        let mut cs = ChangeSet::new();
        let a = self.bootstrap(graph, &mut cs, event.gamma());
        let id = graph.allocate_id();
        let base = PropertySnapshot::new()
            .with("kind", kind_label(event))
            .with("value", event.value())
            .with("gamma", event.gamma())
            .with("ts", ts)
            .with_edge("agent", vec![a.agent]);
        match event {
            ComplexEvent::EpisodeAvg { episode, gamma, .. } => {
                let m = base.with("episode", *episode).with_edge("measure", vec![a.episode_measure]);
                cs.create(id, NodeKind::Measurement, m);
                let known = graph
                    .node(a.agent)
                    .ok()
                    .and_then(|s| s.get("gamma").and_then(Value::as_f64));
                if known.is_some_and(|g| g != *gamma) {
                    cs.update(
                        a.agent,
                        PropertySnapshot::new()
                            .with("gamma", *gamma)
                            .with("gamma_since_episode", *episode),
                    );
                }
            }
            ComplexEvent::WindowAvg {
                window_index,
                first_episode,
                members,
                ..
            } => {
                let m = base
                    .with("window_index", *window_index)
                    .with("episode", *first_episode)
                    .with("last_episode", first_episode + members.len().saturating_sub(1) as u64)
                    .with("members", members.clone())
                    .with_edge("measure", vec![a.window_measure]);
                cs.create(id, NodeKind::Measurement, m);
                self.last_window_measurement = Some((*window_index, id));
            }
            ComplexEvent::StableWindow {
                window_index,
                first_episode,
                members,
                ..
            } => {
                let mut m = base
                    .with("window_index", *window_index)
                    .with("episode", *first_episode)
                    .with("last_episode", first_episode + members.len().saturating_sub(1) as u64)
                    .with("members", members.clone())
                    .with_edge("measure", vec![a.window_measure]);
                if let Some((w, avg)) = self.last_window_measurement {
                    if w == *window_index {
                        m = m.with_edge("window", vec![avg]);
                    }
                }
                cs.create(id, NodeKind::Measurement, m);
            }
        }
        graph.commit(timepoint, cs)
    }

    /// Records one step as a decision with its Q-values, observation,
    /// reward and prior state.
    pub fn ingest_trace(
        &mut self,
        graph: &mut TemporalGraph,
        trace: &TracePayload,
        timepoint: Timepoint,
    ) -> Result<CommitHandle, GraphError> {
        let mut cs = ChangeSet::new();
        let a = self.bootstrap(graph, &mut cs, trace.gamma);
        let state = match self.states.get(&trace.state) {
            Some(id) => *id,
            None => {
                let id = graph.allocate_id();
                cs.create(id, NodeKind::RLState, PropertySnapshot::new().with("state", trace.state.as_str()));
                self.states.insert(trace.state.clone(), id);
                id
            }
        };
        let reward = graph.allocate_id();
        cs.create(reward, NodeKind::Reward, PropertySnapshot::new().with("value", trace.reward));
        let observation = graph.allocate_id();
        cs.create(
            observation,
            NodeKind::RLObservation,
            PropertySnapshot::new()
                .with("episode", trace.episode)
                .with("step", trace.step)
                .with_edge("reward", vec![reward])
                .with_edge("state", vec![state]),
        );
        let qvalues: Vec<NodeId> = trace
            .qvalues
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let id = graph.allocate_id();
                cs.create(
                    id,
                    NodeKind::QValue,
                    PropertySnapshot::new().with("action_index", i as u64).with("value", *q),
                );
                id
            })
            .collect();
        let decision = graph.allocate_id();
        cs.create(
            decision,
            NodeKind::RLDecision,
            PropertySnapshot::new()
                .with("episode", trace.episode)
                .with("step", trace.step)
                .with("action", trace.action.as_str())
                .with("gamma", trace.gamma)
                .with_edge("qvalues", qvalues)
                .with_edge("observation", vec![observation])
                .with_edge("agent", vec![a.agent]),
        );
        graph.commit(timepoint, cs)
    }
}

fn kind_label(event: &ComplexEvent) -> &'static str {
    match event {
        ComplexEvent::EpisodeAvg { .. } => "episode_avg",
        ComplexEvent::WindowAvg { .. } => "window_avg",
        ComplexEvent::StableWindow { .. } => "stable_window",
    }
}

/// Decoded `TuningRecord` node.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningRecordView {
    pub id: NodeId,
    pub timepoint: Timepoint,
    pub decision: String,
    pub window_index: u64,
    pub first_episode: u64,
    pub last_episode: u64,
    pub effective_episode: u64,
    pub r_win: f64,
    pub old_gamma: f64,
    pub new_gamma: f64,
    pub max_r: f64,
    pub max_gamma: f64,
    pub published: bool,
    pub delivery_failed: bool,
}

impl TuningRecordView {
    pub fn from_state(state: &NodeState) -> Result<Self, GraphError> {
        let bad = |f: &str| GraphError::Schema(format!("tuning record {} lacks {f}", state.id));
        let f = |name: &str| state.get(name).and_then(Value::as_f64).ok_or_else(|| bad(name));
        let i = |name: &str| {
            state
                .get(name)
                .and_then(Value::as_i64)
                .map(|v| v as u64)
                .ok_or_else(|| bad(name))
        };
        let b = |name: &str| state.get(name).and_then(Value::as_bool).ok_or_else(|| bad(name));
        Ok(Self {
            id: state.id,
            timepoint: state.created_at,
            decision: state
                .get("decision")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("decision"))?
                .to_string(),
            window_index: i("window_index")?,
            first_episode: i("first_episode")?,
            last_episode: i("last_episode")?,
            effective_episode: i("effective_episode")?,
            r_win: f("r_win")?,
            old_gamma: f("old_gamma")?,
            new_gamma: f("new_gamma")?,
            max_r: f("max_r")?,
            max_gamma: f("max_gamma")?,
            published: b("published")?,
            delivery_failed: b("delivery_failed")?,
        })
    }

    /// All tuning records in commit order.
    pub fn all(graph: &TemporalGraph) -> Result<Vec<Self>, GraphError> {
        let mut out = graph
            .nodes_of_kind(NodeKind::TuningRecord)
            .iter()
            .map(|id| graph.node(*id).and_then(|s| Self::from_state(&s)))
            .collect::<Result<Vec<_>, _>>()?;
        out.sort_by_key(|r| r.timepoint);
        Ok(out)
    }

    /// Whether this record produced a feedback message the agent acts on.
    pub fn feedback_sent(&self) -> bool {
        self.published && !self.delivery_failed
    }
}

/// Shared view of the tuner state held by a [`TunerListener`].
#[derive(Debug, Clone)]
pub struct TunerHandle(Arc<Mutex<TunerState>>);

impl TunerHandle {
    pub fn state(&self) -> TunerState {
        self.0.lock().expect("tuner state poisoned").clone()
    }
}

/// Runs the tuner on every committed stable-window measurement, publishes
/// feedback and records the decision as a `TuningRecord` follow-up.
pub struct TunerListener {
    tuner: Tuner,
    publisher: Box<dyn Publish>,
    shared: Arc<Mutex<TunerState>>,
}

impl TunerListener {
    pub fn new(tuner: Tuner, publisher: Box<dyn Publish>) -> (Self, TunerHandle) {
        let shared = Arc::new(Mutex::new(tuner.state().clone()));
        (
            Self {
                tuner,
                publisher,
                shared: shared.clone(),
            },
            TunerHandle(shared),
        )
    }

    fn handle_window(&mut self, graph: &TemporalGraph, measurement: &NodeState, cs: &mut ChangeSet) -> Result<(), GraphError> {
        let bad = |f: &str| GraphError::Schema(format!("stable window measurement {} lacks {f}", measurement.id));
        let members = measurement
            .get("members")
            .and_then(Value::as_list)
            .ok_or_else(|| bad("members"))?
            .to_vec();
        let window_index = measurement
            .get("window_index")
            .and_then(Value::as_i64)
            .ok_or_else(|| bad("window_index"))? as u64;
        let first_episode = measurement
            .get("episode")
            .and_then(Value::as_i64)
            .ok_or_else(|| bad("episode"))? as u64;
        let averages: Vec<EpisodeAverage> = members
            .iter()
            .enumerate()
            .map(|(i, r_e)| EpisodeAverage {
                episode: first_episode + i as u64,
                r_e: *r_e,
                step_count: 1,
            })
            .collect();
        let before = self.tuner.state().clone();
        let window = reward_by_window(window_index, &averages, averages.len(), before.current_lambda.clone())
            .map_err(|e| GraphError::Schema(e.to_string()))?;
        let last_episode = window.last_episode();
        let effective_episode = last_episode + 2;

        let decision = self.tuner.observe_window(&window);
        let after = self.tuner.state().clone();
        *self.shared.lock().expect("tuner state poisoned") = after.clone();

        let old_gamma = before.current_lambda.gamma();
        let new_gamma = decision.new_lambda.gamma();
        let label = decision.wire_label();
        let publish = match decision.kind {
            DecisionKind::NewMaxRecorded => true,
            DecisionKind::Explore => new_gamma != old_gamma,
            DecisionKind::KeepCurrent => false,
        };
        let mut delivery_failed = false;
        if publish {
            let wire = FeedbackDecision::parse(label.expect("publishing decisions have labels"))
                .expect("tuner labels are wire labels");
            let payload = FeedbackPayload::set_gamma(new_gamma, effective_episode, wire);
            if let Err(e) = self.publisher.publish(Payload::Feedback(payload)) {
                log::warn!("feedback for window {window_index} not delivered: {e}");
                delivery_failed = true;
            }
        }

        let mut record = PropertySnapshot::new()
            .with("decision", label.unwrap_or("keep"))
            .with("window_index", window_index)
            .with("first_episode", first_episode)
            .with("last_episode", last_episode)
            .with("effective_episode", effective_episode)
            .with("r_win", window.r_win)
            .with("old_gamma", old_gamma)
            .with("new_gamma", new_gamma)
            .with("max_r", after.max_r)
            .with("max_gamma", after.max_lambda.gamma())
            .with("published", publish)
            .with("delivery_failed", delivery_failed)
            .with_edge("window", vec![measurement.id]);
        if let Some(agent) = measurement.edge("agent").first() {
            record = record.with_edge("agent", vec![*agent]);
        }
        cs.create(graph.allocate_id(), NodeKind::TuningRecord, record);
        Ok(())
    }
}

impl GraphListener for TunerListener {
    fn interest(&self) -> &[NodeKind] {
        &[NodeKind::Measurement]
    }

    fn on_commit(&mut self, graph: &TemporalGraph, commit: &CommitInfo) -> Result<Option<ChangeSet>, GraphError> {
        let mut cs = ChangeSet::new();
        for id in &commit.created {
            if graph.kind_of(*id) != Some(NodeKind::Measurement) {
                continue;
            }
            let state = graph.node_at(*id, commit.timepoint)?;
            if state.get("kind").and_then(Value::as_str) == Some("stable_window") {
                self.handle_window(graph, &state, &mut cs)?;
            }
        }
        Ok((!cs.is_empty()).then_some(cs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{Bus, BusError, Topic, TopicPublisher};
    use crate::tuner::{HyperparameterVector, TunerConfig};

    fn listener(bus: &Bus, epsilon: f64) -> (TunerListener, TunerHandle) {
        let config = TunerConfig {
            window_length: 3,
            th_stable: 2.0,
            epsilon,
            ..Default::default()
        };
        let tuner = Tuner::new(config, HyperparameterVector::new(0.5, Default::default(), (0.01, 0.99)), 7).unwrap();
        TunerListener::new(tuner, Box::new(TopicPublisher::new(bus.clone(), Topic::feedback())))
    }

    fn stable(window_index: u64, members: Vec<f64>, gamma: f64) -> ComplexEvent {
        let value = members.iter().sum::<f64>() / members.len() as f64;
        ComplexEvent::StableWindow {
            window_index,
            first_episode: window_index * members.len() as u64,
            value,
            members,
            gamma,
        }
    }

    #[test]
    fn episode_average_becomes_measurement() {
        let mut g = TemporalGraph::new();
        let mut rec = HistoryRecorder::new("abs");
        let h = rec
            .ingest_complex_event(&mut g, &ComplexEvent::EpisodeAvg { episode: 7, value: 3.5, gamma: 0.5 }, 0, 99)
            .unwrap();
        let m = g.nodes_of_kind(NodeKind::Measurement)[0];
        assert!(h.created.contains(&m));
        let s = g.node(m).unwrap();
        assert_eq!(s.get("episode"), Some(&Value::Int(7)));
        assert_eq!(s.get("value"), Some(&Value::Float(3.5)));
        assert_eq!(s.get("ts"), Some(&Value::Int(99)));
        let measure = g.node(s.edge("measure")[0]).unwrap();
        assert_eq!(measure.get("name"), Some(&Value::from(EPISODE_MEASURE)));
        assert_eq!(g.nodes_of_kind(NodeKind::RLAgent).len(), 1);
    }

    #[test]
    fn stable_window_fires_listener_once() {
        let bus = Bus::new();
        let sub = bus.subscribe(&Topic::feedback()).unwrap();
        let mut g = TemporalGraph::new();
        let (l, handle) = listener(&bus, 0.3);
        g.add_listener(Box::new(l));
        let mut rec = HistoryRecorder::new("abs");
        for (i, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            rec.ingest_complex_event(&mut g, &ComplexEvent::EpisodeAvg { episode: i as u64, value: *v, gamma: 0.5 }, i as u64, 0)
                .unwrap();
        }
        let h = rec.ingest_complex_event(&mut g, &stable(0, vec![1.0, 2.0, 3.0], 0.5), 3, 0).unwrap();
        assert_eq!(h.timepoint, 6);
        assert_eq!(h.follow_up, Some(7));
        let records = TuningRecordView::all(&g).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.decision, "new_max");
        assert_eq!(r.max_r, 2.0);
        assert_eq!(r.effective_episode, 4);
        assert!(r.feedback_sent());
        assert_eq!(handle.state().max_r, 2.0);

        let fb = sub.try_recv().unwrap().expect("feedback published");
        match fb.payload {
            Payload::Feedback(f) => {
                assert_eq!(f.decision, FeedbackDecision::NewMax);
                assert_eq!(f.value, 0.5);
                assert_eq!(f.effective_episode, 4);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(sub.try_recv().unwrap(), None);
    }

    #[test]
    fn greedy_feedback_returns_to_max() {
        let bus = Bus::new();
        let sub = bus.subscribe(&Topic::feedback()).unwrap();
        let mut g = TemporalGraph::new();
        let (l, _) = listener(&bus, 0.0);
        g.add_listener(Box::new(l));
        let mut rec = HistoryRecorder::new("abs");
        rec.ingest_complex_event(&mut g, &stable(0, vec![5.0, 5.0, 5.0], 0.5), 0, 0).unwrap();
        // nothing to return to while current == max: recorded, not published
        rec.ingest_complex_event(&mut g, &stable(1, vec![2.0, 2.0, 2.0], 0.5), 1, 0).unwrap();
        let records = TuningRecordView::all(&g).unwrap();
        assert_eq!(records[1].decision, "return_to_max");
        assert!(!records[1].published);
        assert_eq!(sub.iter_pending(), 1);
    }

    trait Pending {
        fn iter_pending(&self) -> usize;
    }

    impl Pending for crate::bus::Subscription {
        fn iter_pending(&self) -> usize {
            let mut n = 0;
            while let Ok(Some(_)) = self.try_recv() {
                n += 1;
            }
            n
        }
    }

    #[test]
    fn closed_bus_marks_delivery_failed_but_advances_tuner() {
        let bus = Bus::new();
        let mut g = TemporalGraph::new();
        let (l, handle) = listener(&bus, 0.3);
        g.add_listener(Box::new(l));
        bus.close();
        let mut rec = HistoryRecorder::new("abs");
        rec.ingest_complex_event(&mut g, &stable(0, vec![1.0, 2.0, 3.0], 0.5), 0, 0).unwrap();
        let r = &TuningRecordView::all(&g).unwrap()[0];
        assert!(r.published && r.delivery_failed);
        assert_eq!(handle.state().max_r, 2.0);
        assert_eq!(bus.publish(&Topic::feedback(), Payload::Custom(Default::default())), Err(BusError::Closed));
    }

    #[test]
    fn traces_map_onto_metamodel() {
        let mut g = TemporalGraph::new();
        let mut rec = HistoryRecorder::new("abs");
        let trace = TracePayload {
            agent: "abs".into(),
            episode: 0,
            step: 0,
            reward: 4.0,
            action: "up|left".into(),
            state: "0,0|1,1".into(),
            qvalues: vec![0.1, 0.2, 0.3],
            gamma: 0.5,
        };
        rec.ingest_trace(&mut g, &trace, 0).unwrap();
        rec.ingest_trace(&mut g, &TracePayload { step: 1, ..trace.clone() }, 1).unwrap();
        assert_eq!(g.nodes_of_kind(NodeKind::RLDecision).len(), 2);
        assert_eq!(g.nodes_of_kind(NodeKind::QValue).len(), 6);
        // same state string reuses the node
        assert_eq!(g.nodes_of_kind(NodeKind::RLState).len(), 1);
        let d = g.node(g.nodes_of_kind(NodeKind::RLDecision)[0]).unwrap();
        let obs = g.node(d.edge("observation")[0]).unwrap();
        let reward = g.node(obs.edge("reward")[0]).unwrap();
        assert_eq!(reward.get("value"), Some(&Value::Float(4.0)));
    }
}
