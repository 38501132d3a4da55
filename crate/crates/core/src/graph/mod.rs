//! Copy-on-write temporal graph.
//!
//! Every node keeps a time-indexed map of deltas. A delta holds only the
//! properties and edge relations that changed at its timepoint; the state
//! of a node at time `t` is the fold of all its deltas up to `t`. Edges are
//! part of the state of their source node.
//!
//! Writes go through [`TemporalGraph::commit`] with strictly increasing
//! timepoints. Listeners run after each commit and may return follow-up
//! changes, which are committed at the next timepoint.

mod ingest;
mod log;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{HistoryRecorder, TunerHandle, TunerListener, TuningRecordView};
pub use log::{read_commit_log, CommitLogWriter, CommitRecord, LOG_MAGIC, LOG_VERSION};

pub type Timepoint = u64;

/// Timepoint of the commit that ingests the complex event with bus
/// sequence number `seq`. Odd timepoints are left for listener follow-ups.
pub fn event_timepoint(seq: u64) -> Timepoint {
    seq * 2
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("time regression: commit at {got} after {last}")]
    TimeRegression { last: Timepoint, got: Timepoint },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {id} not yet created at {at} (created at {created_at})")]
    NotYetCreated { id: NodeId, at: Timepoint, created_at: Timepoint },
    #[error("node {0} has already ended")]
    NodeEnded(NodeId),
    #[error("node id {0} is already in use")]
    DuplicateNode(NodeId),
    #[error("invalid time range [{from}, {to}]")]
    InvalidRange { from: Timepoint, to: Timepoint },
    #[error("listener follow-up produced another follow-up at {0}")]
    ReentrantFollowUp(Timepoint),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("corrupt commit log at byte {offset}: {message}")]
    CorruptLog { offset: u64, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GraphError {
    fn from(e: std::io::Error) -> Self {
        GraphError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Log,
    RLAgent,
    RLState,
    RLDecision,
    RLObservation,
    QValue,
    Reward,
    Measurement,
    Measure,
    TuningRecord,
}

impl NodeKind {
    pub const ALL: [NodeKind; 10] = [
        NodeKind::Log,
        NodeKind::RLAgent,
        NodeKind::RLState,
        NodeKind::RLDecision,
        NodeKind::RLObservation,
        NodeKind::QValue,
        NodeKind::Reward,
        NodeKind::Measurement,
        NodeKind::Measure,
        NodeKind::TuningRecord,
    ];

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    FloatList(Vec<f64>),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[f64]> {
        match self {
            Value::FloatList(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(v) => write!(f, "{v}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Text(v) => write!(f, "{v:?}"),
            Value::FloatList(v) => write!(f, "{v:?}"),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl From<Vec<f64>> for Value {
    fn from(v: Vec<f64>) -> Self {
        Value::FloatList(v)
    }
}

/// Properties and outgoing edges of a node: a delta when stored in a
/// version, the full state when returned from a query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertySnapshot {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub properties: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub edges: BTreeMap<String, Vec<NodeId>>,
}

impl PropertySnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.properties.insert(name.to_string(), value.into());
        self
    }

    pub fn with_edge(mut self, relation: &str, targets: Vec<NodeId>) -> Self {
        self.edges.insert(relation.to_string(), targets);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.properties.is_empty() && self.edges.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.properties.get(name)
    }

    fn apply(&mut self, delta: &PropertySnapshot) {
        for (k, v) in &delta.properties {
            self.properties.insert(k.clone(), v.clone());
        }
        for (k, v) in &delta.edges {
            self.edges.insert(k.clone(), v.clone());
        }
    }

    /// Entries of `self` that differ from `base`.
    fn diff_against(&self, base: &PropertySnapshot) -> PropertySnapshot {
        PropertySnapshot {
            properties: self
                .properties
                .iter()
                .filter(|(k, v)| base.properties.get(*k) != Some(v))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|(k, v)| base.edges.get(*k) != Some(v))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// One change inside a commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Change {
    Create { id: NodeId, kind: NodeKind, delta: PropertySnapshot },
    Update { id: NodeId, delta: PropertySnapshot },
    End { id: NodeId },
}

impl Change {
    pub fn node(&self) -> NodeId {
        match self {
            Change::Create { id, .. } | Change::Update { id, .. } | Change::End { id } => *id,
        }
    }
}

/// Changes applied atomically by one commit. New node ids come from
/// [`TemporalGraph::allocate_id`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub changes: Vec<Change>,
}

impl ChangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, id: NodeId, kind: NodeKind, delta: PropertySnapshot) -> &mut Self {
        self.changes.push(Change::Create { id, kind, delta });
        self
    }

    pub fn update(&mut self, id: NodeId, delta: PropertySnapshot) -> &mut Self {
        self.changes.push(Change::Update { id, delta });
        self
    }

    pub fn end(&mut self, id: NodeId) -> &mut Self {
        self.changes.push(Change::End { id });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }

    pub fn extend(&mut self, other: ChangeSet) {
        self.changes.extend(other.changes);
    }
}

#[derive(Debug, Clone)]
struct NodeRecord {
    kind: NodeKind,
    created_at: Timepoint,
    ended_at: Option<Timepoint>,
    versions: BTreeMap<Timepoint, PropertySnapshot>,
    /// Fold of every version; kept so updates need not replay history.
    current: PropertySnapshot,
}

impl NodeRecord {
    fn state_at(&self, t: Timepoint) -> PropertySnapshot {
        if self.versions.last_key_value().is_some_and(|(last, _)| *last <= t) {
            return self.current.clone();
        }
        let mut state = PropertySnapshot::new();
        for (_, v) in self.versions.range(..=t) {
            state.apply(v);
        }
        state
    }

    fn latest(&self) -> &PropertySnapshot {
        &self.current
    }
}

/// Effective state of a node at some timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub kind: NodeKind,
    pub created_at: Timepoint,
    pub snapshot: PropertySnapshot,
    /// The node was ended at or before the queried timepoint.
    pub ended: bool,
}

impl NodeState {
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.snapshot.get(name)
    }

    pub fn edge(&self, relation: &str) -> &[NodeId] {
        self.snapshot.edges.get(relation).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Summary passed to listeners after a commit.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitInfo {
    pub timepoint: Timepoint,
    pub changed: Vec<(NodeId, NodeKind)>,
    pub created: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitHandle {
    pub timepoint: Timepoint,
    pub created: Vec<NodeId>,
    /// Timepoint of the listener follow-up commit, if one was made.
    pub follow_up: Option<Timepoint>,
}

/// Callback run on the writer's commit path after a commit is durable.
pub trait GraphListener: Send {
    /// Node kinds whose changes should trigger this listener.
    fn interest(&self) -> &[NodeKind];

    /// Returns changes to commit at the next timepoint. Must not commit
    /// on its own.
    fn on_commit(&mut self, graph: &TemporalGraph, commit: &CommitInfo) -> Result<Option<ChangeSet>, GraphError>;
}

/// In-memory temporal graph with an optional append-only commit log.
pub struct TemporalGraph {
    nodes: HashMap<NodeId, NodeRecord>,
    by_kind: BTreeMap<NodeKind, Vec<NodeId>>,
    last_commit: Option<Timepoint>,
    commit_times: Vec<Timepoint>,
    next_id: AtomicU64,
    listeners: Vec<Box<dyn GraphListener>>,
    log: Option<CommitLogWriter>,
}

impl Default for TemporalGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for TemporalGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TemporalGraph")
            .field("nodes", &self.nodes.len())
            .field("last_commit", &self.last_commit)
            .field("listeners", &self.listeners.len())
            .finish()
    }
}

impl TemporalGraph {
    pub fn new() -> Self {
        Self {
            nodes: HashMap::new(),
            by_kind: BTreeMap::new(),
            last_commit: None,
            commit_times: Vec::new(),
            next_id: AtomicU64::new(0),
            listeners: Vec::new(),
            log: None,
        }
    }

    /// New graph that appends every commit to a fresh log at `path`.
    pub fn with_log(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let mut g = Self::new();
        g.log = Some(CommitLogWriter::create(path)?);
        Ok(g)
    }

    /// Rebuilds a graph by replaying the commit log at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let mut g = Self::new();
        for record in read_commit_log(path)? {
            g.apply(record.timepoint, &record.changes)?;
        }
        Ok(g)
    }

    pub fn add_listener(&mut self, listener: Box<dyn GraphListener>) {
        self.listeners.push(listener);
    }

    pub fn allocate_id(&self) -> NodeId {
        NodeId(self.next_id.fetch_add(1, Ordering::SeqCst))
    }

    pub fn last_commit(&self) -> Option<Timepoint> {
        self.last_commit
    }

    pub fn commit_timepoints(&self) -> &[Timepoint] {
        &self.commit_times
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn kind_of(&self, id: NodeId) -> Option<NodeKind> {
        self.nodes.get(&id).map(|n| n.kind)
    }

    /// Ids of all nodes of `kind`, in creation order.
    pub fn nodes_of_kind(&self, kind: NodeKind) -> &[NodeId] {
        self.by_kind.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of property entries stored across all versions.
    pub fn stored_property_count(&self) -> usize {
        self.nodes
            .values()
            .flat_map(|n| n.versions.values())
            .map(|v| v.properties.len())
            .sum()
    }

    pub fn stored_edge_count(&self) -> usize {
        self.nodes
            .values()
            .flat_map(|n| n.versions.values())
            .map(|v| v.edges.len())
            .sum()
    }

    /// Applies `changes` at `timepoint`, logs the commit, then runs
    /// listeners and commits their follow-ups at `timepoint + 1`.
    pub fn commit(&mut self, timepoint: Timepoint, changes: ChangeSet) -> Result<CommitHandle, GraphError> {
        let (info, follow) = self.commit_and_notify(timepoint, changes)?;
        let mut handle = CommitHandle {
            timepoint,
            created: info.created,
            follow_up: None,
        };
        if let Some(follow) = follow {
            let t = timepoint + 1;
            let (_, again) = self.commit_and_notify(t, follow)?;
            if again.is_some() {
                return Err(GraphError::ReentrantFollowUp(t));
            }
            handle.follow_up = Some(t);
        }
        Ok(handle)
    }

    fn commit_and_notify(
        &mut self,
        timepoint: Timepoint,
        changes: ChangeSet,
    ) -> Result<(CommitInfo, Option<ChangeSet>), GraphError> {
        let stored = self.apply(timepoint, &changes.changes)?;
        if let Some(log) = &mut self.log {
            log.append(&CommitRecord {
                timepoint,
                changes: stored.clone(),
            })?;
        }
        let info = CommitInfo {
            timepoint,
            changed: stored
                .iter()
                .map(|c| (c.node(), self.nodes[&c.node()].kind))
                .collect(),
            created: stored
                .iter()
                .filter_map(|c| match c {
                    Change::Create { id, .. } => Some(*id),
                    _ => None,
                })
                .collect(),
        };

        let mut listeners = std::mem::take(&mut self.listeners);
        let mut follow = ChangeSet::new();
        let mut result = Ok(());
        for l in listeners.iter_mut() {
            let interested = info.changed.iter().any(|(_, k)| l.interest().contains(k));
            if !interested {
                continue;
            }
            match l.on_commit(self, &info) {
                Ok(Some(cs)) => follow.extend(cs),
                Ok(None) => {}
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        self.listeners = listeners;
        result?;
        Ok((info, (!follow.is_empty()).then_some(follow)))
    }

    /// Validates and stores a commit. Returns the changes as stored, with
    /// update deltas reduced to what actually changed.
    fn apply(&mut self, timepoint: Timepoint, changes: &[Change]) -> Result<Vec<Change>, GraphError> {
        if let Some(last) = self.last_commit {
            if timepoint <= last {
                return Err(GraphError::TimeRegression { last, got: timepoint });
            }
        }
        // validate everything before touching state
        let mut created_here: HashMap<NodeId, NodeKind> = HashMap::new();
        let mut ended_here: Vec<NodeId> = Vec::new();
        for c in changes {
            match c {
                Change::Create { id, kind, .. } => {
                    if self.nodes.contains_key(id) || created_here.insert(*id, *kind).is_some() {
                        return Err(GraphError::DuplicateNode(*id));
                    }
                }
                Change::Update { id, .. } | Change::End { id } => {
                    if !created_here.contains_key(id) {
                        let node = self.nodes.get(id).ok_or(GraphError::UnknownNode(*id))?;
                        if node.ended_at.is_some() {
                            return Err(GraphError::NodeEnded(*id));
                        }
                    }
                    if ended_here.contains(id) {
                        return Err(GraphError::NodeEnded(*id));
                    }
                    if matches!(c, Change::End { .. }) {
                        ended_here.push(*id);
                    }
                }
            }
        }
        for c in changes {
            let delta = match c {
                Change::Create { delta, .. } | Change::Update { delta, .. } => delta,
                Change::End { .. } => continue,
            };
            for target in delta.edges.values().flatten() {
                let exists = created_here.contains_key(target)
                    || self.nodes.get(target).is_some_and(|n| n.ended_at.is_none());
                if !exists {
                    return Err(GraphError::UnknownNode(*target));
                }
            }
        }

        let mut stored = Vec::with_capacity(changes.len());
        for c in changes {
            match c {
                Change::Create { id, kind, delta } => {
                    let mut versions = BTreeMap::new();
                    versions.insert(timepoint, delta.clone());
                    self.nodes.insert(
                        *id,
                        NodeRecord {
                            kind: *kind,
                            created_at: timepoint,
                            ended_at: None,
                            versions,
                            current: delta.clone(),
                        },
                    );
                    self.by_kind.entry(*kind).or_default().push(*id);
                    self.next_id.fetch_max(id.0 + 1, Ordering::SeqCst);
                    stored.push(c.clone());
                }
                Change::Update { id, delta } => {
                    let node = self.nodes.get_mut(id).expect("validated");
                    let reduced = delta.diff_against(node.latest());
                    if reduced.is_empty() {
                        continue;
                    }
                    node.versions.entry(timepoint).or_default().apply(&reduced);
                    node.current.apply(&reduced);
                    stored.push(Change::Update { id: *id, delta: reduced });
                }
                Change::End { id } => {
                    let node = self.nodes.get_mut(id).expect("validated");
                    node.ended_at = Some(timepoint);
                    node.versions.entry(timepoint).or_default();
                    stored.push(c.clone());
                }
            }
        }
        self.last_commit = Some(timepoint);
        self.commit_times.push(timepoint);
        Ok(stored)
    }

    /// Effective state of `id` at `t`: the fold of all deltas at or before
    /// `t`. After the node ended, the terminal state is returned flagged.
    pub fn node_at(&self, id: NodeId, t: Timepoint) -> Result<NodeState, GraphError> {
        let node = self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))?;
        if t < node.created_at {
            return Err(GraphError::NotYetCreated {
                id,
                at: t,
                created_at: node.created_at,
            });
        }
        Ok(NodeState {
            id,
            kind: node.kind,
            created_at: node.created_at,
            snapshot: node.state_at(t),
            ended: node.ended_at.is_some_and(|e| e <= t),
        })
    }

    /// Latest state of `id`.
    pub fn node(&self, id: NodeId) -> Result<NodeState, GraphError> {
        self.node_at(id, Timepoint::MAX)
    }

    /// One entry per version of `id` inside `[from, to]`, oldest first.
    pub fn history(&self, id: NodeId, from: Timepoint, to: Timepoint) -> Result<Vec<(Timepoint, NodeState)>, GraphError> {
        if from > to {
            return Err(GraphError::InvalidRange { from, to });
        }
        let node = self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))?;
        node.versions
            .range(from..=to)
            .map(|(t, _)| Ok((*t, self.node_at(id, *t)?)))
            .collect()
    }

    /// Raw stored delta of `id` at exactly `t`, if a version exists there.
    pub fn delta_at(&self, id: NodeId, t: Timepoint) -> Option<&PropertySnapshot> {
        self.nodes.get(&id)?.versions.get(&t)
    }

    /// Nodes whose relation `relation` points at `target` (derived reverse
    /// lookup; edges are stored on the source only).
    pub fn incoming(&self, target: NodeId, relation: &str) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.latest().edges.get(relation).is_some_and(|ts| ts.contains(&target)))
            .map(|(id, _)| *id)
            .collect();
        out.sort();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn props(n: usize) -> PropertySnapshot {
        (0..n).fold(PropertySnapshot::new(), |s, i| s.with(&format!("p{i}"), i as i64))
    }

    #[test]
    fn create_then_read() {
        let mut g = TemporalGraph::new();
        let agent = g.allocate_id();
        let mut cs = ChangeSet::new();
        cs.create(agent, NodeKind::RLAgent, PropertySnapshot::new().with("name", "abs"));
        let h = g.commit(0, cs).unwrap();
        assert_eq!(h.created, vec![agent]);
        let s = g.node_at(agent, 0).unwrap();
        assert_eq!(s.kind, NodeKind::RLAgent);
        assert_eq!(s.get("name"), Some(&Value::from("abs")));
        assert!(!s.ended);
    }

    #[test]
    fn updates_store_only_changed_properties() {
        let mut g = TemporalGraph::new();
        let id = g.allocate_id();
        let mut cs = ChangeSet::new();
        cs.create(id, NodeKind::Measure, props(10));
        g.commit(0, cs).unwrap();
        let mut full = props(10);
        full.properties.insert("p3".into(), Value::Int(99));
        let mut cs = ChangeSet::new();
        cs.update(id, full);
        g.commit(1, cs).unwrap();
        assert_eq!(g.delta_at(id, 1).unwrap().properties.len(), 1);
        assert_eq!(g.stored_property_count(), 11);
        assert_eq!(g.node_at(id, 1).unwrap().get("p3"), Some(&Value::Int(99)));
        assert_eq!(g.node_at(id, 0).unwrap().get("p3"), Some(&Value::Int(3)));
    }

    #[test]
    fn piecewise_constant_queries() {
        let mut g = TemporalGraph::new();
        let id = g.allocate_id();
        let mut cs = ChangeSet::new();
        cs.create(id, NodeKind::Measure, PropertySnapshot::new().with("v", 1i64));
        g.commit(0, cs).unwrap();
        for (t, v) in [(5u64, 2i64), (9, 3)] {
            let mut cs = ChangeSet::new();
            cs.update(id, PropertySnapshot::new().with("v", v));
            g.commit(t, cs).unwrap();
        }
        let v = |t| g.node_at(id, t).unwrap().get("v").cloned();
        assert_eq!(v(5), Some(Value::Int(2)));
        assert_eq!(v(7), Some(Value::Int(2)));
        assert_eq!(v(100), Some(Value::Int(3)));
        assert_eq!(g.history(id, 0, 9).unwrap().len(), 3);
        assert!(g.history(id, 6, 8).unwrap().is_empty());
        assert!(matches!(g.history(id, 8, 6), Err(GraphError::InvalidRange { .. })));
    }

    #[test]
    fn errors() {
        let mut g = TemporalGraph::new();
        let a = g.allocate_id();
        let mut cs = ChangeSet::new();
        cs.create(a, NodeKind::Log, PropertySnapshot::new());
        g.commit(3, cs).unwrap();
        assert!(matches!(
            g.commit(3, ChangeSet::new()),
            Err(GraphError::TimeRegression { last: 3, got: 3 })
        ));
        let mut cs = ChangeSet::new();
        cs.update(a, PropertySnapshot::new().with_edge("x", vec![NodeId(77)]));
        assert_eq!(g.commit(4, cs), Err(GraphError::UnknownNode(NodeId(77))));
        assert!(matches!(g.node_at(a, 2), Err(GraphError::NotYetCreated { .. })));
        assert_eq!(g.node_at(NodeId(50), 2), Err(GraphError::UnknownNode(NodeId(50))));
        // failed commits leave no trace
        assert_eq!(g.last_commit(), Some(3));
    }

    #[test]
    fn edges_may_target_nodes_created_in_the_same_commit() {
        let mut g = TemporalGraph::new();
        let (a, b) = (g.allocate_id(), g.allocate_id());
        let mut cs = ChangeSet::new();
        cs.create(a, NodeKind::RLDecision, PropertySnapshot::new().with_edge("qvalues", vec![b]));
        cs.create(b, NodeKind::QValue, PropertySnapshot::new().with("value", 1.0));
        g.commit(0, cs).unwrap();
        assert_eq!(g.node(a).unwrap().edge("qvalues"), &[b]);
        assert_eq!(g.incoming(b, "qvalues"), vec![a]);
    }

    #[test]
    fn ended_nodes_report_terminal_state() {
        let mut g = TemporalGraph::new();
        let a = g.allocate_id();
        let mut cs = ChangeSet::new();
        cs.create(a, NodeKind::RLState, PropertySnapshot::new().with("pos", "1,1"));
        g.commit(0, cs).unwrap();
        let mut cs = ChangeSet::new();
        cs.end(a);
        g.commit(4, cs).unwrap();
        assert!(!g.node_at(a, 3).unwrap().ended);
        let s = g.node_at(a, 10).unwrap();
        assert!(s.ended);
        assert_eq!(s.get("pos"), Some(&Value::from("1,1")));
        let mut cs = ChangeSet::new();
        cs.update(a, PropertySnapshot::new().with("pos", "2,2"));
        assert_eq!(g.commit(5, cs), Err(GraphError::NodeEnded(a)));
    }

    struct Counter {
        seen: std::sync::Arc<std::sync::Mutex<Vec<Timepoint>>>,
        follow: bool,
    }

    impl GraphListener for Counter {
        fn interest(&self) -> &[NodeKind] {
            &[NodeKind::Measurement]
        }

        fn on_commit(&mut self, graph: &TemporalGraph, commit: &CommitInfo) -> Result<Option<ChangeSet>, GraphError> {
            self.seen.lock().unwrap().push(commit.timepoint);
            if !self.follow {
                return Ok(None);
            }
            let mut cs = ChangeSet::new();
            cs.create(graph.allocate_id(), NodeKind::TuningRecord, PropertySnapshot::new());
            Ok(Some(cs))
        }
    }

    #[test]
    fn listeners_fire_once_per_matching_commit_in_order() {
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let mut g = TemporalGraph::new();
        g.add_listener(Box::new(Counter { seen: seen.clone(), follow: true }));
        for t in [0u64, 2, 4] {
            let mut cs = ChangeSet::new();
            cs.create(g.allocate_id(), NodeKind::Measurement, PropertySnapshot::new());
            let h = g.commit(t, cs).unwrap();
            assert_eq!(h.follow_up, Some(t + 1));
        }
        let mut cs = ChangeSet::new();
        cs.create(g.allocate_id(), NodeKind::Log, PropertySnapshot::new());
        g.commit(6, cs).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![0, 2, 4]);
        assert_eq!(g.nodes_of_kind(NodeKind::TuningRecord).len(), 3);
        assert_eq!(g.commit_timepoints(), &[0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn node_kind_names_parse() {
        assert_eq!(NodeKind::parse("tuningrecord"), Some(NodeKind::TuningRecord));
        assert_eq!(NodeKind::parse("RLAgent"), Some(NodeKind::RLAgent));
        assert_eq!(NodeKind::parse("nope"), None);
    }
}
