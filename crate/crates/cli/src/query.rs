//! Read-only queries over a recorded history.

use std::fmt::Write as _;
use std::path::Path;

use histune_core::graph::{GraphError, NodeId, NodeKind, NodeState, TemporalGraph, TuningRecordView, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    /// λ*, max_r and the window that achieved it.
    Best,
    /// One row per tuning record.
    Trajectory,
    /// Every measurement in commit order.
    Measurements,
    Kind(NodeKind),
    Node(u64),
    /// Every version committed inside `[from, to]`.
    Range { from: u64, to: u64 },
}

impl Query {
    pub fn parse(words: &[String]) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Config(m);
        let num = |s: Option<&String>, what: &str| -> Result<u64, CliError> {
            s.ok_or_else(|| bad(format!("missing {what}")))?
                .parse()
                .map_err(|_| bad(format!("{what} must be a non-negative integer")))
        };
        let words: Vec<&str> = words.iter().map(String::as_str).collect();
        match words.as_slice() {
            [] | ["best"] => Ok(Query::Best),
            ["trajectory"] => Ok(Query::Trajectory),
            ["measurements"] => Ok(Query::Measurements),
            ["kind", k] => NodeKind::parse(k)
                .map(Query::Kind)
                .ok_or_else(|| bad(format!("unknown node kind {k:?}"))),
            ["node", id] => Ok(Query::Node(num(Some(&id.to_string()), "node id")?)),
            ["range", from, to] => Ok(Query::Range {
                from: num(Some(&from.to_string()), "range start")?,
                to: num(Some(&to.to_string()), "range end")?,
            }),
            other => Err(bad(format!(
                "unknown query {other:?} (best | trajectory | measurements | kind K | node ID | range FROM TO)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Best {
    pub gamma: f64,
    pub max_r: f64,
    pub window_index: u64,
    pub first_episode: u64,
    pub last_episode: u64,
}

impl std::fmt::Display for Best {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "best gamma={} max_r={} window={} episodes={}..{}",
            self.gamma, self.max_r, self.window_index, self.first_episode, self.last_episode
        )
    }
}

fn graph_err(e: GraphError) -> CliError {
    match e {
        GraphError::CorruptLog { .. } | GraphError::Io(_) => CliError::Input(e.to_string()),
        other => CliError::Component(other.to_string()),
    }
}

/// λ* from the last tuning record and the record that set its max_r.
pub fn best(graph: &TemporalGraph) -> Result<Option<Best>, CliError> {
    let records = TuningRecordView::all(graph).map_err(graph_err)?;
    let Some(last) = records.last() else {
        return Ok(None);
    };
    let Some(setter) = records
        .iter()
        .rev()
        .find(|r| r.decision == "new_max" && r.r_win == last.max_r)
    else {
        return Ok(None);
    };
    Ok(Some(Best {
        gamma: last.max_gamma,
        max_r: last.max_r,
        window_index: setter.window_index,
        first_episode: setter.first_episode,
        last_episode: setter.last_episode,
    }))
}

fn agent(graph: &TemporalGraph) -> Result<NodeState, CliError> {
    let id = *graph
        .nodes_of_kind(NodeKind::RLAgent)
        .first()
        .ok_or_else(|| CliError::Input("history has no agent".into()))?;
    graph.node(id).map_err(graph_err)
}

/// γ per episode as implied by the agent's initial γ and the feedback the
/// tuning records say was delivered.
pub fn reconstruct_gammas(graph: &TemporalGraph) -> Result<Vec<f64>, CliError> {
    let initial = agent(graph)?
        .get("initial_gamma")
        .and_then(Value::as_f64)
        .ok_or_else(|| CliError::Input("agent has no initial_gamma".into()))?;
    let mut episodes = 0u64;
    for id in graph.nodes_of_kind(NodeKind::Measurement) {
        let m = graph.node(*id).map_err(graph_err)?;
        if m.get("kind").and_then(Value::as_str) == Some("episode_avg") {
            let e = m.get("episode").and_then(Value::as_i64).unwrap_or(0) as u64;
            episodes = episodes.max(e + 1);
        }
    }
    let mut gammas = vec![initial; episodes as usize];
    for r in TuningRecordView::all(graph).map_err(graph_err)? {
        if r.feedback_sent() {
            for g in gammas.iter_mut().skip(r.effective_episode as usize) {
                *g = r.new_gamma;
            }
        }
    }
    Ok(gammas)
}

fn fmt_value(v: &Value) -> String {
    match v {
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Text(s) => format!("{s:?}"),
        Value::FloatList(l) => format!("{l:?}"),
    }
}

fn fmt_state(s: &NodeState) -> String {
    let mut out = format!("{} {:?}", s.id, s.kind);
    for (k, v) in &s.snapshot.properties {
        let _ = write!(out, " {k}={}", fmt_value(v));
    }
    for (rel, targets) in &s.snapshot.edges {
        let ids: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
        let _ = write!(out, " {rel}->[{}]", ids.join(","));
    }
    if s.ended {
        out.push_str(" (ended)");
    }
    out
}

pub fn run_query(graph: &TemporalGraph, query: &Query) -> Result<String, CliError> {
    let mut out = String::new();
    match query {
        Query::Best => match best(graph)? {
            Some(b) => writeln!(out, "{b}").expect("string write"),
            None => writeln!(out, "no stable window improved on the initial max_r").expect("string write"),
        },
        Query::Trajectory => {
            writeln!(out, "timepoint\twindow\tepisodes\tdecision\told_gamma\tnew_gamma\tmax_r\teffective_episode\tsent")
                .expect("string write");
            for r in TuningRecordView::all(graph).map_err(graph_err)? {
                writeln!(
                    out,
                    "{}\t{}\t{}..{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.timepoint,
                    r.window_index,
                    r.first_episode,
                    r.last_episode,
                    r.decision,
                    r.old_gamma,
                    r.new_gamma,
                    r.max_r,
                    r.effective_episode,
                    r.feedback_sent()
                )
                .expect("string write");
            }
        }
        Query::Measurements => {
            let mut rows: Vec<NodeState> = graph
                .nodes_of_kind(NodeKind::Measurement)
                .iter()
                .map(|id| graph.node(*id))
                .collect::<Result<_, _>>()
                .map_err(graph_err)?;
            rows.sort_by_key(|s| s.created_at);
            for s in rows {
                writeln!(out, "t={} {}", s.created_at, fmt_state(&s)).expect("string write");
            }
        }
        Query::Kind(kind) => {
            for id in graph.nodes_of_kind(*kind) {
                writeln!(out, "{}", fmt_state(&graph.node(*id).map_err(graph_err)?)).expect("string write");
            }
        }
        Query::Node(id) => {
            for (t, s) in graph.history(NodeId(*id), 0, u64::MAX).map_err(graph_err)? {
                writeln!(out, "t={t} {}", fmt_state(&s)).expect("string write");
            }
        }
        Query::Range { from, to } => {
            if from > to {
                return Err(CliError::Config(format!("empty range {from}..{to}")));
            }
            let mut rows = Vec::new();
            for kind in NodeKind::ALL {
                for id in graph.nodes_of_kind(kind) {
                    for (t, s) in graph.history(*id, *from, *to).map_err(graph_err)? {
                        rows.push((t, s));
                    }
                }
            }
            rows.sort_by_key(|(t, s)| (*t, s.id));
            for (t, s) in rows {
                writeln!(out, "t={t} {}", fmt_state(&s)).expect("string write");
            }
        }
    }
    Ok(out)
}

/// Replays the commit log at `path` and answers `query`.
pub fn cmd_query(path: &Path, query: &Query) -> Result<String, CliError> {
    let graph = TemporalGraph::open(path).map_err(graph_err)?;
    run_query(&graph, query)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_queries() {
        assert_eq!(Query::parse(&words("best")).unwrap(), Query::Best);
        assert_eq!(Query::parse(&[]).unwrap(), Query::Best);
        assert_eq!(Query::parse(&words("kind tuningrecord")).unwrap(), Query::Kind(NodeKind::TuningRecord));
        assert_eq!(Query::parse(&words("range 3 9")).unwrap(), Query::Range { from: 3, to: 9 });
        assert!(Query::parse(&words("range 3")).is_err());
        assert!(Query::parse(&words("kind nope")).is_err());
    }

    #[test]
    fn empty_range_lists_nothing() {
        let g = TemporalGraph::new();
        assert_eq!(run_query(&g, &Query::Range { from: 0, to: 10 }).unwrap(), "");
        assert_eq!(best(&g).unwrap(), None);
    }
}
