//! End-to-end wiring: harness → `rl-traces` → stream engine →
//! `history-awareness` → temporal graph (+ tuner listener) → `feedback` →
//! harness.
//!
//! Components run on their own threads. At every episode boundary the
//! harness waits until everything it has published so far has travelled
//! through the engine and the graph and any resulting feedback has reached
//! it. Feedback is stamped for two episodes after the window it judges, so
//! with this drain the run is a pure function of its configuration.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bus::{
    tcp, Bus, BusError, FeedbackPayload, Payload, Publish, Subscription, Topic, TopicPublisher, TracePayload,
    DEFAULT_QUEUE_CAPACITY,
};
use crate::engine::{ComplexEvent, EngineError, StreamEngine};
use crate::graph::{event_timepoint, GraphError, HistoryRecorder, TemporalGraph, TunerHandle, TunerListener};
use crate::harness::{run_training, AgentLink, HarnessError, RunLog, TrainingConfig};
use crate::tuner::{HyperparameterVector, Tuner, TunerConfig, TunerError, TunerState};

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("component failed: {0}")]
    Component(String),
    #[error("pipeline stalled waiting for {0}")]
    Stalled(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transport {
    InProcess,
    /// Runs a socket broker on this address; every component connects to
    /// it as a client.
    Tcp(SocketAddr),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub training: TrainingConfig,
    /// Window length and stability threshold of the stream pattern (and of
    /// the tuner when enabled).
    pub tuner: TunerConfig,
    /// Whether the tuner listener drives γ; baselines still record history.
    pub tune: bool,
    pub commit_log: Option<PathBuf>,
    pub transport: Transport,
    /// Longest wait at a boundary before the run is declared stalled.
    pub stall_timeout: Duration,
}

impl PipelineConfig {
    pub fn new(training: TrainingConfig, tuner: TunerConfig, tune: bool) -> Self {
        Self {
            training,
            tuner,
            tune,
            commit_log: None,
            transport: Transport::InProcess,
            stall_timeout: Duration::from_secs(60),
        }
    }

    fn tuner_seed(&self) -> u64 {
        self.training.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

pub struct RunOutput {
    pub log: RunLog,
    pub graph: TemporalGraph,
    pub tuner_state: Option<TunerState>,
    pub history_events: u64,
}

fn build_graph(config: &PipelineConfig, feedback: Box<dyn Publish>) -> Result<(TemporalGraph, Option<TunerHandle>), PipelineError> {
    let mut graph = match &config.commit_log {
        Some(path) => TemporalGraph::with_log(path)?,
        None => TemporalGraph::new(),
    };
    let handle = if config.tune {
        let initial = HyperparameterVector::new(config.training.initial_gamma, Default::default(), config.tuner.bounds);
        let tuner = Tuner::new(config.tuner.clone(), initial, config.tuner_seed())?;
        let (listener, handle) = TunerListener::new(tuner, feedback);
        graph.add_listener(Box::new(listener));
        Some(handle)
    } else {
        None
    };
    Ok((graph, handle))
}

fn validate(config: &PipelineConfig) -> Result<(), PipelineError> {
    config.training.validate()?;
    config.tuner.validate()?;
    if config.tuner.bounds != config.training.bounds {
        return Err(HarnessError::Config("tuner and agent γ bounds differ".into()).into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// single-threaded reference

struct InlineLink {
    engine: StreamEngine,
    recorder: HistoryRecorder,
    graph: TemporalGraph,
    feedback: Subscription,
    history_seq: u64,
}

impl InlineLink {
    fn ingest(&mut self, events: Vec<ComplexEvent>) -> Result<(), HarnessError> {
        for ev in events {
            let seq = self.history_seq;
            self.history_seq += 1;
            self.recorder
                .ingest_at(&mut self.graph, &ev, event_timepoint(seq), 0)
                .map_err(|e| HarnessError::Link(e.to_string()))?;
        }
        Ok(())
    }
}

impl AgentLink for InlineLink {
    fn publish_trace(&mut self, trace: TracePayload) -> Result<(), HarnessError> {
        let events = self.engine.on_trace(&trace).map_err(|e| HarnessError::Link(e.to_string()))?;
        self.ingest(events)
    }

    fn boundary(&mut self, _: u64) -> Result<Vec<FeedbackPayload>, HarnessError> {
        let mut out = Vec::new();
        while let Some(env) = self.feedback.try_recv()? {
            if let Payload::Feedback(f) = env.payload {
                out.push(f);
            }
        }
        Ok(out)
    }

    fn finish(&mut self) -> Result<(), HarnessError> {
        let events = self.engine.flush_end_of_run();
        self.ingest(events)
    }
}

/// Runs the whole loop on the calling thread. Produces the same run log and
/// history as [`run_pipeline`].
pub fn run_inline(config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    validate(config)?;
    let bus = Bus::new();
    let feedback = bus.subscribe(&Topic::feedback())?;
    let (graph, handle) = build_graph(config, Box::new(TopicPublisher::new(bus.clone(), Topic::feedback())))?;
    let mut link = InlineLink {
        engine: StreamEngine::with_params(config.tuner.window_length, config.tuner.th_stable)?,
        recorder: HistoryRecorder::new(config.training.agent_name.clone()),
        graph,
        feedback,
        history_seq: 0,
    };
    let log = run_training(&config.training, &mut link)?;
    bus.close();
    Ok(RunOutput {
        log,
        tuner_state: handle.map(|h| h.state()),
        history_events: link.history_seq,
        graph: link.graph,
    })
}

// ---------------------------------------------------------------------------
// threaded pipeline

#[derive(Debug, Default)]
struct Counts {
    traces_published: u64,
    traces_processed: u64,
    history_published: u64,
    history_processed: u64,
    feedback_published: u64,
    flush_requested: bool,
    engine_done: bool,
    failure: Option<String>,
}

#[derive(Default)]
struct Progress {
    counts: Mutex<Counts>,
    changed: Condvar,
}

impl Progress {
    fn update(&self, f: impl FnOnce(&mut Counts)) {
        f(&mut self.counts.lock().expect("progress poisoned"));
        self.changed.notify_all();
    }

    fn read<T>(&self, f: impl FnOnce(&Counts) -> T) -> T {
        f(&self.counts.lock().expect("progress poisoned"))
    }

    fn fail(&self, message: String) {
        self.update(|c| {
            c.failure.get_or_insert(message);
        });
    }

    fn wait(&self, what: &'static str, timeout: Duration, ready: impl Fn(&Counts) -> bool) -> Result<(), PipelineError> {
        let deadline = Instant::now() + timeout;
        let mut counts = self.counts.lock().expect("progress poisoned");
        loop {
            if let Some(f) = &counts.failure {
                return Err(PipelineError::Component(f.clone()));
            }
            if ready(&counts) {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(PipelineError::Stalled(what));
            }
            counts = self
                .changed
                .wait_timeout(counts, (deadline - now).min(Duration::from_millis(100)))
                .expect("progress poisoned")
                .0;
        }
    }
}

/// Publisher that counts successful feedback publications.
struct CountingPublisher {
    inner: Box<dyn Publish>,
    progress: Arc<Progress>,
}

impl Publish for CountingPublisher {
    fn publish(&mut self, payload: Payload) -> Result<(), BusError> {
        self.inner.publish(payload)?;
        self.progress.update(|c| c.feedback_published += 1);
        Ok(())
    }
}

struct Endpoints {
    broker: Option<tcp::TcpBroker>,
    addr: Option<SocketAddr>,
}

impl Endpoints {
    fn publisher(&self, bus: &Bus, topic: Topic) -> Result<Box<dyn Publish>, PipelineError> {
        Ok(match self.addr {
            Some(addr) => Box::new(tcp::TcpPublisher::connect(addr, topic)?),
            None => Box::new(TopicPublisher::new(bus.clone(), topic)),
        })
    }

    fn subscribe(&self, bus: &Bus, topic: Topic, timeout: Duration) -> Result<Subscription, PipelineError> {
        match self.addr {
            Some(addr) => {
                let before = bus.subscriber_count(&topic);
                let sub = tcp::subscribe(addr, topic.clone(), DEFAULT_QUEUE_CAPACITY)?;
                // the broker registers the subscription asynchronously
                let deadline = Instant::now() + timeout;
                while bus.subscriber_count(&topic) <= before {
                    if Instant::now() >= deadline {
                        return Err(PipelineError::Stalled("socket subscription"));
                    }
                    thread::sleep(Duration::from_millis(1));
                }
                Ok(sub)
            }
            None => Ok(bus.subscribe(&topic)?),
        }
    }
}

struct ThreadedLink {
    traces: Box<dyn Publish>,
    feedback: Subscription,
    received: u64,
    progress: Arc<Progress>,
    timeout: Duration,
}

impl ThreadedLink {
    fn drain(&self) -> Result<(), PipelineError> {
        self.progress.wait("stream engine and graph", self.timeout, |c| {
            c.traces_processed == c.traces_published && c.history_processed == c.history_published
        })
    }
}

fn link_err(e: PipelineError) -> HarnessError {
    match e {
        PipelineError::Harness(h) => h,
        other => HarnessError::Link(other.to_string()),
    }
}

impl AgentLink for ThreadedLink {
    fn publish_trace(&mut self, trace: TracePayload) -> Result<(), HarnessError> {
        if let Some(f) = self.progress.read(|c| c.failure.clone()) {
            return Err(HarnessError::Link(f));
        }
        self.traces.publish(Payload::Trace(trace))?;
        self.progress.update(|c| c.traces_published += 1);
        Ok(())
    }

    fn boundary(&mut self, _: u64) -> Result<Vec<FeedbackPayload>, HarnessError> {
        self.drain().map_err(link_err)?;
        let target = self.progress.read(|c| c.feedback_published);
        let deadline = Instant::now() + self.timeout;
        let mut out = Vec::new();
        while self.received < target {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(link_err(PipelineError::Stalled("feedback delivery")));
            }
            if let Some(env) = self.feedback.recv_timeout(remaining.min(Duration::from_millis(100)))? {
                self.received += 1;
                match env.payload {
                    Payload::Feedback(f) => out.push(f),
                    other => log::warn!("unexpected payload on feedback topic: {other:?}"),
                }
            }
        }
        Ok(out)
    }

    fn finish(&mut self) -> Result<(), HarnessError> {
        self.drain().map_err(link_err)?;
        self.progress.update(|c| c.flush_requested = true);
        Ok(())
    }
}

fn engine_loop(
    mut engine: StreamEngine,
    traces: Subscription,
    mut history: Box<dyn Publish>,
    progress: Arc<Progress>,
) -> Result<(), PipelineError> {
    let mut publish = |events: Vec<ComplexEvent>, progress: &Progress| -> Result<(), PipelineError> {
        for ev in &events {
            history.publish(Payload::History(ev.to_payload()))?;
        }
        progress.update(|c| c.history_published += events.len() as u64);
        Ok(())
    };
    loop {
        match traces.recv_timeout(POLL) {
            Ok(Some(env)) => {
                let Payload::Trace(t) = env.payload else {
                    return Err(PipelineError::Component("non-trace payload on rl-traces".into()));
                };
                let events = engine.on_trace(&t)?;
                publish(events, &progress)?;
                progress.update(|c| c.traces_processed += 1);
            }
            Ok(None) => {
                if progress.read(|c| c.flush_requested) && traces.is_empty() {
                    publish(engine.flush_end_of_run(), &progress)?;
                    progress.update(|c| c.engine_done = true);
                    return Ok(());
                }
            }
            Err(BusError::Closed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
}

fn graph_loop(
    mut graph: TemporalGraph,
    mut recorder: HistoryRecorder,
    history: Subscription,
    window_length: usize,
    progress: Arc<Progress>,
) -> Result<TemporalGraph, PipelineError> {
    loop {
        match history.recv_timeout(POLL) {
            Ok(Some(env)) => {
                let Payload::History(p) = env.payload else {
                    return Err(PipelineError::Component("non-history payload on history-awareness".into()));
                };
                let ev = ComplexEvent::from_payload(&p, window_length)?;
                recorder.ingest_complex_event(&mut graph, &ev, env.seq, env.ts)?;
                progress.update(|c| c.history_processed += 1);
            }
            Ok(None) => {
                if progress.read(|c| c.engine_done && c.history_processed == c.history_published) {
                    return Ok(graph);
                }
            }
            Err(BusError::Closed) => return Ok(graph),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Runs harness, engine and graph on separate threads over the configured
/// transport. Shutdown order: harness, engine, graph, bus.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    validate(config)?;
    let bus = Bus::new();
    let endpoints = match &config.transport {
        Transport::InProcess => Endpoints { broker: None, addr: None },
        Transport::Tcp(addr) => {
            let broker = tcp::TcpBroker::bind(addr, bus.clone())?;
            let addr = broker.local_addr();
            Endpoints {
                broker: Some(broker),
                addr: Some(addr),
            }
        }
    };
    let progress = Arc::new(Progress::default());
    let timeout = config.stall_timeout;

    let trace_sub = endpoints.subscribe(&bus, Topic::rl_traces(), timeout)?;
    let history_sub = endpoints.subscribe(&bus, Topic::history_awareness(), timeout)?;
    let feedback_sub = endpoints.subscribe(&bus, Topic::feedback(), timeout)?;
    let history_pub = endpoints.publisher(&bus, Topic::history_awareness())?;
    let feedback_pub = CountingPublisher {
        inner: endpoints.publisher(&bus, Topic::feedback())?,
        progress: progress.clone(),
    };
    let trace_pub = endpoints.publisher(&bus, Topic::rl_traces())?;

    let engine = StreamEngine::with_params(config.tuner.window_length, config.tuner.th_stable)?;
    let (graph, handle) = build_graph(config, Box::new(feedback_pub))?;
    let recorder = HistoryRecorder::new(config.training.agent_name.clone());

    let engine_thread = {
        let progress = progress.clone();
        thread::Builder::new().name("stream-engine".into()).spawn(move || {
            let r = engine_loop(engine, trace_sub, history_pub, progress.clone());
            if let Err(e) = &r {
                progress.fail(format!("stream engine: {e}"));
            }
            r
        })
    }
    .map_err(|e| PipelineError::Component(e.to_string()))?;
    let graph_thread = {
        let progress = progress.clone();
        let x = config.tuner.window_length;
        thread::Builder::new().name("temporal-graph".into()).spawn(move || {
            let r = graph_loop(graph, recorder, history_sub, x, progress.clone());
            if let Err(e) = &r {
                progress.fail(format!("temporal graph: {e}"));
            }
            r
        })
    }
    .map_err(|e| PipelineError::Component(e.to_string()))?;

    let mut link = ThreadedLink {
        traces: trace_pub,
        feedback: feedback_sub,
        received: 0,
        progress: progress.clone(),
        timeout,
    };
    let log = run_training(&config.training, &mut link);
    if log.is_err() {
        progress.fail("harness aborted".into());
    }
    drop(link);

    let engine_result = engine_thread
        .join()
        .map_err(|_| PipelineError::Component("stream engine panicked".into()))?;
    let graph_result = graph_thread
        .join()
        .map_err(|_| PipelineError::Component("temporal graph panicked".into()))?;
    bus.close();
    drop(endpoints.broker);

    let log = log?;
    engine_result?;
    let graph = graph_result?;
    let history_events = progress.read(|c| c.history_published);
    Ok(RunOutput {
        log,
        graph,
        tuner_state: handle.map(|h| h.state()),
        history_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeKind, TuningRecordView};

    fn config(tune: bool) -> PipelineConfig {
        let training = TrainingConfig {
            episodes: 30,
            steps_per_episode: 20,
            initial_gamma: 0.5,
            seed: 11,
            ..Default::default()
        };
        let tuner = TunerConfig {
            th_stable: 1.0,
            ..Default::default()
        };
        PipelineConfig::new(training, tuner, tune)
    }

    #[test]
    fn threaded_matches_inline() {
        let cfg = config(true);
        let inline = run_inline(&cfg).unwrap();
        let threaded = run_pipeline(&cfg).unwrap();
        assert_eq!(inline.log, threaded.log);
        assert_eq!(inline.history_events, threaded.history_events);
        let a = TuningRecordView::all(&inline.graph).unwrap();
        let b = TuningRecordView::all(&threaded.graph).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        // episode averages for all 30 episodes plus 10 windows
        assert_eq!(inline.graph.nodes_of_kind(NodeKind::Measurement).len() as u64, inline.history_events);
    }

    #[test]
    fn tcp_matches_in_process() {
        let cfg = config(true);
        let mut tcp_cfg = cfg.clone();
        tcp_cfg.transport = Transport::Tcp("127.0.0.1:0".parse().unwrap());
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&tcp_cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(
            TuningRecordView::all(&a.graph).unwrap(),
            TuningRecordView::all(&b.graph).unwrap()
        );
    }

    #[test]
    fn gamma_column_follows_tuning_records() {
        let out = run_pipeline(&config(true)).unwrap();
        let mut expected = vec![0.5; out.log.episodes.len()];
        for r in TuningRecordView::all(&out.graph).unwrap() {
            if r.feedback_sent() {
                for g in expected.iter_mut().skip(r.effective_episode as usize) {
                    *g = r.new_gamma;
                }
            }
        }
        assert_eq!(out.log.gammas(), expected);
    }

    #[test]
    fn untuned_run_records_history_only() {
        let out = run_pipeline(&config(false)).unwrap();
        assert!(out.tuner_state.is_none());
        assert!(out.graph.nodes_of_kind(NodeKind::TuningRecord).is_empty());
        let measurements = out.graph.nodes_of_kind(NodeKind::Measurement).len() as u64;
        assert_eq!(measurements, out.history_events);
        assert!(measurements >= 40);
        assert!(out.log.gammas().iter().all(|g| *g == 0.5));
    }

    #[test]
    fn port_in_use_aborts_before_training() {
        let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let mut cfg = config(true);
        cfg.transport = Transport::Tcp(taken.local_addr().unwrap());
        assert!(matches!(run_pipeline(&cfg), Err(PipelineError::Bus(_))));
    }
}
