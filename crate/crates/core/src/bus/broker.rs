use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender, TryRecvError};

use super::{BusError, Envelope, Payload, Topic};

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

/// Millisecond timestamp source stamped onto every envelope.
pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

const SEND_POLL: Duration = Duration::from_millis(20);

fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    })
}

#[derive(Default)]
struct TopicState {
    next_seq: u64,
    subscribers: Vec<Subscriber>,
}

struct Subscriber {
    tx: Sender<Envelope>,
    alive: Weak<()>,
}

struct Inner {
    topics: Mutex<HashMap<Topic, Arc<Mutex<TopicState>>>>,
    closed: AtomicBool,
    clock: Clock,
    capacity: usize,
}

/// In-process broker. Cheap to clone; all clones share the same topics.
///
/// Each topic has its own lock held for the whole fan-out of a message, so
/// every subscriber of a topic sees the same gap-free sequence. Subscriber
/// queues are bounded and a full queue blocks the publisher.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl Bus {
    pub fn new() -> Self {
        Self::with_options(system_clock(), DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_clock(clock: Clock) -> Self {
        Self::with_options(clock, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_options(clock: Clock, capacity: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                topics: Mutex::new(HashMap::new()),
                closed: AtomicBool::new(false),
                clock,
                capacity: capacity.max(1),
            }),
        }
    }

    fn topic_state(&self, topic: &Topic) -> Arc<Mutex<TopicState>> {
        let mut topics = self.inner.topics.lock().expect("bus topic map poisoned");
        topics.entry(topic.clone()).or_default().clone()
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    /// Publishes to every current subscriber and returns the assigned
    /// sequence number.
    pub fn publish(&self, topic: &Topic, payload: Payload) -> Result<u64, BusError> {
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        payload.validate_for(topic)?;
        let state = self.topic_state(topic);
        let mut state = state.lock().expect("bus topic poisoned");
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        let envelope = Envelope {
            topic: topic.clone(),
            seq: state.next_seq,
            ts: (self.inner.clock)(),
            payload,
        };
        let mut i = 0;
        while i < state.subscribers.len() {
            match self.blocking_send(&state.subscribers[i].tx, envelope.clone()) {
                Ok(true) => i += 1,
                // subscriber dropped its handle
                Ok(false) => {
                    state.subscribers.swap_remove(i);
                }
                Err(e) => return Err(e),
            }
        }
        state.next_seq += 1;
        Ok(envelope.seq)
    }

    fn blocking_send(&self, tx: &Sender<Envelope>, mut envelope: Envelope) -> Result<bool, BusError> {
        loop {
            match tx.send_timeout(envelope, SEND_POLL) {
                Ok(()) => return Ok(true),
                Err(SendTimeoutError::Disconnected(_)) => return Ok(false),
                Err(SendTimeoutError::Timeout(back)) => {
                    if self.is_closed() {
                        return Err(BusError::Closed);
                    }
                    envelope = back;
                }
            }
        }
    }

    /// Subscribes to messages published from now on. No replay.
    pub fn subscribe(&self, topic: &Topic) -> Result<Subscription, BusError> {
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        let (tx, rx) = bounded(self.inner.capacity);
        let state = self.topic_state(topic);
        let mut state = state.lock().expect("bus topic poisoned");
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        let alive = Arc::new(());
        state.subscribers.push(Subscriber {
            tx,
            alive: Arc::downgrade(&alive),
        });
        Ok(Subscription {
            topic: topic.clone(),
            rx,
            _alive: alive,
        })
    }

    pub fn subscriber_count(&self, topic: &Topic) -> usize {
        let state = self.topic_state(topic);
        let mut state = state.lock().expect("bus topic poisoned");
        state.subscribers.retain(|s| s.alive.strong_count() > 0);
        state.subscribers.len()
    }

    /// Shuts the bus down. Subscribers drain what is queued and then see
    /// [`BusError::Closed`].
    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        let topics: Vec<_> = {
            let topics = self.inner.topics.lock().expect("bus topic map poisoned");
            topics.values().cloned().collect()
        };
        for t in topics {
            t.lock().expect("bus topic poisoned").subscribers.clear();
        }
    }
}

/// Receiving end of a topic subscription.
#[derive(Debug)]
pub struct Subscription {
    topic: Topic,
    rx: Receiver<Envelope>,
    _alive: Arc<()>,
}

impl Subscription {
    pub(crate) fn from_channel(topic: Topic, rx: Receiver<Envelope>) -> Self {
        Self {
            topic,
            rx,
            _alive: Arc::new(()),
        }
    }

    pub fn topic(&self) -> &Topic {
        &self.topic
    }

    /// Blocks for the next message; `Closed` once the bus is shut down and
    /// the queue is drained.
    pub fn recv(&self) -> Result<Envelope, BusError> {
        self.rx.recv().map_err(|_| BusError::Closed)
    }

    pub fn try_recv(&self) -> Result<Option<Envelope>, BusError> {
        match self.rx.try_recv() {
            Ok(e) => Ok(Some(e)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(BusError::Closed),
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Envelope>, BusError> {
        match self.rx.recv_timeout(timeout) {
            Ok(e) => Ok(Some(e)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Closed),
        }
    }

    pub fn len(&self) -> usize {
        self.rx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rx.is_empty()
    }

    /// Iterates until the bus closes.
    pub fn iter(&self) -> impl Iterator<Item = Envelope> + '_ {
        self.rx.iter()
    }
}
