//! Stream-socket transport for the bus.
//!
//! One TCP connection per client. The first line a client sends is a
//! handshake `{"op":"sub"|"pub","topic":"…"}`. After a `pub` handshake the
//! client writes envelope lines; the broker re-stamps `seq` and `ts` and
//! publishes them on the topic. After a `sub` handshake the broker writes
//! every envelope of the topic, one per line, and closes the connection
//! when the bus shuts down (EOF is the end-of-bus signal).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{SystemTime, UNIX_EPOCH};

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};

use super::{decode, encode, Bus, BusError, Envelope, Payload, Publish, Subscription, Topic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandshakeOp {
    Sub,
    Pub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub op: HandshakeOp,
    pub topic: Topic,
}

impl Handshake {
    pub fn to_line(&self) -> Vec<u8> {
        let mut line = serde_json::to_vec(self).expect("handshake serialises");
        line.push(b'\n');
        line
    }

    pub fn from_line(line: &[u8]) -> Result<Self, BusError> {
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        serde_json::from_slice(body).map_err(|e| BusError::Parse {
            offset: e.column().saturating_sub(1),
            message: format!("handshake: {e}"),
        })
    }
}

/// Accepts socket clients and bridges them onto an in-process [`Bus`].
pub struct TcpBroker {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
}

impl TcpBroker {
    pub fn bind(addr: impl ToSocketAddrs, bus: Bus) -> Result<Self, BusError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let stop = stop.clone();
            let connections = connections.clone();
            thread::Builder::new()
                .name("bus-accept".into())
                .spawn(move || accept_loop(listener, bus, stop, connections))?
        };
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
            connections,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and drops all client connections. Close the bus first
    /// so subscribers receive everything already published.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.connections.lock().expect("connection list poisoned").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpBroker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, bus: Bus, stop: Arc<AtomicBool>, connections: Arc<Mutex<Vec<TcpStream>>>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("bus accept failed: {e}");
                continue;
            }
        };
        if let Ok(clone) = stream.try_clone() {
            connections.lock().expect("connection list poisoned").push(clone);
        }
        let bus = bus.clone();
        let spawned = thread::Builder::new()
            .name("bus-conn".into())
            .spawn(move || {
                if let Err(e) = serve_connection(stream, bus) {
                    log::debug!("bus connection ended: {e}");
                }
            });
        if let Err(e) = spawned {
            log::warn!("could not spawn connection thread: {e}");
        }
    }
}

fn serve_connection(stream: TcpStream, bus: Bus) -> Result<(), BusError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = Vec::new();
    if reader.read_until(b'\n', &mut line)? == 0 {
        return Ok(());
    }
    let handshake = Handshake::from_line(&line)?;
    match handshake.op {
        HandshakeOp::Pub => {
            loop {
                line.clear();
                if reader.read_until(b'\n', &mut line)? == 0 {
                    return Ok(());
                }
                let envelope = match decode(&line) {
                    Ok(e) => e,
                    Err(e) => {
                        log::warn!("dropping malformed line from publisher on {}: {e}", handshake.topic);
                        continue;
                    }
                };
                if envelope.topic != handshake.topic {
                    log::warn!(
                        "publisher for {} sent a message for {}; rejected",
                        handshake.topic,
                        envelope.topic
                    );
                    continue;
                }
                bus.publish(&handshake.topic, envelope.payload)?;
            }
        }
        HandshakeOp::Sub => {
            let sub = bus.subscribe(&handshake.topic)?;
            let mut writer = BufWriter::new(stream);
            loop {
                match sub.recv() {
                    Ok(envelope) => {
                        writer.write_all(&encode(&envelope)?)?;
                        if sub.is_empty() {
                            writer.flush()?;
                        }
                    }
                    Err(_) => {
                        writer.flush()?;
                        writer.get_ref().shutdown(Shutdown::Write)?;
                        return Ok(());
                    }
                }
            }
        }
    }
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Client that publishes onto one topic over a socket.
pub struct TcpPublisher {
    topic: Topic,
    writer: BufWriter<TcpStream>,
    next_seq: u64,
}

impl TcpPublisher {
    pub fn connect(addr: impl ToSocketAddrs, topic: Topic) -> Result<Self, BusError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream);
        writer.write_all(
            &Handshake {
                op: HandshakeOp::Pub,
                topic: topic.clone(),
            }
            .to_line(),
        )?;
        writer.flush()?;
        Ok(Self {
            topic,
            writer,
            next_seq: 0,
        })
    }

    /// Writes buffered lines to the socket.
    pub fn flush(&mut self) -> Result<(), BusError> {
        self.writer.flush().map_err(|_| BusError::Closed)
    }
}

impl Publish for TcpPublisher {
    /// Writes one line; the broker assigns the authoritative sequence
    /// number.
    fn publish(&mut self, payload: Payload) -> Result<(), BusError> {
        let envelope = Envelope {
            topic: self.topic.clone(),
            seq: self.next_seq,
            ts: now_ms(),
            payload,
        };
        let line = encode(&envelope)?;
        self.writer.write_all(&line).map_err(|_| BusError::Closed)?;
        self.flush()?;
        self.next_seq += 1;
        Ok(())
    }
}

impl Drop for TcpPublisher {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

/// Opens a socket subscription. Lines are decoded on a reader thread into
/// a bounded queue; the returned handle behaves like an in-process one and
/// reports [`BusError::Closed`] after the broker closes the connection.
pub fn subscribe(addr: impl ToSocketAddrs, topic: Topic, capacity: usize) -> Result<Subscription, BusError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.write_all(
        &Handshake {
            op: HandshakeOp::Sub,
            topic: topic.clone(),
        }
        .to_line(),
    )?;
    stream.flush()?;
    let (tx, rx) = bounded(capacity.max(1));
    thread::Builder::new()
        .name(format!("bus-sub-{topic}"))
        .spawn(move || {
            let mut reader = BufReader::new(stream);
            let mut line = Vec::new();
            loop {
                line.clear();
                match reader.read_until(b'\n', &mut line) {
                    Ok(0) | Err(_) => return,
                    Ok(_) => match decode(&line) {
                        Ok(envelope) => {
                            if tx.send(envelope).is_err() {
                                return;
                            }
                        }
                        Err(e) => log::warn!("dropping malformed line from broker: {e}"),
                    },
                }
            }
        })?;
    Ok(Subscription::from_channel(topic, rx))
}
