use std::collections::HashMap;
use std::io::{BufReader, BufWriter, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, SendTimeoutError, Sender};
use parking_lot::Mutex;

use super::frame::{read_frame, write_frame, WireMessage, ACK_OK, ACK_TOPIC, SUBSCRIBE_TOPIC};
use super::topic::{Topic, TopicPattern};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Per-connection outbound queue bound.
    pub queue_capacity: usize,
    /// How long a publish waits on a full subscriber queue before reporting
    /// backpressure.
    pub backpressure_timeout: Duration,
    /// Keep a copy of every frame read or written.
    pub capture: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            queue_capacity: 1024,
            backpressure_timeout: Duration::from_millis(500),
            capture: false,
        }
    }
}

enum Outgoing {
    Deliver { topic: String, payload: Vec<u8> },
    Ack { seq: u64, status: String },
}

struct Subscription {
    conn: u64,
    pattern: TopicPattern,
    tx: Sender<Outgoing>,
}

struct Shared {
    config: BrokerConfig,
    subs: Mutex<Vec<Subscription>>,
    capture: Mutex<Vec<Vec<u8>>>,
    shutdown: AtomicBool,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
    published: AtomicU64,
}

impl Shared {
    fn record(&self, raw: &[u8]) {
        if self.config.capture {
            self.capture.lock().push(raw.to_vec());
        }
    }
}

/// A running broker. Dropping the handle shuts it down.
pub struct BrokerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

pub fn bind(addr: &str, config: BrokerConfig) -> Result<BrokerHandle> {
    let listener = TcpListener::bind(addr).map_err(|source| Error::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let shared = Arc::new(Shared {
        config,
        subs: Mutex::new(Vec::new()),
        capture: Mutex::new(Vec::new()),
        shutdown: AtomicBool::new(false),
        conns: Mutex::new(HashMap::new()),
        next_conn: AtomicU64::new(1),
        published: AtomicU64::new(0),
    });
    let accept_shared = shared.clone();
    let accept = thread::Builder::new()
        .name("broker-accept".into())
        .spawn(move || accept_loop(listener, accept_shared))?;
    log::info!("broker listening on {local}");
    Ok(BrokerHandle {
        addr: local,
        shared,
        accept: Some(accept),
    })
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Every frame seen so far, in the order the broker read or wrote it.
    pub fn captured(&self) -> Vec<Vec<u8>> {
        self.shared.capture.lock().clone()
    }

    pub fn published_count(&self) -> u64 {
        self.shared.published.load(Ordering::Relaxed)
    }

    pub fn subscription_count(&self) -> usize {
        self.shared.subs.lock().len()
    }

    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.shared.conns.lock().drain() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        self.shared.subs.lock().clear();
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
                log::debug!("connection {conn} from {peer}");
                let shared = shared.clone();
                let _ = thread::Builder::new()
                    .name(format!("broker-conn-{conn}"))
                    .spawn(move || {
                        if let Err(e) = serve(conn, stream, &shared) {
                            log::debug!("connection {conn} closed: {e}");
                        }
                        shared.conns.lock().remove(&conn);
                    });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn serve(conn: u64, stream: TcpStream, shared: &Arc<Shared>) -> Result<()> {
    stream.set_nodelay(true)?;
    stream.set_nonblocking(false)?;
    shared.conns.lock().insert(conn, stream.try_clone()?);
    if shared.shutdown.load(Ordering::SeqCst) {
        return Ok(());
    }
    let (tx, rx) = bounded::<Outgoing>(shared.config.queue_capacity);
    let writer_stream = stream.try_clone()?;
    let writer_shared = shared.clone();
    let writer = thread::Builder::new()
        .name(format!("broker-writer-{conn}"))
        .spawn(move || write_loop(writer_stream, rx, writer_shared))?;

    let mut reader = BufReader::new(stream);
    let mut last_seq = 0u64;
    let result = loop {
        let (msg, raw) = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        shared.record(&raw);
        if msg.seq <= last_seq {
            // retransmission: acknowledge again, do not redeliver
            let _ = tx.send(Outgoing::Ack {
                seq: msg.seq,
                status: ACK_OK.into(),
            });
            continue;
        }
        last_seq = msg.seq;
        let status = if msg.topic == SUBSCRIBE_TOPIC {
            subscribe(conn, &msg, &tx, shared)
        } else {
            publish(&msg, shared)
        };
        if tx
            .send(Outgoing::Ack {
                seq: msg.seq,
                status,
            })
            .is_err()
        {
            break Ok(());
        }
    };
    shared.subs.lock().retain(|s| s.conn != conn);
    drop(tx);
    let _ = writer.join();
    result
}

fn subscribe(conn: u64, msg: &WireMessage, tx: &Sender<Outgoing>, shared: &Shared) -> String {
    let pattern = String::from_utf8_lossy(&msg.payload).into_owned();
    match TopicPattern::parse(&pattern) {
        Ok(pattern) => {
            shared.subs.lock().push(Subscription {
                conn,
                pattern,
                tx: tx.clone(),
            });
            ACK_OK.into()
        }
        Err(_) => format!("pattern_invalid:{pattern}"),
    }
}

fn publish(msg: &WireMessage, shared: &Shared) -> String {
    if Topic::parse(&msg.topic).is_err() {
        return format!("topic_invalid:{}", msg.topic);
    }
    if msg.payload.len() > super::frame::MAX_PAYLOAD {
        return "too_large".into();
    }
    shared.published.fetch_add(1, Ordering::Relaxed);
    let targets: Vec<Sender<Outgoing>> = {
        let subs = shared.subs.lock();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        subs.iter()
            .filter(|s| s.pattern.matches(&msg.topic))
            // one copy per connection even with overlapping subscriptions
            .filter(|s| seen.insert(s.conn, ()).is_none())
            .map(|s| s.tx.clone())
            .collect()
    };
    let mut status = ACK_OK.to_string();
    for tx in targets {
        let out = Outgoing::Deliver {
            topic: msg.topic.clone(),
            payload: msg.payload.clone(),
        };
        match tx.send_timeout(out, shared.config.backpressure_timeout) {
            Ok(()) => {}
            Err(SendTimeoutError::Timeout(_)) => status = "backpressure".into(),
            Err(SendTimeoutError::Disconnected(_)) => {}
        }
    }
    status
}

fn write_loop(stream: TcpStream, rx: Receiver<Outgoing>, shared: Arc<Shared>) {
    let mut w = BufWriter::new(stream);
    let mut delivery_seq = 0u64;
    for item in rx {
        let msg = match item {
            Outgoing::Deliver { topic, payload } => {
                delivery_seq += 1;
                WireMessage::new(topic, delivery_seq, payload)
            }
            Outgoing::Ack { seq, status } => WireMessage::new(ACK_TOPIC, seq, status.into_bytes()),
        };
        match write_frame(&mut w, &msg) {
            Ok(raw) => shared.record(&raw),
            Err(e) => {
                log::debug!("write failed: {e}");
                break;
            }
        }
    }
}
