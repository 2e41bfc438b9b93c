use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use parking_lot::Mutex;

use super::frame::{read_frame, write_frame, WireMessage, ACK_OK, ACK_TOPIC, MAX_PAYLOAD, SUBSCRIBE_TOPIC};
use super::topic::{Topic, TopicPattern};
use crate::error::{Error, Result};

pub const DEFAULT_ACK_TIMEOUT: Duration = Duration::from_secs(5);

/// One broker connection. Publishes block until the broker acknowledges
/// them; deliveries are read on a background thread and de-duplicated by
/// sequence number.
pub struct BrokerClient {
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    next_seq: AtomicU64,
    acks: Receiver<(u64, String)>,
    deliveries: Receiver<WireMessage>,
    connected: Arc<AtomicBool>,
    ack_timeout: Duration,
    ack_lock: Mutex<()>,
}

impl BrokerClient {
    pub fn connect(addr: &str) -> Result<Self> {
        let unreachable = |reason: String| Error::BrokerUnreachable {
            addr: addr.to_string(),
            reason,
        };
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| unreachable(e.to_string()))?
            .next()
            .ok_or_else(|| unreachable("address did not resolve".into()))?;
        let stream = TcpStream::connect_timeout(&sock, Duration::from_secs(2))
            .map_err(|e| unreachable(e.to_string()))?;
        stream.set_nodelay(true)?;

        let (ack_tx, acks) = unbounded();
        let (del_tx, deliveries) = unbounded();
        let connected = Arc::new(AtomicBool::new(true));
        let mut reader = BufReader::new(stream.try_clone()?);
        let flag = connected.clone();
        thread::Builder::new()
            .name("broker-client-reader".into())
            .spawn(move || {
                let mut last_delivery = 0u64;
                while let Ok(Some((msg, _))) = read_frame(&mut reader) {
                    if msg.topic == ACK_TOPIC {
                        let status = String::from_utf8_lossy(&msg.payload).into_owned();
                        if ack_tx.send((msg.seq, status)).is_err() {
                            break;
                        }
                    } else if msg.seq > last_delivery {
                        last_delivery = msg.seq;
                        if del_tx.send(msg).is_err() {
                            break;
                        }
                    }
                }
                flag.store(false, Ordering::SeqCst);
            })?;

        Ok(BrokerClient {
            writer: Mutex::new(BufWriter::new(stream.try_clone()?)),
            stream,
            next_seq: AtomicU64::new(1),
            acks,
            deliveries,
            connected,
            ack_timeout: DEFAULT_ACK_TIMEOUT,
            ack_lock: Mutex::new(()),
        })
    }

    pub fn with_ack_timeout(mut self, timeout: Duration) -> Self {
        self.ack_timeout = timeout;
        self
    }

    pub fn is_connected(&self) -> bool {
        self.connected.load(Ordering::SeqCst)
    }

    fn send_and_wait(&self, topic: &str, payload: Vec<u8>) -> Result<(u64, String)> {
        if !self.is_connected() {
            return Err(Error::NotConnected);
        }
        // one outstanding request at a time keeps acks in lockstep
        let _one = self.ack_lock.lock();
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let msg = WireMessage::new(topic, seq, payload);
        write_frame(&mut *self.writer.lock(), &msg).map_err(|_| Error::NotConnected)?;
        loop {
            match self.acks.recv_timeout(self.ack_timeout) {
                Ok((s, status)) if s == seq => return Ok((seq, status)),
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Timeout(format!("ack of {topic} #{seq}")))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::NotConnected),
            }
        }
    }

    /// Publishes and waits for the acknowledgement; returns the sequence number.
    pub fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64> {
        Topic::parse(topic)?;
        if payload.len() > MAX_PAYLOAD {
            return Err(Error::PayloadTooLarge(payload.len()));
        }
        let (seq, status) = self.send_and_wait(topic, payload.to_vec())?;
        match status.as_str() {
            ACK_OK => Ok(seq),
            "backpressure" => Err(Error::Backpressure),
            s if s.starts_with("topic_invalid") => Err(Error::TopicInvalid(topic.to_string())),
            other => Err(Error::Publish(other.to_string())),
        }
    }

    pub fn subscribe(&self, pattern: &str) -> Result<()> {
        TopicPattern::parse(pattern)?;
        let (_, status) = self.send_and_wait(SUBSCRIBE_TOPIC, pattern.as_bytes().to_vec())?;
        if status == ACK_OK {
            Ok(())
        } else {
            Err(Error::PatternInvalid(pattern.to_string()))
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<WireMessage>> {
        match self.deliveries.recv_timeout(timeout) {
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::NotConnected),
        }
    }

    pub fn try_recv(&self) -> Option<WireMessage> {
        self.deliveries.try_recv().ok()
    }

    pub fn close(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        self.close();
    }
}
