//! Wire frames: `u32 BE length || UTF-8 JSON {"topic","seq","payload_b64"}`.
//!
//! Control traffic uses the same shape on reserved `$ctl/` topics:
//! `$ctl/sub` (payload = pattern) from clients and `$ctl/ack` (seq = the
//! acknowledged publish, payload = status) from the broker.

use std::io::{ErrorKind, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::envelope::MAX_PLAINTEXT;
use crate::error::{Error, Result};

pub const SUBSCRIBE_TOPIC: &str = "$ctl/sub";
pub const ACK_TOPIC: &str = "$ctl/ack";
pub const MAX_PAYLOAD: usize = MAX_PLAINTEXT;
/// Base64 growth plus JSON framing headroom over the payload limit.
pub const MAX_FRAME: usize = MAX_PAYLOAD / 3 * 4 + 4096;

pub const ACK_OK: &str = "ok";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub topic: String,
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct WireFrame<'a> {
    topic: &'a str,
    seq: u64,
    payload_b64: String,
}

impl WireMessage {
    pub fn new(topic: impl Into<String>, seq: u64, payload: impl Into<Vec<u8>>) -> Self {
        WireMessage {
            topic: topic.into(),
            seq,
            payload: payload.into(),
        }
    }

    /// The complete frame, length prefix included.
    pub fn encode(&self) -> Vec<u8> {
        let body = serde_json::to_vec(&WireFrame {
            topic: &self.topic,
            seq: self.seq,
            payload_b64: B64.encode(&self.payload),
        })
        .expect("frame serializes");
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode_body(body: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Owned {
            topic: String,
            seq: u64,
            payload_b64: String,
        }
        let f: Owned =
            serde_json::from_slice(body).map_err(|e| Error::Frame(format!("bad frame body: {e}")))?;
        let payload = B64
            .decode(&f.payload_b64)
            .map_err(|e| Error::Frame(format!("bad payload encoding: {e}")))?;
        Ok(WireMessage {
            topic: f.topic,
            seq: f.seq,
            payload,
        })
    }
}

pub fn write_frame(w: &mut impl Write, msg: &WireMessage) -> Result<Vec<u8>> {
    let bytes = msg.encode();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes)
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any byte of
/// a new frame.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(WireMessage, Vec<u8>)>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Frame("connection closed mid-frame".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(Error::Frame(format!("frame of {n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    let msg = WireMessage::decode_body(&body)?;
    let mut raw = len.to_vec();
    raw.extend_from_slice(&body);
    Ok(Some((msg, raw)))
}
