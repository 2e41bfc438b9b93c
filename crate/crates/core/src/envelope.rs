//! AES-256-GCM envelopes for data in transit and sealing of rules at rest.
//!
//! Nonces are `salt(4) || counter(8, big-endian)`. The salt is drawn once per
//! [`NonceSequence`]; the counter never wraps.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rule::{DeviceId, Rule};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const ENVELOPE_VERSION: u32 = 1;
pub const MAX_PLAINTEXT: usize = 1 << 20;

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    bytes: [u8; KEY_LEN],
    key_id: String,
}

impl SymmetricKey {
    pub fn new(key_id: impl Into<String>, bytes: [u8; KEY_LEN]) -> Self {
        SymmetricKey {
            bytes,
            key_id: key_id.into(),
        }
    }

    pub fn from_slice(key_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let bytes: [u8; KEY_LEN] = bytes.try_into().map_err(|_| {
            Error::InvalidConfig(format!("key must be {KEY_LEN} bytes, got {}", bytes.len()))
        })?;
        Ok(Self::new(key_id, bytes))
    }

    pub fn from_hex(key_id: impl Into<String>, text: &str) -> Result<Self> {
        let raw = hex::decode(text.trim())
            .map_err(|e| Error::InvalidConfig(format!("key is not hex: {e}")))?;
        Self::from_slice(key_id, &raw)
    }

    pub fn generate<R: RngCore + ?Sized>(key_id: impl Into<String>, rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        Self::new(key_id, bytes)
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn secret_bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new((&self.bytes).into())
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymmetricKey")
            .field("key_id", &self.key_id)
            .field("bytes", &"<redacted>")
            .finish()
    }
}

#[derive(Debug)]
pub struct NonceSequence {
    salt: [u8; 4],
    counter: AtomicU64,
}

impl NonceSequence {
    pub fn random() -> Self {
        let mut salt = [0u8; 4];
        rand::thread_rng().fill_bytes(&mut salt);
        Self::with_salt(salt, 0)
    }

    pub fn with_salt(salt: [u8; 4], start: u64) -> Self {
        NonceSequence {
            salt,
            counter: AtomicU64::new(start),
        }
    }

    /// Hands out the next nonce. Fails once the counter reaches `u64::MAX`
    /// instead of wrapping.
    pub fn next(&self) -> Option<[u8; NONCE_LEN]> {
        let n = self
            .counter
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| c.checked_add(1))
            .ok()?;
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&self.salt);
        nonce[4..].copy_from_slice(&n.to_be_bytes());
        Some(nonce)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "WireEnvelope", try_from = "WireEnvelope")]
pub struct Envelope {
    pub version: u32,
    pub key_id: String,
    pub sender: String,
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the 16-byte tag.
    pub ciphertext: Vec<u8>,
    pub aad: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct WireEnvelope {
    v: u32,
    kid: String,
    sid: String,
    n: String,
    ct: String,
    aad: String,
}

impl From<Envelope> for WireEnvelope {
    fn from(e: Envelope) -> Self {
        WireEnvelope {
            v: e.version,
            kid: e.key_id,
            sid: e.sender,
            n: B64.encode(e.nonce),
            ct: B64.encode(&e.ciphertext),
            aad: B64.encode(&e.aad),
        }
    }
}

impl TryFrom<WireEnvelope> for Envelope {
    type Error = String;

    fn try_from(w: WireEnvelope) -> std::result::Result<Self, String> {
        let decode = |field: &str, s: &str| {
            B64.decode(s)
                .map_err(|e| format!("field `{field}` is not base64: {e}"))
        };
        let nonce: [u8; NONCE_LEN] = decode("n", &w.n)?
            .try_into()
            .map_err(|_| format!("nonce must be {NONCE_LEN} bytes"))?;
        Ok(Envelope {
            version: w.v,
            key_id: w.kid,
            sender: w.sid,
            nonce,
            ciphertext: decode("ct", &w.ct)?,
            aad: decode("aad", &w.aad)?,
        })
    }
}

impl Envelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serialization is infallible")
    }

    pub fn from_json(text: &[u8]) -> Result<Self> {
        serde_json::from_slice(text).map_err(|e| Error::Schema(format!("envelope: {e}")))
    }
}

/// Encrypts with an explicit nonce. Callers outside known-answer tests should
/// go through [`encrypt`] so nonces come from a [`NonceSequence`].
pub fn encrypt_with_nonce(
    key: &SymmetricKey,
    nonce: [u8; NONCE_LEN],
    plaintext: &[u8],
    aad: &[u8],
    sender: &str,
) -> Result<Envelope> {
    if plaintext.len() > MAX_PLAINTEXT {
        return Err(Error::PayloadTooLarge(plaintext.len()));
    }
    let ciphertext = key
        .cipher()
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption of a bounded message cannot fail");
    Ok(Envelope {
        version: ENVELOPE_VERSION,
        key_id: key.key_id.clone(),
        sender: sender.to_string(),
        nonce,
        ciphertext,
        aad: aad.to_vec(),
    })
}

pub fn encrypt(
    key: &SymmetricKey,
    nonces: &NonceSequence,
    plaintext: &[u8],
    aad: &[u8],
    sender: &str,
) -> Result<Envelope> {
    let nonce = nonces
        .next()
        .ok_or_else(|| Error::NonceExhausted(key.key_id.clone()))?;
    encrypt_with_nonce(key, nonce, plaintext, aad, sender)
}

pub fn decrypt(key: &SymmetricKey, env: &Envelope) -> Result<Vec<u8>> {
    if env.version != ENVELOPE_VERSION {
        return Err(Error::UnsupportedVersion(env.version));
    }
    if env.key_id != key.key_id {
        return Err(Error::KeyMismatch(env.key_id.clone()));
    }
    if env.ciphertext.len() < TAG_LEN {
        return Err(Error::Authentication);
    }
    key.cipher()
        .decrypt(
            Nonce::from_slice(&env.nonce),
            Payload {
                msg: &env.ciphertext,
                aad: &env.aad,
            },
        )
        .map_err(|_| Error::Authentication)
}

/// A key paired with its own nonce sequence.
#[derive(Debug)]
pub struct Encryptor {
    key: SymmetricKey,
    nonces: NonceSequence,
}

impl Encryptor {
    pub fn new(key: SymmetricKey) -> Self {
        Encryptor {
            key,
            nonces: NonceSequence::random(),
        }
    }

    pub fn with_nonces(key: SymmetricKey, nonces: NonceSequence) -> Self {
        Encryptor { key, nonces }
    }

    pub fn key(&self) -> &SymmetricKey {
        &self.key
    }

    pub fn encrypt(&self, plaintext: &[u8], aad: &[u8], sender: &str) -> Result<Envelope> {
        encrypt(&self.key, &self.nonces, plaintext, aad, sender)
    }

    pub fn decrypt(&self, env: &Envelope) -> Result<Vec<u8>> {
        decrypt(&self.key, env)
    }
}

/// Keys indexed by key id.
#[derive(Debug, Default, Clone)]
pub struct Keyring {
    keys: HashMap<String, SymmetricKey>,
}

impl Keyring {
    pub fn insert(&mut self, key: SymmetricKey) {
        self.keys.insert(key.key_id.clone(), key);
    }

    pub fn get(&self, key_id: &str) -> Option<&SymmetricKey> {
        self.keys.get(key_id)
    }

    pub fn decrypt(&self, env: &Envelope) -> Result<Vec<u8>> {
        let key = self
            .get(&env.key_id)
            .ok_or_else(|| Error::KeyMismatch(env.key_id.clone()))?;
        decrypt(key, env)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedRecord {
    pub device: DeviceId,
    pub rule_count: usize,
    pub blob: Envelope,
}

pub const SEALER_ID: &str = "enclave";

pub fn seal_aad(device: &DeviceId) -> Vec<u8> {
    format!("seal/{device}").into_bytes()
}

/// Seals all rules of one device into a single record. Each rule is framed
/// separately inside the blob as `len(u32 BE) || rule JSON`.
pub fn seal_rules(k_sgx: &Encryptor, device: &DeviceId, rules: &[Rule]) -> Result<SealedRecord> {
    let mut plain = Vec::new();
    for rule in rules {
        if !rule.references(device) {
            return Err(Error::Binding {
                rule: rule.id.clone(),
                device: device.to_string(),
            });
        }
        let json = rule.to_json();
        plain.extend_from_slice(&(json.len() as u32).to_be_bytes());
        plain.extend_from_slice(json.as_bytes());
    }
    let blob = k_sgx.encrypt(&plain, &seal_aad(device), SEALER_ID)?;
    Ok(SealedRecord {
        device: device.clone(),
        rule_count: rules.len(),
        blob,
    })
}

pub fn unseal_rules(k_sgx: &SymmetricKey, rec: &SealedRecord) -> Result<Vec<Rule>> {
    if rec.blob.aad != seal_aad(&rec.device) {
        return Err(Error::Authentication);
    }
    let plain = decrypt(k_sgx, &rec.blob)?;
    let rules = unframe_rules(&plain)?;
    if rules.len() != rec.rule_count {
        return Err(Error::Authentication);
    }
    Ok(rules)
}

pub(crate) fn unframe_rules(mut buf: &[u8]) -> Result<Vec<Rule>> {
    let mut rules = Vec::new();
    while !buf.is_empty() {
        if buf.len() < 4 {
            return Err(Error::Schema("truncated rule frame".into()));
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        let body = buf
            .get(4..4 + len)
            .ok_or_else(|| Error::Schema("truncated rule frame".into()))?;
        rules.push(crate::rule::parse_rule(body)?);
        buf = &buf[4 + len..];
    }
    Ok(rules)
}
