//! Hub/gateway relay and the attestation key server.
//!
//! Upstream, the hub turns a device reading into a message on `evt/<d>`
//! (an [`Envelope`] in `Full` mode). Downstream, it verifies and decrypts
//! commands from `cmd/<d>` and applies them to the local actuator. A command
//! that fails verification is dropped and counted; the actuator is not
//! touched.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::attestation::{
    provision_keys, HandshakeMessage, Measurement, PlatformVerifyingKey, ProvisionedSecrets,
};
use crate::broker::Topic;
use crate::device::{apply_command, now_us, ActuatorState, DeviceKind};
use crate::enclave::{open_command, parse_command, Mode, OutboundMessage};
use crate::envelope::{Encryptor, SymmetricKey};
use crate::error::{Error, Result};
use crate::rule::{ActionCommand, DeviceEvent, DeviceId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HubCounters {
    pub upstream: u64,
    /// Command messages seen, whatever became of them.
    pub received: u64,
    pub applied: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppliedCommand {
    pub command: ActionCommand,
    pub received_us: i64,
}

pub struct Hub {
    mode: Mode,
    enclave_id: String,
    keys: HashMap<DeviceId, Encryptor>,
    actuators: Mutex<BTreeMap<DeviceId, ActuatorState>>,
    applied: Mutex<Vec<AppliedCommand>>,
    upstream: AtomicU64,
    received: AtomicU64,
    rejected: AtomicU64,
}

impl Hub {
    pub fn new(mode: Mode, keys: BTreeMap<DeviceId, SymmetricKey>) -> Self {
        Hub {
            mode,
            enclave_id: "enclave-0".into(),
            keys: keys.into_iter().map(|(d, k)| (d, Encryptor::new(k))).collect(),
            actuators: Mutex::new(BTreeMap::new()),
            applied: Mutex::new(Vec::new()),
            upstream: AtomicU64::new(0),
            received: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        }
    }

    /// The enclave whose commands are accepted.
    pub fn with_enclave_id(mut self, id: impl Into<String>) -> Self {
        self.enclave_id = id.into();
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn add_actuator(&self, device: DeviceId, kind: DeviceKind) {
        self.actuators
            .lock()
            .insert(device.clone(), ActuatorState::new(device, kind));
    }

    pub fn actuator(&self, device: &DeviceId) -> Option<ActuatorState> {
        self.actuators.lock().get(device).cloned()
    }

    pub fn actuator_devices(&self) -> Vec<DeviceId> {
        self.actuators.lock().keys().cloned().collect()
    }

    pub fn counters(&self) -> HubCounters {
        HubCounters {
            upstream: self.upstream.load(Ordering::Relaxed),
            received: self.received.load(Ordering::Acquire),
            applied: self.applied.lock().len() as u64,
            rejected: self.rejected.load(Ordering::Relaxed),
        }
    }

    pub fn applied(&self) -> Vec<AppliedCommand> {
        self.applied.lock().clone()
    }

    /// Upstream: the message a device reading becomes on the broker.
    pub fn wrap_reading(&self, event: &DeviceEvent) -> Result<OutboundMessage> {
        let topic = Topic::event(&event.device);
        let json = event.to_json();
        let payload = match self.mode {
            Mode::Full => {
                let key = self
                    .keys
                    .get(&event.device)
                    .ok_or_else(|| Error::UnknownDevice(event.device.to_string()))?;
                key.encrypt(json.as_bytes(), topic.as_bytes(), event.device.as_str())?
                    .to_json()
                    .into_bytes()
            }
            _ => json.into_bytes(),
        };
        self.upstream.fetch_add(1, Ordering::Relaxed);
        Ok(OutboundMessage { topic, payload })
    }

    /// Downstream: verifies a `cmd/<d>` message and applies it to actuator
    /// `d`. Any failure leaves every actuator unchanged.
    pub fn deliver(&self, topic: &str, payload: &[u8]) -> Result<ActionCommand> {
        let result = self.verify_and_apply(topic, payload);
        if matches!(result, Err(Error::Authentication)) {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            log::warn!("dropped command on {topic}: authentication failed");
        }
        self.received.fetch_add(1, Ordering::AcqRel);
        result
    }

    fn verify_and_apply(&self, topic: &str, payload: &[u8]) -> Result<ActionCommand> {
        let device = match Topic::parse(topic)? {
            Topic::Command(d) => d,
            _ => return Err(Error::TopicInvalid(topic.to_string())),
        };
        let cmd = match self.mode {
            Mode::Full => {
                let key = self
                    .keys
                    .get(&device)
                    .ok_or_else(|| Error::UnknownDevice(device.to_string()))?;
                open_command(key.key(), topic, &self.enclave_id, payload)?
            }
            _ => parse_command(payload)?,
        };
        let now = now_us();
        let mut actuators = self.actuators.lock();
        let state = actuators
            .get_mut(&device)
            .ok_or_else(|| Error::UnknownDevice(device.to_string()))?;
        *state = apply_command(state, &cmd, now)?;
        self.applied.lock().push(AppliedCommand {
            command: cmd.clone(),
            received_us: now,
        });
        Ok(cmd)
    }
}

/// The key owner's side of attestation: releases secrets only to enclaves
/// whose quote verifies.
pub struct KeyServer {
    expected: Measurement,
    platform_vk: PlatformVerifyingKey,
    secrets: ProvisionedSecrets,
    provisioned: AtomicU64,
    rejected: AtomicU64,
}

impl KeyServer {
    pub fn new(
        expected: Measurement,
        platform_vk: PlatformVerifyingKey,
        secrets: ProvisionedSecrets,
    ) -> Self {
        KeyServer {
            expected,
            platform_vk,
            secrets,
            provisioned: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        }
    }

    pub fn provisioned(&self) -> u64 {
        self.provisioned.load(Ordering::Relaxed)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    /// Handles one message from `attest/<id>`. Quotes get the two reply
    /// messages; anything else seen on the topic (including our own replies)
    /// is ignored.
    pub fn answer(&self, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        let HandshakeMessage::Quote(quote) = HandshakeMessage::from_json(payload)? else {
            return Ok(Vec::new());
        };
        match provision_keys(&quote, &self.expected, &self.platform_vk, &self.secrets) {
            Ok((hello, provision)) => {
                self.provisioned.fetch_add(1, Ordering::Relaxed);
                Ok(vec![
                    hello.to_json().into_bytes(),
                    provision.to_json().into_bytes(),
                ])
            }
            Err(e) => {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                log::warn!("{e}");
                Err(e)
            }
        }
    }
}
