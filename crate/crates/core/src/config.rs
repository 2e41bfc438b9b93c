//! Node configuration: one TOML document shared by every component.
//!
//! ```toml
//! broker = "127.0.0.1:7883"
//! mode = "full"
//! enclave_id = "enclave-0"
//!
//! [enclave]
//! store = "cloakrule.store"
//!
//! [keys]
//! master = "<64 hex chars>"
//!
//! [fleet]
//! events = 20
//! [[fleet.device]]
//! id = "presence-1"
//! kind = "presence"
//! generator = { type = "constant", value = "present" }
//! ```
//!
//! Keys not listed explicitly are derived from `keys.master` with
//! HKDF-SHA256, one label per key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use hkdf::Hkdf;
use serde::{Deserialize, Deserializer};
use sha2::Sha256;

use crate::attestation::{
    PlatformKey, PlatformVerifyingKey, ProvisionedSecrets, RULESET_KEY_ID,
};
use crate::device::DeviceProfile;
use crate::enclave::{BoundaryConfig, CachePolicy, Mode, DEFAULT_CAPACITY};
use crate::envelope::SymmetricKey;
use crate::error::{Error, Result};
use crate::rule::DeviceId;

pub const DEFAULT_BROKER: &str = "127.0.0.1:7883";
/// Overrides `broker` from the config file; a command-line flag wins over both.
pub const BROKER_ENV: &str = "CLOAKRULE_BROKER";

fn from_str_de<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr<Err = Error>,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_broker")]
    pub broker: String,
    #[serde(default = "default_mode", deserialize_with = "from_str_de")]
    pub mode: Mode,
    #[serde(default = "default_enclave_id")]
    pub enclave_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub enclave: EnclaveSection,
    #[serde(default)]
    pub keys: KeySection,
    #[serde(default)]
    pub fleet: FleetSection,
}

fn default_broker() -> String {
    DEFAULT_BROKER.into()
}

fn default_mode() -> Mode {
    Mode::Full
}

fn default_enclave_id() -> String {
    "enclave-0".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnclaveSection {
    #[serde(deserialize_with = "from_str_de")]
    pub cache_policy: CachePolicy,
    pub cache_capacity: usize,
    pub store: Option<PathBuf>,
    pub transition_cost_us: u64,
    /// Quote attempts before giving up on the attestation server.
    pub attest_attempts: u32,
    pub attest_timeout_ms: u64,
    pub connect_attempts: u32,
}

impl Default for EnclaveSection {
    fn default() -> Self {
        EnclaveSection {
            cache_policy: CachePolicy::Lru,
            cache_capacity: DEFAULT_CAPACITY,
            store: None,
            transition_cost_us: crate::enclave::DEFAULT_TRANSITION_COST.as_micros() as u64,
            attest_attempts: 5,
            attest_timeout_ms: 1000,
            connect_attempts: 10,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeySection {
    pub master: Option<String>,
    /// Secret of the simulated platform (enclave side).
    pub platform_seed: Option<String>,
    /// Platform verification key the attestation server trusts. Derived from
    /// the platform seed when absent.
    pub platform_vk: Option<String>,
    pub ruleset: Option<String>,
    pub devices: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSection {
    pub events: usize,
    #[serde(rename = "device")]
    pub devices: Vec<DeviceProfile>,
}

fn derive(master: &[u8; 32], label: &str) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(None, master);
    let mut out = [0u8; 32];
    hk.expand(label.as_bytes(), &mut out)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    out
}

fn hex32(what: &str, text: &str) -> Result<[u8; 32]> {
    let bytes = hex::decode(text.trim())
        .map_err(|e| Error::Config(format!("{what}: not hex: {e}")))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| Error::Config(format!("{what}: expected 32 bytes, got {}", b.len())))
}

impl Default for Config {
    fn default() -> Self {
        Config {
            broker: default_broker(),
            mode: default_mode(),
            enclave_id: default_enclave_id(),
            seed: 0,
            enclave: EnclaveSection::default(),
            keys: KeySection::default(),
            fleet: FleetSection::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.enclave_id.is_empty() || self.enclave_id.contains(['/', '+', '#']) {
            return Err(Error::Config(format!("invalid enclave_id `{}`", self.enclave_id)));
        }
        for d in &self.fleet.devices {
            d.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for name in self.keys.devices.keys() {
            DeviceId::new(name.as_str()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies the broker environment variable, if set.
    pub fn apply_env(&mut self) {
        if let Ok(addr) = std::env::var(BROKER_ENV) {
            if !addr.is_empty() {
                self.broker = addr;
            }
        }
    }

    fn master(&self) -> Result<Option<[u8; 32]>> {
        self.keys.master.as_deref().map(|m| hex32("keys.master", m)).transpose()
    }

    fn key_bytes(&self, what: &str, explicit: Option<&str>, label: &str) -> Result<[u8; 32]> {
        if let Some(hex) = explicit {
            return hex32(what, hex);
        }
        match self.master()? {
            Some(m) => Ok(derive(&m, label)),
            None => Err(Error::Config(format!(
                "no key for {what}: set it explicitly or provide keys.master"
            ))),
        }
    }

    pub fn device_key(&self, device: &DeviceId) -> Result<SymmetricKey> {
        let bytes = self.key_bytes(
            &format!("device `{device}`"),
            self.keys.devices.get(device.as_str()).map(String::as_str),
            &format!("cloakrule device key/{device}"),
        )?;
        Ok(SymmetricKey::new(device.as_str(), bytes))
    }

    pub fn ruleset_key(&self) -> Result<SymmetricKey> {
        let bytes = self.key_bytes(
            "ruleset",
            self.keys.ruleset.as_deref(),
            "cloakrule ruleset key",
        )?;
        Ok(SymmetricKey::new(RULESET_KEY_ID, bytes))
    }

    pub fn platform_key(&self) -> Result<PlatformKey> {
        let seed = self.key_bytes(
            "platform seed",
            self.keys.platform_seed.as_deref(),
            "cloakrule platform seed",
        )?;
        Ok(PlatformKey::from_seed(seed))
    }

    pub fn platform_verifying_key(&self) -> Result<PlatformVerifyingKey> {
        match &self.keys.platform_vk {
            Some(hex) => PlatformVerifyingKey::from_bytes(&hex32("keys.platform_vk", hex)?),
            None => Ok(self.platform_key()?.verification_key()),
        }
    }

    /// Every device the deployment knows about: fleet profiles plus devices
    /// with explicit keys.
    pub fn devices(&self) -> Result<Vec<DeviceId>> {
        let mut ids: Vec<DeviceId> = self.fleet.devices.iter().map(|p| p.device.clone()).collect();
        for name in self.keys.devices.keys() {
            ids.push(DeviceId::new(name.as_str())?);
        }
        ids.sort();
        ids.dedup();
        Ok(ids)
    }

    pub fn device_keys(&self) -> Result<BTreeMap<DeviceId, SymmetricKey>> {
        self.devices()?
            .into_iter()
            .map(|d| self.device_key(&d).map(|k| (d, k)))
            .collect()
    }

    pub fn provisioned_secrets(&self) -> Result<ProvisionedSecrets> {
        Ok(ProvisionedSecrets {
            device_keys: self.device_keys()?,
            ruleset_key: self.ruleset_key()?,
        })
    }

    pub fn boundary_config(&self) -> BoundaryConfig {
        BoundaryConfig {
            enclave_id: self.enclave_id.clone(),
            mode: self.mode,
            cache_policy: self.enclave.cache_policy,
            cache_capacity: self.enclave.cache_capacity,
            store_path: self.enclave.store.clone(),
            transition_cost: Duration::from_micros(self.enclave.transition_cost_us),
        }
    }
}
