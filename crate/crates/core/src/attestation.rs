//! Simulated remote attestation and key provisioning.
//!
//! The enclave proves its measurement with a quote signed by a (simulated)
//! platform key and carrying a fresh X25519 public key. The key owner checks
//! the quote, answers with its own ephemeral public key and sends the session
//! keys encrypted under `HKDF-SHA256(x25519(shared), salt = enclave_pub || server_pub)`.
//!
//! Three messages cross the `attest/<enclave_id>` topic:
//! [`HandshakeMessage::Quote`], [`HandshakeMessage::ServerHello`] and
//! [`HandshakeMessage::Provision`].

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use crate::envelope::{self, Envelope, NonceSequence, SymmetricKey};
use crate::error::{Error, Result};
use crate::rule::DeviceId;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RULE_SCHEMA_VERSION: &str = "1";
const CHANNEL_INFO: &[u8] = b"cloakrule provisioning channel v1";

pub const K_SGX_ID: &str = "k_sgx";
pub const RULESET_KEY_ID: &str = "ruleset";

/// The bytes hashed into the measurement of this build.
pub fn build_info() -> Vec<u8> {
    format!("cloakrule-engine/{ENGINE_VERSION};rule-schema/{RULE_SCHEMA_VERSION}").into_bytes()
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Measurement(#[serde(with = "hex_array")] pub [u8; 32]);

impl Measurement {
    pub fn of(build_info: &[u8]) -> Self {
        Measurement(Sha256::digest(build_info).into())
    }

    pub fn current() -> Self {
        Self::of(&build_info())
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", hex::encode(self.0))
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Stand-in for the hardware platform: signs quotes and derives the
/// per-measurement sealing key.
pub struct PlatformKey {
    signing: SigningKey,
    seed: [u8; 32],
}

impl PlatformKey {
    pub fn generate() -> Self {
        let mut seed = [0u8; 32];
        rand::RngCore::fill_bytes(&mut OsRng, &mut seed);
        Self::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        PlatformKey {
            signing: SigningKey::from_bytes(&seed),
            seed,
        }
    }

    /// Sealing key bound to this platform and enclave measurement, stable
    /// across restarts of the same build.
    pub fn sealing_key(&self, measurement: &Measurement) -> SymmetricKey {
        let hk = Hkdf::<Sha256>::new(Some(&measurement.0), &self.seed);
        let mut okm = [0u8; 32];
        hk.expand(b"cloakrule sealing key v1", &mut okm)
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        SymmetricKey::new(K_SGX_ID, okm)
    }

    pub fn verification_key(&self) -> PlatformVerifyingKey {
        PlatformVerifyingKey(self.signing.verifying_key())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlatformVerifyingKey(VerifyingKey);

impl PlatformVerifyingKey {
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self> {
        VerifyingKey::from_bytes(bytes)
            .map(PlatformVerifyingKey)
            .map_err(|e| Error::InvalidConfig(format!("bad platform verification key: {e}")))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub measurement: Measurement,
    #[serde(with = "hex_array")]
    pub enclave_public: [u8; 32],
    #[serde(with = "hex_array")]
    pub signature: [u8; 64],
}

impl Quote {
    fn signed_bytes(measurement: &Measurement, public: &[u8; 32]) -> [u8; 64] {
        let mut msg = [0u8; 64];
        msg[..32].copy_from_slice(&measurement.0);
        msg[32..].copy_from_slice(public);
        msg
    }
}

/// Enclave half of a handshake. Holds the ephemeral secret behind the quote.
pub struct EnclaveHandshake {
    secret: StaticSecret,
    public: PublicKey,
    measurement: Measurement,
    k_sgx: SymmetricKey,
}

pub fn generate_quote(platform: &PlatformKey, build_info: &[u8]) -> (Quote, EnclaveHandshake) {
    let secret = StaticSecret::random_from_rng(OsRng);
    let public = PublicKey::from(&secret);
    let measurement = Measurement::of(build_info);
    let signature = platform
        .signing
        .sign(&Quote::signed_bytes(&measurement, public.as_bytes()));
    let quote = Quote {
        measurement,
        enclave_public: *public.as_bytes(),
        signature: signature.to_bytes(),
    };
    (
        quote,
        EnclaveHandshake {
            secret,
            public,
            measurement,
            k_sgx: platform.sealing_key(&measurement),
        },
    )
}

pub fn verify_quote(q: &Quote, expected: &Measurement, platform_vk: &PlatformVerifyingKey) -> bool {
    let sig = Signature::from_bytes(&q.signature);
    let signed = Quote::signed_bytes(&q.measurement, &q.enclave_public);
    platform_vk.0.verify(&signed, &sig).is_ok() && q.measurement == *expected
}

/// What the key owner hands to a verified enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisionedSecrets {
    pub device_keys: BTreeMap<DeviceId, SymmetricKey>,
    pub ruleset_key: SymmetricKey,
}

#[derive(Serialize, Deserialize)]
struct SecretsWire {
    device_keys: BTreeMap<DeviceId, String>,
    ruleset_key: String,
}

impl ProvisionedSecrets {
    fn to_wire(&self) -> Vec<u8> {
        let wire = SecretsWire {
            device_keys: self
                .device_keys
                .iter()
                .map(|(d, k)| (d.clone(), hex::encode(k.secret_bytes())))
                .collect(),
            ruleset_key: hex::encode(self.ruleset_key.secret_bytes()),
        };
        serde_json::to_vec(&wire).expect("secrets serialize")
    }

    fn from_wire(bytes: &[u8]) -> Result<Self> {
        let wire: SecretsWire = serde_json::from_slice(bytes)
            .map_err(|e| Error::Schema(format!("provisioned secrets: {e}")))?;
        let device_keys = wire
            .device_keys
            .into_iter()
            .map(|(d, k)| SymmetricKey::from_hex(d.as_str(), &k).map(|k| (d, k)))
            .collect::<Result<_>>()?;
        Ok(ProvisionedSecrets {
            device_keys,
            ruleset_key: SymmetricKey::from_hex(RULESET_KEY_ID, &wire.ruleset_key)?,
        })
    }
}

/// Session keys as held inside the trusted boundary.
#[derive(Debug, Clone)]
pub struct SessionKeySet {
    pub device_keys: BTreeMap<DeviceId, SymmetricKey>,
    pub k_sgx: SymmetricKey,
}

impl SessionKeySet {
    /// Key set with a fresh random sealing key, for boundaries built without
    /// a handshake (benchmarks, tests, local tooling).
    pub fn with_random_sealing_key(device_keys: BTreeMap<DeviceId, SymmetricKey>) -> Self {
        SessionKeySet {
            device_keys,
            k_sgx: SymmetricKey::generate(K_SGX_ID, &mut OsRng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HandshakeMessage {
    Quote(Quote),
    /// Both server messages name the quote they answer so an enclave can
    /// ignore replies meant for a concurrent handshake.
    ServerHello {
        #[serde(with = "hex_array")]
        enclave_public: [u8; 32],
        #[serde(with = "hex_array")]
        server_public: [u8; 32],
    },
    Provision {
        #[serde(with = "hex_array")]
        enclave_public: [u8; 32],
        envelope: Envelope,
    },
}

impl HandshakeMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("handshake message serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Schema(format!("handshake: {e}")))
    }
}

fn channel_key(shared: &[u8; 32], enclave_public: &[u8; 32], server_public: &[u8; 32]) -> SymmetricKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(enclave_public);
    salt[32..].copy_from_slice(server_public);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(CHANNEL_INFO, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    SymmetricKey::new("channel", okm)
}

fn provision_aad(m: &Measurement) -> Vec<u8> {
    format!("provision/{m}").into_bytes()
}

/// Server side: verifies the quote and, only then, encrypts the secrets for
/// the enclave. Returns the server hello and provisioning envelope.
pub fn provision_keys(
    q: &Quote,
    expected: &Measurement,
    platform_vk: &PlatformVerifyingKey,
    secrets: &ProvisionedSecrets,
) -> Result<(HandshakeMessage, HandshakeMessage)> {
    if !verify_quote(q, expected, platform_vk) {
        return Err(Error::AttestationRejected(
            "quote signature or measurement does not verify".into(),
        ));
    }
    let server_secret = StaticSecret::random_from_rng(OsRng);
    let server_public = PublicKey::from(&server_secret);
    let shared = server_secret.diffie_hellman(&PublicKey::from(q.enclave_public));
    let key = channel_key(shared.as_bytes(), &q.enclave_public, server_public.as_bytes());
    // The channel key is single-use, so a fixed nonce sequence is safe here.
    let envelope = envelope::encrypt(
        &key,
        &NonceSequence::with_salt([0; 4], 0),
        &secrets.to_wire(),
        &provision_aad(&q.measurement),
        "keyserver",
    )?;
    Ok((
        HandshakeMessage::ServerHello {
            enclave_public: q.enclave_public,
            server_public: *server_public.as_bytes(),
        },
        HandshakeMessage::Provision {
            enclave_public: q.enclave_public,
            envelope,
        },
    ))
}

impl EnclaveHandshake {
    pub fn public(&self) -> [u8; 32] {
        *self.public.as_bytes()
    }

    /// Recovers the provisioned secrets. `k_sgx` comes from the platform inside
    /// the enclave and is never part of the provisioned payload.
    pub fn finish(
        self,
        server_public: &[u8; 32],
        envelope: &Envelope,
    ) -> Result<(SessionKeySet, SymmetricKey)> {
        let shared = self.secret.diffie_hellman(&PublicKey::from(*server_public));
        let key = channel_key(shared.as_bytes(), self.public.as_bytes(), server_public);
        if envelope.aad != provision_aad(&self.measurement) {
            return Err(Error::Authentication);
        }
        let plain = envelope::decrypt(&key, envelope)?;
        let secrets = ProvisionedSecrets::from_wire(&plain)?;
        Ok((
            SessionKeySet {
                device_keys: secrets.device_keys,
                k_sgx: self.k_sgx,
            },
            secrets.ruleset_key,
        ))
    }
}

mod hex_array {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(D::Error::custom)?;
        raw.try_into()
            .map_err(|_| D::Error::custom(format!("expected {N} hex-encoded bytes")))
    }
}
