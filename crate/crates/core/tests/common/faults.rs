//! Tampering and attestation fault injection.

use std::collections::BTreeMap;
use std::time::Duration;

use cloakrule::attestation::{
    build_info, generate_quote, provision_keys, HandshakeMessage, Measurement, PlatformKey,
    ProvisionedSecrets, Quote, SessionKeySet,
};
use cloakrule::device::DeviceKind;
use cloakrule::enclave::{BoundaryConfig, Mode, TrustedBoundary};
use cloakrule::envelope::{Encryptor, SymmetricKey};
use cloakrule::hub::{Hub, KeyServer};
use cloakrule::rule::{DeviceId, Scalar};
use cloakrule::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RULES: &str = r#"[{"id":"r","if":[{"device":"p","attribute":"presence","operator":"equals","value":"present"}],
    "then":[{"device":"s","capability":"switch","command":"on"}]}]"#;
pub const EVENT: &str = r#"{"device":"p","capability":"presenceSensor","attribute":"presence","value":"present","timestamp":1}"#;
pub const COMMAND: &str = r#"{"device":"s","capability":"switch","command":"on","arguments":[]}"#;

fn d(s: &str) -> DeviceId {
    DeviceId::new(s).unwrap()
}

pub fn keys() -> BTreeMap<DeviceId, SymmetricKey> {
    [("p", 1u8), ("s", 2)]
        .into_iter()
        .map(|(n, b)| (d(n), SymmetricKey::new(n, [b; 32])))
        .collect()
}

pub fn boundary() -> TrustedBoundary {
    let rk = SymmetricKey::new("ruleset", [3; 32]);
    let b = TrustedBoundary::new(
        BoundaryConfig {
            transition_cost: Duration::ZERO,
            ..Default::default()
        },
        SessionKeySet::with_random_sealing_key(keys()),
        Some(rk.clone()),
    )
    .unwrap();
    let rules = cloakrule::rule::parse_ruleset(RULES.as_bytes()).unwrap();
    let env = TrustedBoundary::seal_ruleset_for_transport(&Encryptor::new(rk), &rules, "t").unwrap();
    b.provision_ruleset(env.to_json().as_bytes()).unwrap();
    b
}

pub fn bit_flips(bytes: &[u8]) -> impl Iterator<Item = (usize, u8, Vec<u8>)> + '_ {
    (0..bytes.len()).flat_map(move |i| {
        (0..8).map(move |bit| {
            let mut m = bytes.to_vec();
            m[i] ^= 1 << bit;
            (i, bit, m)
        })
    })
}

pub fn event_envelope() -> Vec<u8> {
    Encryptor::new(keys()[&d("p")].clone())
        .encrypt(EVENT.as_bytes(), b"evt/p", "p")
        .unwrap()
        .to_json()
        .into_bytes()
}

pub fn command_envelope() -> Vec<u8> {
    Encryptor::new(keys()[&d("s")].clone())
        .encrypt(COMMAND.as_bytes(), b"cmd/s", "enclave-0")
        .unwrap()
        .to_json()
        .into_bytes()
}

#[derive(Debug)]
pub struct FlipReport {
    pub mutations: usize,
    pub rejected: usize,
    /// (byte, bit, outcome) of mutations that were not rejected as
    /// authentication failures.
    pub escapes: Vec<(usize, u8, String)>,
    pub side_effects: u64,
}

/// Flips every bit of an event envelope and feeds each copy to the enclave.
/// Side effects are commands the enclave encrypted.
pub fn flip_event_envelope() -> FlipReport {
    let b = boundary();
    let env = event_envelope();
    let before = b.counters();
    let mut r = FlipReport { mutations: 0, rejected: 0, escapes: Vec::new(), side_effects: 0 };
    for (i, bit, m) in bit_flips(&env) {
        r.mutations += 1;
        match b.handle_event("evt/p", &m) {
            Err(Error::Authentication) => r.rejected += 1,
            other => r.escapes.push((i, bit, format!("{other:?}"))),
        }
    }
    r.side_effects = b.counters().encrypts - before.encrypts;
    r
}

/// Flips every bit of a command envelope and delivers each copy to the hub.
/// Side effects are applied commands or a changed switch.
pub fn flip_command_envelope() -> FlipReport {
    let hub = Hub::new(Mode::Full, keys());
    hub.add_actuator(d("s"), DeviceKind::Switch);
    let env = command_envelope();
    let mut r = FlipReport { mutations: 0, rejected: 0, escapes: Vec::new(), side_effects: 0 };
    for (i, bit, m) in bit_flips(&env) {
        r.mutations += 1;
        match hub.deliver("cmd/s", &m) {
            Err(Error::Authentication) => r.rejected += 1,
            other => r.escapes.push((i, bit, format!("{other:?}"))),
        }
    }
    r.side_effects = hub.counters().applied;
    if hub.actuator(&d("s")).unwrap().get("switch") != Some(&Scalar::from("off")) {
        r.side_effects += 1;
    }
    r
}

pub fn secrets() -> ProvisionedSecrets {
    let device_keys: BTreeMap<DeviceId, SymmetricKey> = ["presence-1", "switch-1", "thermostat-1"]
        .iter()
        .enumerate()
        .map(|(i, n)| (d(n), SymmetricKey::new(*n, [i as u8 + 10; 32])))
        .collect();
    ProvisionedSecrets {
        device_keys,
        ruleset_key: SymmetricKey::new("ruleset", [0x77; 32]),
    }
}

fn corrupt(q: &Quote, rng: &mut ChaCha8Rng, platform: &PlatformKey) -> Quote {
    let mut bad = q.clone();
    match rng.gen_range(0..4) {
        0 => bad.signature[rng.gen_range(0..64)] ^= 1 << rng.gen_range(0..8),
        1 => bad.measurement.0[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8),
        2 => bad.enclave_public[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8),
        // correctly signed, but over a different build
        _ => {
            let other = format!("patched build {}", rng.gen::<u32>());
            bad = generate_quote(platform, other.as_bytes()).0;
        }
    }
    bad
}

#[derive(Debug)]
pub struct QuoteReport {
    pub quotes: usize,
    pub rejected_with_attestation_error: usize,
    pub provisioned: u64,
    pub replies: usize,
}

/// `n` quotes with a bad signature, a wrong measurement, a swapped key or an
/// untrusted platform, all answered by one key server.
pub fn faulty_quotes(n: usize, seed: u64) -> QuoteReport {
    let platform = PlatformKey::from_seed([5; 32]);
    let rogue = PlatformKey::from_seed([6; 32]);
    let server = KeyServer::new(Measurement::current(), platform.verification_key(), secrets());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = QuoteReport { quotes: n, rejected_with_attestation_error: 0, provisioned: 0, replies: 0 };
    for i in 0..n {
        let q = if i % 10 == 9 {
            // signed by a platform key the server does not trust
            generate_quote(&rogue, &build_info()).0
        } else {
            corrupt(&generate_quote(&platform, &build_info()).0, &mut rng, &platform)
        };
        match server.answer(HandshakeMessage::Quote(q).to_json().as_bytes()) {
            Err(Error::AttestationRejected(_)) => r.rejected_with_attestation_error += 1,
            Ok(replies) => r.replies += replies.len(),
            Err(_) => {}
        }
    }
    r.provisioned = server.provisioned();
    r
}

/// Runs an honest handshake; true when the enclave ends up with exactly the
/// server's key map and the platform's sealing key.
pub fn honest_handshake_agrees() -> bool {
    let platform = PlatformKey::from_seed([5; 32]);
    let s = secrets();
    let (quote, hs) = generate_quote(&platform, &build_info());
    let Ok((hello, prov)) =
        provision_keys(&quote, &Measurement::current(), &platform.verification_key(), &s)
    else {
        return false;
    };
    let (HandshakeMessage::ServerHello { server_public, .. }, HandshakeMessage::Provision { envelope, .. }) =
        (hello, prov)
    else {
        return false;
    };
    match hs.finish(&server_public, &envelope) {
        Ok((keys, ruleset)) => {
            keys.device_keys == s.device_keys
                && ruleset == s.ruleset_key
                && keys.k_sgx == platform.sealing_key(&Measurement::current())
        }
        Err(_) => false,
    }
}
