//! Randomized rules and events for comparing the engine with the oracle.

use std::collections::BTreeMap;
use std::time::Duration;

use cloakrule::attestation::SessionKeySet;
use cloakrule::bench::prepare_events;
use cloakrule::enclave::{BoundaryConfig, Mode, TrustedBoundary};
use cloakrule::envelope::{Encryptor, SymmetricKey};
use cloakrule::rule::{
    ActionCommand, Combinator, Condition, DeviceEvent, DeviceId, Operator, Rule, Scalar,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{action_key, Oracle};

const DEVICES: usize = 8;
const ATTRS: [&str; 2] = ["level", "mode"];
const MODES: [&str; 3] = ["idle", "active", "away"];

fn dev(i: usize) -> DeviceId {
    DeviceId::new(format!("node-{i}")).unwrap()
}

fn random_condition(rng: &mut ChaCha8Rng) -> Condition {
    let device = dev(rng.gen_range(0..DEVICES));
    if rng.gen_bool(0.7) {
        Condition {
            device,
            attribute: "level".into(),
            operator: Operator::ALL[rng.gen_range(0..Operator::ALL.len())],
            value: Scalar::Number(rng.gen_range(0..=20) as f64),
        }
    } else {
        Condition {
            device,
            attribute: "mode".into(),
            operator: Operator::Equals,
            value: Scalar::from(MODES[rng.gen_range(0..MODES.len())]),
        }
    }
}

/// Rules mixing devices and attributes, so cross-device state matters.
pub fn ruleset(n: usize, seed: u64) -> Vec<Rule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Rule {
            id: format!("o{i}"),
            name: String::new(),
            conditions: (0..rng.gen_range(1..=3)).map(|_| random_condition(&mut rng)).collect(),
            combinator: if rng.gen_bool(0.5) { Combinator::All } else { Combinator::Any },
            actions: vec![ActionCommand {
                device: dev(rng.gen_range(0..DEVICES)),
                capability: "switchLevel".into(),
                command: "setLevel".into(),
                arguments: vec![Scalar::Number(i as f64)],
            }],
        })
        .collect()
}

pub fn events(n: usize, seed: u64) -> Vec<DeviceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    (0..n)
        .map(|t| {
            let attr = ATTRS[rng.gen_range(0..2)];
            let value = if attr == "level" {
                Scalar::Number(rng.gen_range(0..=20) as f64)
            } else {
                Scalar::from(MODES[rng.gen_range(0..MODES.len())])
            };
            DeviceEvent {
                device: dev(rng.gen_range(0..DEVICES)),
                capability: "sensor".into(),
                attribute: attr.into(),
                value,
                timestamp: t as i64,
            }
        })
        .collect()
}

pub fn keys() -> (BTreeMap<DeviceId, SymmetricKey>, SymmetricKey) {
    let k = (0..DEVICES)
        .map(|i| (dev(i), SymmetricKey::new(dev(i).as_str(), [i as u8 + 1; 32])))
        .collect();
    (k, SymmetricKey::new("ruleset", [0xee; 32]))
}

pub fn boundary(mode: Mode, rules: &[Rule]) -> TrustedBoundary {
    let (k, rk) = keys();
    let b = TrustedBoundary::new(
        BoundaryConfig {
            transition_cost: Duration::ZERO,
            ..BoundaryConfig::with_mode(mode)
        },
        SessionKeySet::with_random_sealing_key(k),
        Some(rk.clone()),
    )
    .unwrap();
    let payload = match mode {
        Mode::Full => TrustedBoundary::seal_ruleset_for_transport(&Encryptor::new(rk), rules, "t")
            .unwrap()
            .to_json()
            .into_bytes(),
        _ => cloakrule::rule::ruleset_to_json(rules).into_bytes(),
    };
    b.provision_ruleset(&payload).unwrap();
    b
}

pub fn sorted(v: &[ActionCommand]) -> Vec<String> {
    let mut k: Vec<String> = v.iter().map(action_key).collect();
    k.sort();
    k
}

pub fn fired(mode: Mode, rules: &[Rule], evs: &[DeviceEvent]) -> Vec<Vec<String>> {
    let b = boundary(mode, rules);
    let prepared = prepare_events(mode, evs, &keys().0).unwrap();
    prepared
        .iter()
        .map(|p| sorted(&b.handle_event_detailed(&p.topic, &p.payload).unwrap().actions))
        .collect()
}

/// Engine (Full mode) against the oracle; returns (mismatching events,
/// actions fired by the oracle).
pub fn oracle_mismatches(rules: usize, events_n: usize, seed: u64) -> (usize, usize) {
    let rules = ruleset(rules, seed);
    let evs = events(events_n, seed);
    let engine = fired(Mode::Full, &rules, &evs);
    let mut oracle = Oracle::new(rules);
    let mut mismatches = 0;
    let mut total = 0;
    for (ev, got) in evs.iter().zip(&engine) {
        let want = sorted(&oracle.feed(ev));
        total += want.len();
        if &want != got {
            mismatches += 1;
        }
    }
    (mismatches, total)
}

/// Seeds on which some mode fired differently from Plain.
pub fn mode_divergence(seeds: &[u64], rules: usize, events_n: usize) -> Vec<u64> {
    seeds
        .iter()
        .copied()
        .filter(|&seed| {
            let rules = ruleset(rules, seed);
            let evs = events(events_n, seed);
            let plain = fired(Mode::Plain, &rules, &evs);
            plain != fired(Mode::TrustedNoEnc, &rules, &evs) || plain != fired(Mode::Full, &rules, &evs)
        })
        .collect()
}
