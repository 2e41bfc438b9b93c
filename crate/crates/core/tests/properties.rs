use std::collections::VecDeque;
use std::sync::Arc;

use cloakrule::broker::frame::{read_frame, write_frame};
use cloakrule::broker::WireMessage;
use cloakrule::enclave::{chunk_ruleset, CachePolicy, RuleCache};
use cloakrule::envelope::{self, Encryptor, Envelope, SymmetricKey, NONCE_LEN};
use cloakrule::rule::{
    self, ActionCommand, Combinator, Condition, DeviceId, Operator, Rule, Scalar,
};
use cloakrule::trace::{build_distribution, kl_divergence, AccessTrace, Op, Region, TraceSymbol};
use proptest::prelude::*;

fn device() -> impl Strategy<Value = DeviceId> {
    "[a-z][a-z0-9-]{0,8}".prop_map(|s| DeviceId::new(s).unwrap())
}

fn scalar() -> impl Strategy<Value = Scalar> {
    prop_oneof![
        any::<bool>().prop_map(Scalar::Bool),
        (-1e6f64..1e6).prop_map(Scalar::Number),
        "[ -~]{0,12}".prop_map(Scalar::Text),
    ]
}

fn condition() -> impl Strategy<Value = Condition> {
    (device(), "[a-zA-Z]{1,10}", 0..5usize, -100i32..100).prop_map(|(device, attribute, op, v)| {
        Condition {
            device,
            attribute,
            operator: Operator::ALL[op],
            value: Scalar::Number(v as f64),
        }
    })
}

fn action() -> impl Strategy<Value = ActionCommand> {
    (device(), "[a-zA-Z]{1,10}", prop::collection::vec(scalar(), 0..3)).prop_map(
        |(device, command, arguments)| ActionCommand {
            device,
            capability: "switch".into(),
            command,
            arguments,
        },
    )
}

fn arb_rule() -> impl Strategy<Value = Rule> {
    (
        "[a-z0-9]{1,8}",
        prop::collection::vec(condition(), 1..4),
        any::<bool>(),
        prop::collection::vec(action(), 1..3),
    )
        .prop_map(|(id, conditions, any, actions)| Rule {
            id,
            name: String::new(),
            conditions,
            combinator: if any { Combinator::Any } else { Combinator::All },
            actions,
        })
}

fn symbol() -> impl Strategy<Value = TraceSymbol> {
    (any::<bool>(), 0..Region::ALL.len())
        .prop_map(|(w, r)| TraceSymbol::new(if w { Op::W } else { Op::R }, Region::ALL[r]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn decrypt_inverts_encrypt(
        key in any::<[u8; 32]>(),
        msg in prop::collection::vec(any::<u8>(), 0..512),
        aad in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let k = SymmetricKey::new("k", key);
        let env = Encryptor::new(k.clone()).encrypt(&msg, &aad, "s").unwrap();
        prop_assert_eq!(envelope::decrypt(&k, &env).unwrap(), msg.clone());
        let back = Envelope::from_json(env.to_json().as_bytes()).unwrap();
        prop_assert_eq!(envelope::decrypt(&k, &back).unwrap(), msg);
    }

    #[test]
    fn any_authenticated_bit_flip_fails(
        key in any::<[u8; 32]>(),
        msg in prop::collection::vec(any::<u8>(), 0..64),
        aad in prop::collection::vec(any::<u8>(), 1..16),
        pick in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let k = SymmetricKey::new("k", key);
        let env = Encryptor::new(k.clone()).encrypt(&msg, &aad, "s").unwrap();
        let total = NONCE_LEN + env.ciphertext.len() + env.aad.len();
        let mut i = pick.index(total);
        let mut bad = env.clone();
        if i < NONCE_LEN {
            bad.nonce[i] ^= 1 << bit;
        } else {
            i -= NONCE_LEN;
            if i < env.ciphertext.len() {
                bad.ciphertext[i] ^= 1 << bit;
            } else {
                bad.aad[i - env.ciphertext.len()] ^= 1 << bit;
            }
        }
        prop_assert!(matches!(envelope::decrypt(&k, &bad), Err(cloakrule::Error::Authentication)));
    }

    #[test]
    fn rule_json_round_trips(r in arb_rule()) {
        let back = rule::parse_rule(r.to_json().as_bytes()).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn frames_round_trip(
        topic in "evt/[a-z0-9-]{1,10}",
        seq in any::<u64>(),
        payload in prop::collection::vec(any::<u8>(), 0..2048),
    ) {
        let msg = WireMessage::new(topic, seq, payload);
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        let (back, raw) = read_frame(&mut buf.as_slice()).unwrap().unwrap();
        prop_assert_eq!(back, msg);
        prop_assert_eq!(raw, buf);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(
        a in prop::collection::vec(symbol(), 1..200),
        b in prop::collection::vec(symbol(), 1..200),
    ) {
        let p = build_distribution(&AccessTrace { symbols: a }).unwrap();
        let q = build_distribution(&AccessTrace { symbols: b }).unwrap();
        prop_assert_eq!(kl_divergence(&p, &p).unwrap().value(), 0.0);
        prop_assert!(kl_divergence(&p, &q).unwrap().value() >= 0.0);
        let sum: f64 = p.probabilities.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lru_matches_a_list_model(
        capacity in 0usize..6,
        ops in prop::collection::vec(0u8..8, 0..200),
    ) {
        let mut cache = RuleCache::new(capacity, CachePolicy::Lru);
        // front = most recent
        let mut model: VecDeque<u8> = VecDeque::new();
        for op in ops {
            let dev = DeviceId::new(format!("d{op}")).unwrap();
            let hit = cache.get(&dev).is_some();
            let pos = model.iter().position(|&x| x == op);
            prop_assert_eq!(hit, pos.is_some());
            match pos {
                Some(p) => {
                    model.remove(p);
                    model.push_front(op);
                }
                None => {
                    let evicted = cache.insert(dev, Arc::new(Vec::new()));
                    if capacity > 0 {
                        let expect = (model.len() == capacity).then(|| model.pop_back()).flatten();
                        prop_assert_eq!(evicted, expect.map(|x| DeviceId::new(format!("d{x}")).unwrap()));
                        model.push_front(op);
                    }
                }
            }
            prop_assert!(cache.len() <= capacity);
        }
        let order: Vec<DeviceId> = model.iter().map(|x| DeviceId::new(format!("d{x}")).unwrap()).collect();
        prop_assert_eq!(cache.recency_order(), order);
    }

    #[test]
    fn chunking_partitions_the_ruleset(
        rules in prop::collection::vec(arb_rule(), 0..40),
        budget in 600usize..4000,
    ) {
        let mut rules = rules;
        for (i, r) in rules.iter_mut().enumerate() {
            r.id = format!("r{i}");
        }
        match chunk_ruleset(&rules, budget) {
            Ok(chunks) => {
                let mut ids: Vec<String> = chunks.iter().flatten().map(|r| r.id.clone()).collect();
                ids.sort();
                let mut want: Vec<String> = rules.iter().map(|r| r.id.clone()).collect();
                want.sort();
                prop_assert_eq!(ids, want);
                for (i, a) in chunks.iter().enumerate() {
                    for b in &chunks[i + 1..] {
                        for ra in a {
                            for rb in b {
                                for dv in ra.trigger_devices() {
                                    prop_assert!(!rb.trigger_devices().contains(&dv));
                                }
                            }
                        }
                    }
                }
            }
            Err(e) => prop_assert!(matches!(e, cloakrule::Error::PayloadTooLarge(_))),
        }
    }
}
