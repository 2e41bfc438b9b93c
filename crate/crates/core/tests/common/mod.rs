#![allow(dead_code)]

pub mod faults;
pub mod lru;
pub mod workload;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use cloakrule::broker::{bind, BrokerClient, BrokerConfig, BrokerHandle};
use cloakrule::config::Config;
use cloakrule::enclave::Mode;
use cloakrule::node::{self, EnclaveNode, HubNode};
use cloakrule::rule::{self, ActionCommand, Combinator, DeviceEvent, DeviceId, Rule, Scalar};

pub const PRESENCE_RULES: &str = include_str!("../../../../rules/presence.json");

pub const MASTER: &str = "00112233445566778899aabbccddeeff00112233445566778899aabbccddeeff";

static TIMING: Mutex<()> = Mutex::new(());

/// Serializes tests whose outcome depends on wall-clock timing.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn d(s: &str) -> DeviceId {
    DeviceId::new(s).unwrap()
}

pub fn scenario_config(broker: &str, mode: Mode) -> Config {
    let text = format!(
        r#"
broker = "{broker}"
mode = "{mode}"

[enclave]
transition_cost_us = 0
attest_attempts = 2
attest_timeout_ms = 1000

[keys]
master = "{MASTER}"

[[fleet.device]]
id = "presence-1"
kind = "presence"
period_ms = 1
generator = {{ type = "constant", value = "present" }}

[[fleet.device]]
id = "thermostat-1"
kind = "thermostat"

[[fleet.device]]
id = "switch-1"
kind = "switch"
"#
    );
    Config::parse(&text).unwrap()
}

/// Broker, hub (with key server) and enclave running in-process.
pub struct Scenario {
    pub broker: BrokerHandle,
    pub cfg: Config,
    pub hub: HubNode,
    pub enclave: EnclaveNode,
    pub sensor: BrokerClient,
}

impl Scenario {
    pub fn start(mode: Mode, capture: bool) -> Scenario {
        let broker = bind(
            "127.0.0.1:0",
            BrokerConfig {
                capture,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = scenario_config(&broker.local_addr().to_string(), mode);
        let hub = Arc::new(node::hub_from_config(&cfg).unwrap());
        let ks = Arc::new(node::key_server_from_config(&cfg).unwrap());
        let hub = HubNode::start(&cfg.broker, &cfg.enclave_id, hub, Some(ks)).unwrap();
        let enclave = EnclaveNode::start(&cfg).unwrap();
        let sensor = BrokerClient::connect(&cfg.broker).unwrap();
        Scenario {
            broker,
            cfg,
            hub,
            enclave,
            sensor,
        }
    }

    pub fn provision(&self, json: &str) {
        let rules = rule::parse_ruleset(json.as_bytes()).unwrap();
        let key = (self.cfg.mode == Mode::Full).then(|| self.cfg.ruleset_key().unwrap());
        let payloads = node::ruleset_payloads(self.cfg.mode, &rules, key.as_ref()).unwrap();
        let client = BrokerClient::connect(&self.cfg.broker).unwrap();
        node::provision_via_broker(&client, &payloads, Duration::from_secs(5)).unwrap();
    }

    pub fn presence(&self, value: &str) {
        let ev = DeviceEvent {
            device: d("presence-1"),
            capability: "presenceSensor".into(),
            attribute: "presence".into(),
            value: Scalar::from(value),
            timestamp: 1,
        };
        let msg = self.hub.hub.wrap_reading(&ev).unwrap();
        self.sensor.publish(&msg.topic, &msg.payload).unwrap();
    }

    /// Waits until the hub has applied `n` commands or `timeout` passes.
    pub fn await_applied(&self, n: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.hub.hub.counters().applied >= n {
                return true;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        false
    }

    pub fn actuator(&self, device: &str, attribute: &str) -> Option<Scalar> {
        self.hub.hub.actuator(&d(device))?.get(attribute).cloned()
    }

    pub fn stop(mut self) {
        self.enclave.stop();
        self.hub.stop();
        self.broker.shutdown();
    }
}

/// Straightforward nested-loop evaluation over the plaintext ruleset, used
/// as the reference for the engine.
pub struct Oracle {
    rules: Vec<Rule>,
    last: HashMap<(String, String), Scalar>,
}

impl Oracle {
    pub fn new(rules: Vec<Rule>) -> Self {
        Oracle {
            rules,
            last: HashMap::new(),
        }
    }

    fn cmp(op: &str, observed: &Scalar, expected: &Scalar) -> bool {
        if op == "equals" {
            return observed == expected;
        }
        let (Some(a), Some(b)) = (num(observed), num(expected)) else {
            return false;
        };
        match op {
            "greater_than" => a > b,
            "less_than" => a < b,
            "greater_than_or_equals" => a >= b,
            "less_than_or_equals" => a <= b,
            other => panic!("operator {other}"),
        }
    }

    pub fn feed(&mut self, ev: &DeviceEvent) -> Vec<ActionCommand> {
        let dev = ev.device.as_str().to_string();
        self.last
            .insert((dev.clone(), ev.attribute.clone()), ev.value.clone());
        let mut out = Vec::new();
        for r in &self.rules {
            let watches = r
                .conditions
                .iter()
                .any(|c| c.device.as_str() == dev && c.attribute == ev.attribute);
            if !watches {
                continue;
            }
            let mut results = Vec::new();
            for c in &r.conditions {
                let op = serde_json::to_value(c.operator).unwrap();
                let key = (c.device.as_str().to_string(), c.attribute.clone());
                results.push(match self.last.get(&key) {
                    Some(v) => Self::cmp(op.as_str().unwrap(), v, &c.value),
                    None => false,
                });
            }
            let fires = match r.combinator {
                Combinator::All => results.iter().all(|x| *x),
                Combinator::Any => results.iter().any(|x| *x),
            };
            if fires {
                out.extend(r.actions.iter().cloned());
            }
        }
        out
    }
}

fn num(s: &Scalar) -> Option<f64> {
    match serde_json::to_value(s).unwrap() {
        serde_json::Value::Number(n) => n.as_f64(),
        _ => None,
    }
}

/// Multiset key for comparing fired actions irrespective of order.
pub fn action_key(a: &ActionCommand) -> String {
    serde_json::to_string(a).unwrap()
}
