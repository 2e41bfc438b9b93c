//! Long-running components wired to the broker: the enclave host, the hub
//! (relay plus attestation server) and ruleset provisioning.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attestation::{build_info, generate_quote, HandshakeMessage, PlatformKey, SessionKeySet};
use crate::broker::topic::RULES_TOPIC;
use crate::broker::{bind, BrokerClient, BrokerConfig, Topic, WireMessage};
use crate::config::Config;
use crate::enclave::{chunk_ruleset, Mode, ProvisionReport, TrustedBoundary, MAX_RULESET_CHUNK};
use crate::envelope::{Encryptor, SymmetricKey};
use crate::error::{Error, Result};
use crate::hub::{Hub, KeyServer};
use crate::rule::Rule;

const POLL: Duration = Duration::from_millis(50);

/// Connects, retrying while the broker is not up yet.
pub fn connect_with_retry(addr: &str, attempts: u32, pause: Duration) -> Result<BrokerClient> {
    let mut last = None;
    for i in 0..attempts.max(1) {
        match BrokerClient::connect(addr) {
            Ok(c) => return Ok(c),
            Err(e) => {
                log::debug!("connect attempt {} to {addr} failed: {e}", i + 1);
                last = Some(e);
                thread::sleep(pause);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Reply published on `prov/rules` after a ruleset was handled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProvisionAck {
    Ack { devices: usize, rules: usize },
    Error { error: String },
}

impl ProvisionAck {
    /// `None` for anything on the topic that is not an ack (a ruleset).
    pub fn parse(payload: &[u8]) -> Option<Self> {
        serde_json::from_slice(payload).ok()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ack serializes")
    }
}

/// Runs the enclave side of attestation over `attest/<enclave_id>`. Gives
/// up with a configuration error when no server answers.
pub fn attest_via_broker(
    client: &BrokerClient,
    platform: &PlatformKey,
    enclave_id: &str,
    attempts: u32,
    timeout: Duration,
) -> Result<(SessionKeySet, SymmetricKey)> {
    let topic = Topic::attest(enclave_id);
    client.subscribe(&topic)?;
    for attempt in 1..=attempts.max(1) {
        let (quote, handshake) = generate_quote(platform, &build_info());
        let mine = quote.enclave_public;
        client.publish(&topic, HandshakeMessage::Quote(quote).to_json().as_bytes())?;
        let deadline = Instant::now() + timeout;
        let mut hello = None;
        let mut provision = None;
        while Instant::now() < deadline && (hello.is_none() || provision.is_none()) {
            let Some(msg) = client.recv_timeout(deadline.saturating_duration_since(Instant::now()))? else {
                break;
            };
            if msg.topic != topic {
                continue;
            }
            match HandshakeMessage::from_json(&msg.payload) {
                Ok(HandshakeMessage::ServerHello {
                    enclave_public,
                    server_public,
                }) if enclave_public == mine => hello = Some(server_public),
                Ok(HandshakeMessage::Provision {
                    enclave_public,
                    envelope,
                }) if enclave_public == mine => provision = Some(envelope),
                _ => {}
            }
        }
        if let (Some(server_public), Some(envelope)) = (hello, provision) {
            return handshake.finish(&server_public, &envelope);
        }
        log::warn!("attestation attempt {attempt} on {topic} got no answer");
    }
    Err(Error::Config(format!(
        "no attestation server answered on {topic} after {attempts} attempt(s)"
    )))
}

/// A stoppable background component.
pub struct NodeHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl NodeHandle {
    fn spawn(name: &str, body: impl FnOnce(Arc<AtomicBool>) + Send + 'static) -> Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name(name.into())
            .spawn(move || body(flag))?;
        Ok(NodeHandle {
            stop,
            thread: Some(thread),
        })
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map_or(true, |t| t.is_finished())
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Time the enclave host spends handling events, counted once the
/// resulting commands are published.
#[derive(Debug, Default)]
pub struct ExecStats {
    handled: AtomicU64,
    busy_ns: AtomicU64,
    commands: AtomicU64,
}

impl ExecStats {
    /// (events handled, nanoseconds spent, commands published)
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.handled.load(Ordering::Acquire),
            self.busy_ns.load(Ordering::Acquire),
            self.commands.load(Ordering::Acquire),
        )
    }
}

pub struct EnclaveNode {
    pub boundary: Arc<TrustedBoundary>,
    pub exec: Arc<ExecStats>,
    handle: NodeHandle,
}

impl EnclaveNode {
    /// Connects, attests (in `Full` mode), then serves `evt/+` and
    /// `prov/rules` until stopped.
    pub fn start(cfg: &Config) -> Result<Self> {
        let client = connect_with_retry(
            &cfg.broker,
            cfg.enclave.connect_attempts,
            Duration::from_millis(200),
        )?;
        let (keys, ruleset_key) = if cfg.mode == Mode::Full {
            let (k, r) = attest_via_broker(
                &client,
                &cfg.platform_key()?,
                &cfg.enclave_id,
                cfg.enclave.attest_attempts,
                Duration::from_millis(cfg.enclave.attest_timeout_ms),
            )?;
            log::info!("attested; {} device key(s) provisioned", k.device_keys.len());
            (k, Some(r))
        } else {
            let platform = cfg.platform_key().unwrap_or_else(|_| PlatformKey::generate());
            let k_sgx = platform.sealing_key(&crate::attestation::Measurement::current());
            (
                SessionKeySet {
                    device_keys: Default::default(),
                    k_sgx,
                },
                None,
            )
        };
        let boundary = Arc::new(TrustedBoundary::new(cfg.boundary_config(), keys, ruleset_key)?);
        client.subscribe("evt/+")?;
        client.subscribe(RULES_TOPIC)?;
        let b = boundary.clone();
        let exec = Arc::new(ExecStats::default());
        let stats = exec.clone();
        let handle = NodeHandle::spawn("enclave", move |stop| {
            while !stop.load(Ordering::SeqCst) {
                match client.recv_timeout(POLL) {
                    Ok(Some(msg)) => enclave_dispatch(&client, &b, &stats, msg),
                    Ok(None) => {}
                    Err(e) => {
                        log::error!("enclave lost broker: {e}");
                        break;
                    }
                }
            }
            if let Err(e) = b.flush() {
                log::error!("store flush failed: {e}");
            }
        })?;
        Ok(EnclaveNode {
            boundary,
            exec,
            handle,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    pub fn stop(&mut self) {
        self.handle.stop();
    }
}

fn enclave_dispatch(client: &BrokerClient, boundary: &TrustedBoundary, stats: &ExecStats, msg: WireMessage) {
    if msg.topic == RULES_TOPIC {
        if ProvisionAck::parse(&msg.payload).is_some() {
            return;
        }
        let ack = match boundary.provision_ruleset(&msg.payload) {
            Ok(r) => {
                log::info!("provisioned {} devices / {} rules", r.devices, r.rules);
                ProvisionAck::Ack {
                    devices: r.devices,
                    rules: r.rules,
                }
            }
            Err(e) => {
                log::warn!("ruleset rejected: {e}");
                ProvisionAck::Error { error: e.to_string() }
            }
        };
        if let Err(e) = client.publish(RULES_TOPIC, ack.to_json().as_bytes()) {
            log::error!("cannot publish provisioning ack: {e}");
        }
        return;
    }
    let started = Instant::now();
    let result = boundary.handle_event(&msg.topic, &msg.payload);
    let busy = started.elapsed();
    let mut published = 0;
    match result {
        Ok(out) => {
            for m in out {
                match client.publish(&m.topic, &m.payload) {
                    Ok(_) => published += 1,
                    Err(e) => log::error!("cannot publish {}: {e}", m.topic),
                }
            }
        }
        Err(e) => log::warn!("event on {} rejected: {e}", msg.topic),
    }
    stats.busy_ns.fetch_add(busy.as_nanos() as u64, Ordering::AcqRel);
    stats.commands.fetch_add(published, Ordering::AcqRel);
    stats.handled.fetch_add(1, Ordering::AcqRel);
}

pub struct HubNode {
    pub hub: Arc<Hub>,
    pub key_server: Option<Arc<KeyServer>>,
    handle: NodeHandle,
}

impl HubNode {
    /// Serves `cmd/<d>` for every actuator on `hub` and, with a key server,
    /// answers quotes on `attest/<enclave_id>`.
    pub fn start(
        broker: &str,
        enclave_id: &str,
        hub: Arc<Hub>,
        key_server: Option<Arc<KeyServer>>,
    ) -> Result<Self> {
        let client = connect_with_retry(broker, 10, Duration::from_millis(200))?;
        let attest_topic = Topic::attest(enclave_id);
        if key_server.is_some() {
            client.subscribe(&attest_topic)?;
        }
        for d in hub.actuator_devices() {
            client.subscribe(&Topic::command(&d))?;
        }
        let (h, ks) = (hub.clone(), key_server.clone());
        let handle = NodeHandle::spawn("hub", move |stop| {
            while !stop.load(Ordering::SeqCst) {
                let msg = match client.recv_timeout(POLL) {
                    Ok(Some(m)) => m,
                    Ok(None) => continue,
                    Err(e) => {
                        log::error!("hub lost broker: {e}");
                        break;
                    }
                };
                if msg.topic == attest_topic {
                    let Some(ks) = &ks else { continue };
                    match ks.answer(&msg.payload) {
                        Ok(replies) => {
                            for r in replies {
                                if let Err(e) = client.publish(&attest_topic, &r) {
                                    log::error!("cannot answer quote: {e}");
                                }
                            }
                        }
                        Err(e) => log::warn!("quote not answered: {e}"),
                    }
                } else {
                    match h.deliver(&msg.topic, &msg.payload) {
                        Ok(cmd) => log::info!("{} <- {}", cmd.device, cmd.command),
                        Err(e) => log::warn!("command on {} dropped: {e}", msg.topic),
                    }
                }
            }
        })?;
        Ok(HubNode {
            hub,
            key_server,
            handle,
        })
    }

    pub fn stop(&mut self) {
        self.handle.stop();
    }
}

/// Hub for the configured fleet: keys for every configured device and an
/// actuator record for each actuator profile.
pub fn hub_from_config(cfg: &Config) -> Result<Hub> {
    let keys = if cfg.mode == Mode::Full {
        cfg.device_keys()?
    } else {
        Default::default()
    };
    let hub = Hub::new(cfg.mode, keys).with_enclave_id(&cfg.enclave_id);
    for p in cfg.fleet.devices.iter().filter(|p| p.kind.is_actuator()) {
        hub.add_actuator(p.device.clone(), p.kind);
    }
    Ok(hub)
}

pub fn key_server_from_config(cfg: &Config) -> Result<KeyServer> {
    Ok(KeyServer::new(
        crate::attestation::Measurement::current(),
        cfg.platform_verifying_key()?,
        cfg.provisioned_secrets()?,
    ))
}

/// The messages a client publishes on `prov/rules` for `mode`: one per
/// ruleset chunk.
pub fn ruleset_payloads(
    mode: Mode,
    rules: &[Rule],
    ruleset_key: Option<&SymmetricKey>,
) -> Result<Vec<Vec<u8>>> {
    let enc = match mode {
        Mode::Full => Some(Encryptor::new(
            ruleset_key
                .ok_or_else(|| Error::Config("Full mode needs the ruleset key".into()))?
                .clone(),
        )),
        _ => None,
    };
    chunk_ruleset(rules, MAX_RULESET_CHUNK)?
        .iter()
        .map(|chunk| match &enc {
            Some(e) => Ok(TrustedBoundary::seal_ruleset_for_transport(e, chunk, "client")?
                .to_json()
                .into_bytes()),
            None => Ok(crate::rule::ruleset_to_json(chunk).into_bytes()),
        })
        .collect()
}

/// Publishes each payload in turn and waits for the enclave's count
/// acknowledgement of each. Returns the summed counts.
pub fn provision_via_broker(
    client: &BrokerClient,
    payloads: &[Vec<u8>],
    timeout: Duration,
) -> Result<ProvisionReport> {
    client.subscribe(RULES_TOPIC)?;
    let mut total = ProvisionReport { devices: 0, rules: 0 };
    for payload in payloads {
        client.publish(RULES_TOPIC, payload)?;
        let r = await_ack(client, timeout)?;
        total.devices += r.devices;
        total.rules += r.rules;
    }
    Ok(total)
}

fn await_ack(client: &BrokerClient, timeout: Duration) -> Result<ProvisionReport> {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        let Some(msg) = client.recv_timeout(deadline.saturating_duration_since(Instant::now()))? else {
            break;
        };
        if msg.topic != RULES_TOPIC {
            continue;
        }
        match ProvisionAck::parse(&msg.payload) {
            Some(ProvisionAck::Ack { devices, rules }) => return Ok(ProvisionReport { devices, rules }),
            Some(ProvisionAck::Error { error }) => {
                return Err(Error::Publish(format!("enclave refused ruleset: {error}")))
            }
            None => {}
        }
    }
    Err(Error::Timeout("provisioning acknowledgement".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayReport {
    pub mode: String,
    pub events: usize,
    /// Events that produced at least one command.
    pub fired: usize,
    pub commands: u64,
    /// Mean time inside the enclave host per event.
    pub exec_mean_us: f64,
    /// Mean time from publishing a reading to the hub applying its last
    /// command, over fired events.
    pub e2e_mean_us: f64,
    /// End-to-end minus execution, over fired events.
    pub network_mean_us: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn wait_for(timeout: Duration, what: &str, mut done: impl FnMut() -> bool) -> Result<()> {
    let deadline = Instant::now() + timeout;
    while !done() {
        if Instant::now() > deadline {
            return Err(Error::Timeout(what.into()));
        }
        thread::yield_now();
    }
    Ok(())
}

/// Runs a broker, hub and enclave in-process for `cfg`, provisions `rules`
/// and sends `events` readings from the configured sensors one at a time,
/// each after the previous one has settled.
pub fn measure_delays(cfg: &Config, rules: &[Rule], events: usize, timeout: Duration) -> Result<DelayReport> {
    let mut broker = bind("127.0.0.1:0", BrokerConfig::default())?;
    let mut cfg = cfg.clone();
    cfg.broker = broker.local_addr().to_string();
    cfg.enclave.store = None;
    let hub = Arc::new(hub_from_config(&cfg)?);
    let ks = match cfg.mode {
        Mode::Full => Some(Arc::new(key_server_from_config(&cfg)?)),
        _ => None,
    };
    let mut hub_node = HubNode::start(&cfg.broker, &cfg.enclave_id, hub.clone(), ks)?;
    let mut enclave = EnclaveNode::start(&cfg)?;

    let client = BrokerClient::connect(&cfg.broker)?;
    let key = match cfg.mode {
        Mode::Full => Some(cfg.ruleset_key()?),
        _ => None,
    };
    provision_via_broker(&client, &ruleset_payloads(cfg.mode, rules, key.as_ref())?, timeout)?;

    let plan = crate::device::plan_events(&cfg.fleet.devices, events, cfg.seed)?;
    let (mut exec, mut e2e, mut network) = (Vec::new(), Vec::new(), Vec::new());
    let mut commands = 0;
    for mut ev in plan {
        let (handled, busy, sent) = enclave.exec.snapshot();
        let settled = hub.counters().received;
        ev.timestamp = crate::device::now_us();
        let msg = hub.wrap_reading(&ev)?;
        let started = Instant::now();
        client.publish(&msg.topic, &msg.payload)?;
        wait_for(timeout, "enclave", || enclave.exec.snapshot().0 > handled)?;
        let (_, busy_after, sent_after) = enclave.exec.snapshot();
        let fired = sent_after - sent;
        wait_for(timeout, "hub", || hub.counters().received >= settled + fired)?;
        let total = started.elapsed().as_secs_f64() * 1e6;
        let inside = (busy_after - busy) as f64 / 1e3;
        exec.push(inside);
        if fired > 0 {
            commands += fired;
            e2e.push(total);
            network.push(total - inside);
        }
    }
    enclave.stop();
    hub_node.stop();
    broker.shutdown();
    Ok(DelayReport {
        mode: cfg.mode.name().to_string(),
        events: exec.len(),
        fired: e2e.len(),
        commands,
        exec_mean_us: mean(&exec),
        e2e_mean_us: mean(&e2e),
        network_mean_us: mean(&network),
    })
}
