//! The trusted boundary: an in-process stand-in for an enclave hosting the
//! rule engine.
//!
//! Data enters and leaves through explicit gates that copy buffers across the
//! boundary and charge a fixed transition cost per crossing, the way an
//! ecall/ocall pair would. Three [`Mode`]s share the same rule semantics:
//!
//! * `Plain`: no gates, plaintext payloads, rules held as parsed values.
//! * `TrustedNoEnc`: gated, plaintext payloads, rules held as framed bytes.
//! * `Full`: gated, every payload is an [`Envelope`], rules are sealed under k_sgx.

pub mod cache;
pub mod store;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use cache::{CachePolicy, CacheStats, RuleCache, DEFAULT_CAPACITY};
pub use store::SealedStore;

use crate::attestation::SessionKeySet;
use crate::broker::topic::{Topic, RULES_TOPIC};
use crate::envelope::{self, seal_rules, unseal_rules, Encryptor, Envelope, SymmetricKey};
use crate::error::{Error, Result};
use crate::rule::{self, ActionCommand, Combinator, DeviceEvent, DeviceId, Rule, Scalar};
use crate::trace::{AccessTrace, Op, Region, TraceSymbol};

/// Default cost charged per boundary crossing.
pub const DEFAULT_TRANSITION_COST: Duration = Duration::from_micros(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Plain,
    TrustedNoEnc,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Plain, Mode::TrustedNoEnc, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::TrustedNoEnc => "trusted-no-enc",
            Mode::Full => "full",
        }
    }

    pub fn gated(self) -> bool {
        !matches!(self, Mode::Plain)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "plain" | "no-sgx" => Ok(Mode::Plain),
            "trusted-no-enc" | "trustednoenc" | "sgx-no-enc" => Ok(Mode::TrustedNoEnc),
            "full" | "sgx" => Ok(Mode::Full),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundaryConfig {
    pub enclave_id: String,
    pub mode: Mode,
    pub cache_policy: CachePolicy,
    pub cache_capacity: usize,
    pub store_path: Option<PathBuf>,
    pub transition_cost: Duration,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            enclave_id: "enclave-0".into(),
            mode: Mode::Full,
            cache_policy: CachePolicy::Lru,
            cache_capacity: DEFAULT_CAPACITY,
            store_path: None,
            transition_cost: DEFAULT_TRANSITION_COST,
        }
    }
}

impl BoundaryConfig {
    pub fn with_mode(mode: Mode) -> Self {
        BoundaryConfig {
            mode,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutboundMessage {
    pub topic: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct EventOutcome {
    pub actions: Vec<ActionCommand>,
    pub outbound: Vec<OutboundMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProvisionReport {
    pub devices: usize,
    pub rules: usize,
}

#[derive(Debug, Default)]
struct Counters {
    events: AtomicU64,
    decrypts: AtomicU64,
    encrypts: AtomicU64,
    seals: AtomicU64,
    unseals: AtomicU64,
    crossings: AtomicU64,
    auth_failures: AtomicU64,
    unknown_device: AtomicU64,
    undeliverable: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub events: u64,
    pub decrypts: u64,
    pub encrypts: u64,
    pub seals: u64,
    pub unseals: u64,
    pub crossings: u64,
    pub auth_failures: u64,
    pub unknown_device: u64,
    pub undeliverable: u64,
}

enum RuleStore {
    Plain(HashMap<DeviceId, Arc<Vec<Rule>>>),
    Framed(HashMap<DeviceId, Vec<u8>>),
    Sealed(SealedStore),
}

struct BusyGuard<'a>(&'a AtomicUsize);

impl<'a> BusyGuard<'a> {
    fn enter(n: &'a AtomicUsize) -> Self {
        n.fetch_add(1, Ordering::AcqRel);
        BusyGuard(n)
    }
}

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

pub struct TrustedBoundary {
    enclave_id: String,
    mode: RwLock<Mode>,
    transition_cost: Duration,
    sealer: Encryptor,
    device_keys: RwLock<HashMap<DeviceId, Arc<Encryptor>>>,
    ruleset_key: RwLock<Option<SymmetricKey>>,
    cache: Mutex<RuleCache>,
    store: RwLock<RuleStore>,
    last_values: RwLock<HashMap<(DeviceId, String), Scalar>>,
    device_locks: Mutex<HashMap<DeviceId, Arc<Mutex<()>>>>,
    in_flight: AtomicUsize,
    counters: Counters,
    tracing: AtomicBool,
    trace: Mutex<Vec<TraceSymbol>>,
    trace_serial: Mutex<()>,
    capture_crossings: AtomicBool,
    crossing_log: Mutex<Vec<Vec<u8>>>,
}

impl fmt::Debug for TrustedBoundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustedBoundary")
            .field("enclave_id", &self.enclave_id)
            .field("mode", &*self.mode.read())
            .finish_non_exhaustive()
    }
}

fn spin_for(cost: Duration) {
    if cost.is_zero() {
        return;
    }
    let start = Instant::now();
    while start.elapsed() < cost {
        std::hint::spin_loop();
    }
}

fn frame_rules(rules: &[Rule]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rules {
        let json = r.to_json();
        out.extend_from_slice(&(json.len() as u32).to_be_bytes());
        out.extend_from_slice(json.as_bytes());
    }
    out
}

/// Groups rules under every device their conditions watch. A rule whose
/// conditions all name one device is stored exactly once.
pub fn group_by_trigger_device(rules: &[Rule]) -> BTreeMap<DeviceId, Vec<Rule>> {
    let mut groups: BTreeMap<DeviceId, Vec<Rule>> = BTreeMap::new();
    for r in rules {
        for d in r.trigger_devices() {
            groups.entry(d.clone()).or_default().push(r.clone());
        }
    }
    groups
}

/// Largest ruleset JSON sent in one provisioning message. Leaves room for
/// the envelope's base64 growth under the 1 MiB transport payload limit.
pub const MAX_RULESET_CHUNK: usize = 512 * 1024;

/// Splits a ruleset for provisioning in several messages. Rules that share a
/// trigger device always travel together (devices linked through a
/// multi-device rule form one unit), so every chunk carries the complete rule
/// list of each device it touches and replacing those records loses nothing.
pub fn chunk_ruleset(rules: &[Rule], max_bytes: usize) -> Result<Vec<Vec<Rule>>> {
    // union-find over rule indices keyed by shared trigger devices
    let mut parent: Vec<usize> = (0..rules.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut owner: HashMap<&DeviceId, usize> = HashMap::new();
    for (i, r) in rules.iter().enumerate() {
        for d in r.trigger_devices() {
            if let Some(&j) = owner.get(d) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            } else {
                owner.insert(d, i);
            }
        }
    }
    let mut units: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..rules.len() {
        let root = find(&mut parent, i);
        units.entry(root).or_default().push(i);
    }
    let mut units: Vec<Vec<usize>> = units.into_values().collect();
    units.sort_by_key(|u| u[0]);

    let mut chunks = Vec::new();
    let mut current: Vec<Rule> = Vec::new();
    let mut size = 2;
    for unit in units {
        let unit_size: usize = unit.iter().map(|&i| rules[i].to_json().len() + 1).sum();
        if unit_size + 2 > max_bytes {
            return Err(Error::PayloadTooLarge(unit_size));
        }
        if size + unit_size > max_bytes && !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
            size = 2;
        }
        size += unit_size;
        current.extend(unit.into_iter().map(|i| rules[i].clone()));
    }
    if !current.is_empty() || chunks.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}

impl TrustedBoundary {
    pub fn new(
        config: BoundaryConfig,
        keys: SessionKeySet,
        ruleset_key: Option<SymmetricKey>,
    ) -> Result<Self> {
        let sealed = match &config.store_path {
            Some(p) => SealedStore::open(p)?,
            None => SealedStore::in_memory(),
        };
        let boundary = TrustedBoundary {
            enclave_id: config.enclave_id,
            mode: RwLock::new(Mode::Full),
            transition_cost: config.transition_cost,
            sealer: Encryptor::new(keys.k_sgx),
            device_keys: RwLock::new(HashMap::new()),
            ruleset_key: RwLock::new(ruleset_key),
            cache: Mutex::new(RuleCache::new(config.cache_capacity, config.cache_policy)),
            store: RwLock::new(RuleStore::Sealed(sealed)),
            last_values: RwLock::new(HashMap::new()),
            device_locks: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            counters: Counters::default(),
            tracing: AtomicBool::new(false),
            trace: Mutex::new(Vec::new()),
            trace_serial: Mutex::new(()),
            capture_crossings: AtomicBool::new(false),
            crossing_log: Mutex::new(Vec::new()),
        };
        boundary.install_device_keys(keys.device_keys);
        if config.mode != Mode::Full {
            boundary.set_mode(config.mode)?;
        }
        Ok(boundary)
    }

    pub fn enclave_id(&self) -> &str {
        &self.enclave_id
    }

    pub fn mode(&self) -> Mode {
        *self.mode.read()
    }

    pub fn install_device_keys(&self, keys: BTreeMap<DeviceId, SymmetricKey>) {
        let mut map = self.device_keys.write();
        for (d, k) in keys {
            map.insert(d, Arc::new(Encryptor::new(k)));
        }
    }

    pub fn set_ruleset_key(&self, key: SymmetricKey) {
        *self.ruleset_key.write() = Some(key);
    }

    pub fn has_device_key(&self, device: &DeviceId) -> bool {
        self.device_keys.read().contains_key(device)
    }

    // ---- gates ----

    fn cross(&self, bytes: &[u8]) -> Vec<u8> {
        let copy = bytes.to_vec();
        self.counters.crossings.fetch_add(1, Ordering::Relaxed);
        if self.capture_crossings.load(Ordering::Relaxed) {
            self.crossing_log.lock().push(copy.clone());
        }
        spin_for(self.transition_cost);
        copy
    }

    /// Records a copy of every buffer that crosses the boundary from now on.
    pub fn capture_crossings(&self, on: bool) {
        self.capture_crossings.store(on, Ordering::Relaxed);
    }

    pub fn take_crossings(&self) -> Vec<Vec<u8>> {
        std::mem::take(&mut *self.crossing_log.lock())
    }

    // ---- tracing ----

    pub fn enable_tracing(&self) {
        self.tracing.store(true, Ordering::Release);
    }

    pub fn disable_tracing(&self) {
        self.tracing.store(false, Ordering::Release);
    }

    pub fn tracing_enabled(&self) -> bool {
        self.tracing.load(Ordering::Acquire)
    }

    pub fn take_trace(&self) -> AccessTrace {
        AccessTrace {
            symbols: std::mem::take(&mut *self.trace.lock()),
        }
    }

    #[inline]
    fn touch(&self, op: Op, region: Region) {
        if self.tracing.load(Ordering::Relaxed) {
            self.trace.lock().push(TraceSymbol::new(op, region));
        }
    }

    // ---- mode ----

    /// Switches mode, converting stored rules to the new representation and
    /// dropping the cache. Refused while any event is being handled.
    pub fn set_mode(&self, mode: Mode) -> Result<()> {
        let Some(mut current) = self.mode.try_write() else {
            return Err(Error::ModeChangeWhileBusy(
                self.in_flight.load(Ordering::Acquire).max(1),
            ));
        };
        if *current == mode {
            return Ok(());
        }
        let mut store = self.store.write();
        let contents = self.materialize(&store)?;
        *store = match mode {
            Mode::Plain => RuleStore::Plain(
                contents.into_iter().map(|(d, r)| (d, Arc::new(r))).collect(),
            ),
            Mode::TrustedNoEnc => RuleStore::Framed(
                contents.into_iter().map(|(d, r)| (d, frame_rules(&r))).collect(),
            ),
            Mode::Full => {
                let mut sealed = match std::mem::replace(&mut *store, RuleStore::Plain(HashMap::new())) {
                    RuleStore::Sealed(s) => s,
                    _ => SealedStore::in_memory(),
                };
                for (d, rules) in contents {
                    sealed.put(seal_rules(&self.sealer, &d, &rules)?)?;
                }
                RuleStore::Sealed(sealed)
            }
        };
        self.cache.lock().clear();
        *current = mode;
        Ok(())
    }

    fn materialize(&self, store: &RuleStore) -> Result<Vec<(DeviceId, Vec<Rule>)>> {
        match store {
            RuleStore::Plain(m) => Ok(m.iter().map(|(d, r)| (d.clone(), (**r).clone())).collect()),
            RuleStore::Framed(m) => m
                .iter()
                .map(|(d, b)| Ok((d.clone(), envelope::unframe_rules(b)?)))
                .collect(),
            RuleStore::Sealed(s) => s
                .records()
                .map(|rec| Ok((rec.device.clone(), unseal_rules(self.sealer.key(), rec)?)))
                .collect(),
        }
    }

    // ---- provisioning ----

    /// Loads a ruleset. In `Full` mode `payload` is an envelope under the
    /// ruleset key with aad `prov/rules`; otherwise it is ruleset JSON.
    /// Each device named by a rule condition gets its record replaced.
    pub fn provision_ruleset(&self, payload: &[u8]) -> Result<ProvisionReport> {
        let mode = self.mode.read();
        let _busy = BusyGuard::enter(&self.in_flight);
        let inbound: Cow<[u8]> = if mode.gated() {
            Cow::Owned(self.cross(payload))
        } else {
            Cow::Borrowed(payload)
        };
        let plain: Cow<[u8]> = if *mode == Mode::Full {
            let env = Envelope::from_json(&inbound).map_err(|_| Error::Authentication)?;
            if env.aad != RULES_TOPIC.as_bytes() {
                return Err(Error::Authentication);
            }
            let key = self
                .ruleset_key
                .read()
                .clone()
                .ok_or_else(|| Error::Config("no ruleset key provisioned".into()))?;
            self.counters.decrypts.fetch_add(1, Ordering::Relaxed);
            Cow::Owned(envelope::decrypt(&key, &env).inspect_err(|_| {
                self.counters.auth_failures.fetch_add(1, Ordering::Relaxed);
            })?)
        } else {
            inbound
        };
        let rules = rule::parse_ruleset(&plain)?;
        let groups = group_by_trigger_device(&rules);

        let mut store = self.store.write();
        match &mut *store {
            RuleStore::Plain(m) => {
                for (d, r) in &groups {
                    m.insert(d.clone(), Arc::new(r.clone()));
                }
            }
            RuleStore::Framed(m) => {
                for (d, r) in &groups {
                    m.insert(d.clone(), frame_rules(r));
                }
            }
            RuleStore::Sealed(s) => {
                let mut records = Vec::with_capacity(groups.len());
                for (d, r) in &groups {
                    records.push(seal_rules(&self.sealer, d, r)?);
                    self.counters.seals.fetch_add(1, Ordering::Relaxed);
                }
                for rec in records {
                    s.put(rec)?;
                }
                s.flush()?;
            }
        }
        let mut cache = self.cache.lock();
        for d in groups.keys() {
            cache.invalidate(d);
        }
        Ok(ProvisionReport {
            devices: groups.len(),
            rules: rules.len(),
        })
    }

    /// Encrypts a ruleset the way a client would before sending it to the
    /// enclave. Convenience for tests and tooling that hold the ruleset key.
    pub fn seal_ruleset_for_transport(
        key: &Encryptor,
        rules: &[Rule],
        sender: &str,
    ) -> Result<Envelope> {
        key.encrypt(rule::ruleset_to_json(rules).as_bytes(), RULES_TOPIC.as_bytes(), sender)
    }

    // ---- event handling ----

    fn device_lock(&self, device: &DeviceId) -> Arc<Mutex<()>> {
        self.device_locks
            .lock()
            .entry(device.clone())
            .or_default()
            .clone()
    }

    pub fn handle_event(&self, topic: &str, payload: &[u8]) -> Result<Vec<OutboundMessage>> {
        self.handle_event_detailed(topic, payload).map(|o| o.outbound)
    }

    /// Handles one event message. Returns the fired actions (inside the
    /// boundary view) together with the outbound messages. A device without
    /// stored rules yields an empty outcome.
    pub fn handle_event_detailed(&self, topic: &str, payload: &[u8]) -> Result<EventOutcome> {
        let device = match Topic::parse(topic)? {
            Topic::Event(d) => d,
            _ => return Err(Error::TopicInvalid(topic.to_string())),
        };
        let _serial = self.tracing_enabled().then(|| self.trace_serial.lock());
        let mode_guard = self.mode.read();
        let mode = *mode_guard;
        let _busy = BusyGuard::enter(&self.in_flight);
        let lock = self.device_lock(&device);
        let _ordered = lock.lock();
        self.counters.events.fetch_add(1, Ordering::Relaxed);

        let inbound: Cow<[u8]> = if mode.gated() {
            Cow::Owned(self.cross(payload))
        } else {
            Cow::Borrowed(payload)
        };
        self.touch(Op::W, Region::EventBuf);
        let event = match mode {
            Mode::Full => self.open_event(topic, &device, &inbound)?,
            _ => {
                let e = rule::parse_event(&inbound)?;
                if e.device != device {
                    return Err(Error::Schema(format!(
                        "event for `{}` published on `{topic}`",
                        e.device
                    )));
                }
                e
            }
        };
        self.touch(Op::R, Region::EventBuf);

        self.touch(Op::W, Region::EventBuf);
        self.last_values.write().insert(
            (event.device.clone(), event.attribute.clone()),
            event.value.clone(),
        );

        let Some(rules) = self.rules_for(&device)? else {
            self.counters.unknown_device.fetch_add(1, Ordering::Relaxed);
            log::debug!("no rules stored for {device}");
            return Ok(EventOutcome::default());
        };

        let mut actions = Vec::new();
        {
            let known = self.last_values.read();
            for r in rules.iter() {
                if self.rule_fires(r, &event, &known) {
                    for a in &r.actions {
                        self.touch(Op::R, Region::RuleAct);
                        actions.push(a.clone());
                    }
                }
            }
        }

        let mut outbound = Vec::with_capacity(actions.len());
        for a in &actions {
            let topic = Topic::command(&a.device);
            let json = serde_json::to_vec(a).expect("command serializes");
            let payload = match mode {
                Mode::Plain => json,
                Mode::TrustedNoEnc => self.cross(&json),
                Mode::Full => {
                    let key = self.device_keys.read().get(&a.device).cloned();
                    let Some(key) = key else {
                        self.counters.undeliverable.fetch_add(1, Ordering::Relaxed);
                        log::warn!("no session key for {}, command dropped", a.device);
                        continue;
                    };
                    self.counters.encrypts.fetch_add(1, Ordering::Relaxed);
                    let env = key.encrypt(&json, topic.as_bytes(), &self.enclave_id)?;
                    self.cross(env.to_json().as_bytes())
                }
            };
            self.touch(Op::W, Region::OutBuf);
            outbound.push(OutboundMessage { topic, payload });
        }
        Ok(EventOutcome { actions, outbound })
    }

    fn open_event(&self, topic: &str, device: &DeviceId, bytes: &[u8]) -> Result<DeviceEvent> {
        let fail = || {
            self.counters.auth_failures.fetch_add(1, Ordering::Relaxed);
            Error::Authentication
        };
        let env = Envelope::from_json(bytes).map_err(|_| fail())?;
        if env.aad != topic.as_bytes() || env.sender != device.as_str() {
            return Err(fail());
        }
        let key = self.device_keys.read().get(device).cloned().ok_or_else(fail)?;
        self.counters.decrypts.fetch_add(1, Ordering::Relaxed);
        let plain = key.decrypt(&env).map_err(|e| match e {
            Error::KeyMismatch(_) | Error::UnsupportedVersion(_) | Error::Authentication => fail(),
            other => other,
        })?;
        let event = rule::parse_event(&plain)?;
        if &event.device != device {
            return Err(fail());
        }
        Ok(event)
    }

    fn rules_for(&self, device: &DeviceId) -> Result<Option<Arc<Vec<Rule>>>> {
        self.touch(Op::R, Region::Cache);
        if let Some(hit) = self.cache.lock().get(device) {
            return Ok(Some(hit));
        }
        // Hold the store lock across the insert so a concurrent provision
        // cannot leave stale rules behind in the cache.
        let store = self.store.read();
        self.touch(Op::R, Region::Store);
        let rules = match &*store {
            RuleStore::Plain(m) => m.get(device).cloned(),
            RuleStore::Framed(m) => match m.get(device) {
                Some(bytes) => Some(Arc::new(envelope::unframe_rules(&self.cross(bytes))?)),
                None => None,
            },
            RuleStore::Sealed(s) => match s.get(device) {
                Some(rec) => {
                    self.cross(&rec.blob.ciphertext);
                    self.counters.unseals.fetch_add(1, Ordering::Relaxed);
                    Some(Arc::new(unseal_rules(self.sealer.key(), rec)?))
                }
                None => None,
            },
        };
        if let Some(r) = &rules {
            self.touch(Op::W, Region::Cache);
            self.cache.lock().insert(device.clone(), r.clone());
        }
        Ok(rules)
    }

    /// Same semantics as [`rule::evaluate_rule_in_context`], unrolled so that
    /// every condition read is visible to the tracer.
    fn rule_fires(
        &self,
        r: &Rule,
        event: &DeviceEvent,
        known: &HashMap<(DeviceId, String), Scalar>,
    ) -> bool {
        let mut triggered = false;
        for c in &r.conditions {
            self.touch(Op::R, Region::RuleCond);
            if c.refers_to(&event.device, &event.attribute) {
                triggered = true;
                break;
            }
        }
        if !triggered {
            return false;
        }
        let holds = |c: &rule::Condition| {
            self.touch(Op::R, Region::RuleCond);
            if c.refers_to(&event.device, &event.attribute) {
                c.holds_for(&event.value)
            } else {
                self.touch(Op::R, Region::EventBuf);
                known
                    .get(&(c.device.clone(), c.attribute.clone()))
                    .is_some_and(|v| c.holds_for(v))
            }
        };
        match r.combinator {
            Combinator::All => r.conditions.iter().all(holds),
            Combinator::Any => r.conditions.iter().any(holds),
        }
    }

    // ---- inspection ----

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.lock().stats()
    }

    pub fn reset_cache_stats(&self) {
        self.cache.lock().reset_stats();
    }

    /// Cached rules for a device without touching recency or statistics.
    pub fn cached_rules(&self, device: &DeviceId) -> Option<Vec<Rule>> {
        self.cache.lock().peek(device).map(|r| (*r).clone())
    }

    /// Rules currently held in the store for a device, unsealed.
    pub fn stored_rules(&self, device: &DeviceId) -> Result<Option<Vec<Rule>>> {
        let store = self.store.read();
        Ok(match &*store {
            RuleStore::Plain(m) => m.get(device).map(|r| (**r).clone()),
            RuleStore::Framed(m) => m.get(device).map(|b| envelope::unframe_rules(b)).transpose()?,
            RuleStore::Sealed(s) => s
                .get(device)
                .map(|rec| unseal_rules(self.sealer.key(), rec))
                .transpose()?,
        })
    }

    pub fn stored_devices(&self) -> Vec<DeviceId> {
        let store = self.store.read();
        let mut v: Vec<DeviceId> = match &*store {
            RuleStore::Plain(m) => m.keys().cloned().collect(),
            RuleStore::Framed(m) => m.keys().cloned().collect(),
            RuleStore::Sealed(s) => s.devices().cloned().collect(),
        };
        v.sort();
        v
    }

    /// Sealed records as they sit outside the boundary (Full mode only).
    pub fn sealed_records(&self) -> Vec<envelope::SealedRecord> {
        match &*self.store.read() {
            RuleStore::Sealed(s) => s.records().cloned().collect(),
            _ => Vec::new(),
        }
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CounterSnapshot {
            events: l(&c.events),
            decrypts: l(&c.decrypts),
            encrypts: l(&c.encrypts),
            seals: l(&c.seals),
            unseals: l(&c.unseals),
            crossings: l(&c.crossings),
            auth_failures: l(&c.auth_failures),
            unknown_device: l(&c.unknown_device),
            undeliverable: l(&c.undeliverable),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::Acquire)
    }

    pub fn flush(&self) -> Result<()> {
        if let RuleStore::Sealed(s) = &mut *self.store.write() {
            s.flush()?;
        }
        Ok(())
    }
}

/// Verifies and decodes a command envelope received on `topic` from enclave
/// `sender`.
pub fn open_command(
    key: &SymmetricKey,
    topic: &str,
    sender: &str,
    payload: &[u8],
) -> Result<ActionCommand> {
    let env = Envelope::from_json(payload).map_err(|_| Error::Authentication)?;
    if env.aad != topic.as_bytes() || env.sender != sender {
        return Err(Error::Authentication);
    }
    let plain = envelope::decrypt(key, &env).map_err(|e| match e {
        Error::KeyMismatch(_) | Error::UnsupportedVersion(_) => Error::Authentication,
        other => other,
    })?;
    serde_json::from_slice(&plain).map_err(|e| Error::Schema(format!("command: {e}")))
}

pub fn parse_command(payload: &[u8]) -> Result<ActionCommand> {
    serde_json::from_slice(payload).map_err(|e| Error::Schema(format!("command: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rule::{Condition, Operator};

    fn d(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    fn key(id: &str, b: u8) -> SymmetricKey {
        SymmetricKey::new(id, [b; 32])
    }

    const PRESENCE_RULES: &str = r#"[{"id":"arrive","if":[{"device":"presence-1","attribute":"presence","operator":"equals","value":"present"}],
        "then":[{"device":"thermostat-1","capability":"thermostatMode","command":"setThermostatMode","arguments":["cool"]},
                {"device":"switch-1","capability":"switch","command":"on"}]}]"#;

    fn keys() -> SessionKeySet {
        SessionKeySet {
            device_keys: [("presence-1", 1), ("thermostat-1", 2), ("switch-1", 3)]
                .into_iter()
                .map(|(n, b)| (d(n), key(n, b)))
                .collect(),
            k_sgx: key("k_sgx", 9),
        }
    }

    fn boundary(mode: Mode) -> TrustedBoundary {
        let cfg = BoundaryConfig {
            transition_cost: Duration::ZERO,
            ..BoundaryConfig::with_mode(mode)
        };
        let b = TrustedBoundary::new(cfg, keys(), Some(key("ruleset", 7))).unwrap();
        b.provision_ruleset(&ruleset_payload(mode, PRESENCE_RULES)).unwrap();
        b
    }

    fn ruleset_payload(mode: Mode, json: &str) -> Vec<u8> {
        match mode {
            Mode::Full => Encryptor::new(key("ruleset", 7))
                .encrypt(json.as_bytes(), RULES_TOPIC.as_bytes(), "client")
                .unwrap()
                .to_json()
                .into_bytes(),
            _ => json.as_bytes().to_vec(),
        }
    }

    fn event_json(value: &str) -> Vec<u8> {
        format!(r#"{{"device":"presence-1","capability":"presenceSensor","attribute":"presence","value":"{value}","timestamp":1}}"#)
            .into_bytes()
    }

    fn event_payload(mode: Mode, value: &str) -> Vec<u8> {
        match mode {
            Mode::Full => Encryptor::new(key("presence-1", 1))
                .encrypt(&event_json(value), b"evt/presence-1", "presence-1")
                .unwrap()
                .to_json()
                .into_bytes(),
            _ => event_json(value),
        }
    }

    #[test]
    fn presence_fires_two_commands() {
        let b = boundary(Mode::Full);
        let out = b
            .handle_event_detailed("evt/presence-1", &event_payload(Mode::Full, "present"))
            .unwrap();
        assert_eq!(out.actions.len(), 2);
        let topics: Vec<&str> = out.outbound.iter().map(|m| m.topic.as_str()).collect();
        assert_eq!(topics, ["cmd/thermostat-1", "cmd/switch-1"]);
        let cmd = open_command(&key("thermostat-1", 2), "cmd/thermostat-1", "enclave-0", &out.outbound[0].payload).unwrap();
        assert_eq!(cmd.command, "setThermostatMode");
        assert_eq!(cmd.arguments, vec![Scalar::from("cool")]);

        let none = b
            .handle_event("evt/presence-1", &event_payload(Mode::Full, "not present"))
            .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn modes_agree_on_actions() {
        for value in ["present", "not present"] {
            let fired: Vec<Vec<ActionCommand>> = Mode::ALL
                .iter()
                .map(|&m| {
                    boundary(m)
                        .handle_event_detailed("evt/presence-1", &event_payload(m, value))
                        .unwrap()
                        .actions
                })
                .collect();
            assert_eq!(fired[0], fired[1]);
            assert_eq!(fired[1], fired[2]);
        }
    }

    #[test]
    fn full_mode_refuses_plaintext_and_tampering() {
        let b = boundary(Mode::Full);
        let err = b.handle_event("evt/presence-1", &event_json("present")).unwrap_err();
        assert!(matches!(err, Error::Authentication));

        let mut env = Envelope::from_json(&event_payload(Mode::Full, "present")).unwrap();
        env.ciphertext[0] ^= 1;
        let err = b.handle_event("evt/presence-1", env.to_json().as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Authentication));

        // valid envelope presented on another device's topic
        let err = b
            .handle_event("evt/switch-1", &event_payload(Mode::Full, "present"))
            .unwrap_err();
        assert!(matches!(err, Error::Authentication));
        assert_eq!(b.counters().auth_failures, 3);
        assert_eq!(b.counters().encrypts, 0);
    }

    #[test]
    fn ruleset_needs_the_ruleset_key() {
        let b = boundary(Mode::Full);
        let forged = Encryptor::new(key("ruleset", 8))
            .encrypt(PRESENCE_RULES.as_bytes(), RULES_TOPIC.as_bytes(), "mallory")
            .unwrap();
        assert!(matches!(
            b.provision_ruleset(forged.to_json().as_bytes()),
            Err(Error::Authentication)
        ));
        assert!(matches!(
            b.provision_ruleset(PRESENCE_RULES.as_bytes()),
            Err(Error::Authentication)
        ));
    }

    #[test]
    fn sealed_records_hide_rules() {
        let b = boundary(Mode::Full);
        let recs = b.sealed_records();
        assert_eq!(recs.len(), 1);
        let raw = serde_json::to_string(&recs[0]).unwrap();
        assert!(!raw.contains("present"));
        assert!(!raw.contains("cool"));
    }

    #[test]
    fn mode_switch_keeps_rules_and_clears_cache() {
        let b = boundary(Mode::Full);
        b.handle_event("evt/presence-1", &event_payload(Mode::Full, "present")).unwrap();
        assert!(b.cached_rules(&d("presence-1")).is_some());
        for m in [Mode::TrustedNoEnc, Mode::Plain, Mode::Full] {
            b.set_mode(m).unwrap();
            assert!(b.cached_rules(&d("presence-1")).is_none());
            assert_eq!(b.stored_rules(&d("presence-1")).unwrap().unwrap().len(), 1);
            let out = b.handle_event("evt/presence-1", &event_payload(m, "present")).unwrap();
            assert_eq!(out.len(), 2);
        }
    }

    #[test]
    fn mode_change_refused_while_busy() {
        let b = boundary(Mode::Plain);
        let held = b.mode.read();
        assert!(matches!(b.set_mode(Mode::Full), Err(Error::ModeChangeWhileBusy(_))));
        drop(held);
        b.set_mode(Mode::Full).unwrap();
    }

    #[test]
    fn reprovision_invalidates_cached_rules() {
        let b = boundary(Mode::Full);
        b.handle_event("evt/presence-1", &event_payload(Mode::Full, "present")).unwrap();
        let replaced = PRESENCE_RULES.replace("\"present\"", "\"away\"");
        b.provision_ruleset(&ruleset_payload(Mode::Full, &replaced)).unwrap();
        assert!(b.cached_rules(&d("presence-1")).is_none());
        assert!(b
            .handle_event("evt/presence-1", &event_payload(Mode::Full, "present"))
            .unwrap()
            .is_empty());
        assert_eq!(
            b.handle_event("evt/presence-1", &event_payload(Mode::Full, "away"))
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn unknown_device_is_counted_not_failed() {
        let b = boundary(Mode::Plain);
        let ev = r#"{"device":"lamp-9","capability":"switch","attribute":"switch","value":"on","timestamp":1}"#;
        assert!(b.handle_event("evt/lamp-9", ev.as_bytes()).unwrap().is_empty());
        assert_eq!(b.counters().unknown_device, 1);
    }

    #[test]
    fn missing_actuator_key_drops_command() {
        let mut k = keys();
        k.device_keys.remove(&d("switch-1"));
        let cfg = BoundaryConfig {
            transition_cost: Duration::ZERO,
            ..Default::default()
        };
        let b = TrustedBoundary::new(cfg, k, Some(key("ruleset", 7))).unwrap();
        b.provision_ruleset(&ruleset_payload(Mode::Full, PRESENCE_RULES)).unwrap();
        let out = b.handle_event("evt/presence-1", &event_payload(Mode::Full, "present")).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(b.counters().undeliverable, 1);
    }

    #[test]
    fn restart_reads_the_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.store");
        let cfg = || BoundaryConfig {
            store_path: Some(path.clone()),
            transition_cost: Duration::ZERO,
            ..Default::default()
        };
        {
            let b = TrustedBoundary::new(cfg(), keys(), Some(key("ruleset", 7))).unwrap();
            b.provision_ruleset(&ruleset_payload(Mode::Full, PRESENCE_RULES)).unwrap();
        }
        let b = TrustedBoundary::new(cfg(), keys(), None).unwrap();
        let out = b.handle_event("evt/presence-1", &event_payload(Mode::Full, "present")).unwrap();
        assert_eq!(out.len(), 2);

        let mut other = keys();
        other.k_sgx = key("k_sgx", 10);
        let b = TrustedBoundary::new(cfg(), other, None).unwrap();
        assert!(b.handle_event("evt/presence-1", &event_payload(Mode::Full, "present")).is_err());
    }

    #[test]
    fn gates_charge_crossings_only_when_gated() {
        let p = boundary(Mode::Plain);
        p.handle_event("evt/presence-1", &event_payload(Mode::Plain, "present")).unwrap();
        assert_eq!(p.counters().crossings, 0);
        let f = boundary(Mode::Full);
        let before = f.counters().crossings;
        f.handle_event("evt/presence-1", &event_payload(Mode::Full, "present")).unwrap();
        // event in, sealed record in, two commands out
        assert_eq!(f.counters().crossings - before, 4);
    }

    fn rule(id: &str, devices: &[&str]) -> Rule {
        Rule {
            id: id.into(),
            name: String::new(),
            conditions: devices
                .iter()
                .map(|dev| Condition {
                    device: d(dev),
                    attribute: "level".into(),
                    operator: Operator::GreaterThan,
                    value: Scalar::from(1.0),
                })
                .collect(),
            combinator: Combinator::All,
            actions: vec![ActionCommand {
                device: d("out"),
                capability: "switch".into(),
                command: "on".into(),
                arguments: vec![],
            }],
        }
    }

    #[test]
    fn chunks_keep_linked_devices_together() {
        let rules = vec![
            rule("a", &["d1"]),
            rule("b", &["d2"]),
            rule("c", &["d1", "d3"]),
            rule("e", &["d4"]),
            rule("f", &["d3"]),
        ];
        let one = rule("x", &["d1"]).to_json().len() + 1;
        let chunks = chunk_ruleset(&rules, 4 * one).unwrap();
        assert!(chunks.len() > 1);
        let total: usize = chunks.iter().map(Vec::len).sum();
        assert_eq!(total, rules.len());
        for dev in ["d1", "d2", "d3", "d4"] {
            let holding = chunks
                .iter()
                .filter(|c| c.iter().any(|r| r.trigger_devices().contains(&&d(dev))))
                .count();
            assert_eq!(holding, 1, "{dev} split across chunks");
        }
        for c in &chunks {
            assert!(rule::ruleset_to_json(c).len() <= 4 * one + 8);
        }
    }

    #[test]
    fn oversized_unit_and_empty_set() {
        let rules = vec![rule("a", &["d1"]), rule("b", &["d1"])];
        assert!(matches!(chunk_ruleset(&rules, 50), Err(Error::PayloadTooLarge(_))));
        assert_eq!(chunk_ruleset(&[], 50).unwrap(), vec![Vec::<Rule>::new()]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("turbo".parse::<Mode>().is_err());
    }
}
