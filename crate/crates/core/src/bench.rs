//! Per-event latency benchmark across the three boundary modes.
//!
//! Latency is measured in-process around [`TrustedBoundary::handle_event`]:
//! from the event crossing into the boundary to the last command leaving it.
//! Client-side work (encrypting events, parsing commands) is done outside the
//! timed region.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attestation::SessionKeySet;
use crate::broker::Topic;
use crate::enclave::{
    chunk_ruleset, BoundaryConfig, CachePolicy, CounterSnapshot, Mode, TrustedBoundary,
    DEFAULT_CAPACITY, DEFAULT_TRANSITION_COST, MAX_RULESET_CHUNK,
};
use crate::envelope::{Encryptor, SymmetricKey};
use crate::error::{Error, Result};
use crate::rule::{
    ActionCommand, Combinator, Condition, DeviceEvent, DeviceId, Operator, Rule, Scalar,
};

pub const RULESET_SIZES: [usize; 5] = [100, 400, 1000, 5000, 10000];
pub const DEFAULT_DEVICES: usize = 32;
pub const DEFAULT_EVENTS: usize = 10_000;

/// Readings produced by [`generate_events`] lie in this closed range.
pub const VALUE_RANGE: (f64, f64) = (0.0, 100.0);
pub const BENCH_ATTRIBUTE: &str = "level";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: Mode,
    pub ruleset_size: usize,
    pub devices: usize,
    pub events: usize,
    pub cache_capacity: usize,
    pub cache_policy: CachePolicy,
    pub seed: u64,
    pub transition_cost: Duration,
    /// Process one event per device before timing starts.
    pub warmup: bool,
    /// Worker threads; 1 keeps timings stable. Events of one device always
    /// go to the same worker.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: Mode::Full,
            ruleset_size: 100,
            devices: DEFAULT_DEVICES,
            events: DEFAULT_EVENTS,
            cache_capacity: DEFAULT_CAPACITY,
            cache_policy: CachePolicy::Lru,
            seed: 1,
            transition_cost: DEFAULT_TRANSITION_COST,
            warmup: true,
            workers: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.events == 0 {
            return bad("events must be positive".into());
        }
        if self.devices == 0 {
            return bad("devices must be positive".into());
        }
        if self.ruleset_size < self.devices {
            return bad(format!(
                "ruleset size {} is smaller than the device count {}",
                self.ruleset_size, self.devices
            ));
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub mode: Mode,
    pub ruleset_size: usize,
    pub devices: usize,
    pub events: usize,
    pub latencies_us: Vec<f64>,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    pub wall: Duration,
    pub hit_rate: f64,
    pub fired: u64,
    pub counters: CounterSnapshot,
}

pub fn device_name(i: usize) -> DeviceId {
    DeviceId::new(format!("dev-{i:03}")).expect("generated id is valid")
}

fn random_operator(rng: &mut impl Rng) -> Operator {
    *Operator::ALL.choose(rng).expect("non-empty")
}

/// A condition on `device` that some value in [`VALUE_RANGE`] satisfies, or
/// (when `satisfiable` is false) that none does.
fn random_condition(rng: &mut impl Rng, device: &DeviceId, satisfiable: bool) -> Condition {
    let (lo, hi) = VALUE_RANGE;
    let operator = random_operator(rng);
    let value = if satisfiable {
        let v = rng.gen_range(lo as i64..=hi as i64) as f64;
        match operator {
            // keep strict comparisons away from the edge that nothing passes
            Operator::GreaterThan if v >= hi => hi - 1.0,
            Operator::LessThan if v <= lo => lo + 1.0,
            _ => v,
        }
    } else {
        match operator {
            Operator::GreaterThan | Operator::GreaterThanOrEquals => hi + rng.gen_range(1..50) as f64,
            Operator::LessThan | Operator::LessThanOrEquals => lo - rng.gen_range(1..50) as f64,
            Operator::Equals => hi + 0.5,
        }
    };
    Condition {
        device: device.clone(),
        attribute: BENCH_ATTRIBUTE.into(),
        operator,
        value: Scalar::Number(value),
    }
}

/// Deterministic synthetic ruleset. Rule `i < devices` watches device `i`,
/// so every device has at least one rule; the rest pick a device at random.
/// All conditions of a rule watch one device. About half of the rules can
/// fire for some reading in [`VALUE_RANGE`].
pub fn generate_ruleset(size: usize, devices: usize, seed: u64) -> Result<Vec<Rule>> {
    if devices == 0 || size < devices {
        return Err(Error::InvalidConfig(format!(
            "need size >= devices >= 1, got size {size}, devices {devices}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<DeviceId> = (0..devices).map(device_name).collect();
    let mut rules = Vec::with_capacity(size);
    for i in 0..size {
        let device = if i < devices {
            ids[i].clone()
        } else {
            ids[rng.gen_range(0..devices)].clone()
        };
        let satisfiable = rng.gen_bool(0.5);
        let n_cond = rng.gen_range(1..=2);
        let combinator = if rng.gen_bool(0.5) {
            Combinator::All
        } else {
            Combinator::Any
        };
        let conditions: Vec<Condition> = (0..n_cond)
            .map(|_| random_condition(&mut rng, &device, satisfiable))
            .collect();
        let n_act = rng.gen_range(1..=2);
        let actions = (0..n_act)
            .map(|_| ActionCommand {
                device: ids[rng.gen_range(0..devices)].clone(),
                capability: "switchLevel".into(),
                command: "setLevel".into(),
                arguments: vec![Scalar::Number(rng.gen_range(0..=100) as f64)],
            })
            .collect();
        let rule = Rule {
            id: format!("r{i:05}"),
            name: format!("synthetic rule {i}"),
            conditions,
            combinator,
            actions,
        };
        rule.validate()?;
        rules.push(rule);
    }
    Ok(rules)
}

/// Uniformly random devices with integer readings in [`VALUE_RANGE`].
pub fn generate_events(devices: usize, count: usize, seed: u64) -> Vec<DeviceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7e7);
    let (lo, hi) = VALUE_RANGE;
    (0..count)
        .map(|i| DeviceEvent {
            device: device_name(rng.gen_range(0..devices)),
            capability: "switchLevel".into(),
            attribute: BENCH_ATTRIBUTE.into(),
            value: Scalar::Number(rng.gen_range(lo as i64..=hi as i64) as f64),
            timestamp: i as i64,
        })
        .collect()
}

pub fn bench_keys(devices: usize, seed: u64) -> (BTreeMap<DeviceId, SymmetricKey>, SymmetricKey) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7973);
    let keys = (0..devices)
        .map(|i| {
            let d = device_name(i);
            let k = SymmetricKey::generate(d.as_str(), &mut rng);
            (d, k)
        })
        .collect();
    let mut rk = [0u8; 32];
    rng.fill_bytes(&mut rk);
    (keys, SymmetricKey::new(crate::attestation::RULESET_KEY_ID, rk))
}

/// An event as it would arrive on the broker in `mode`.
pub struct PreparedEvent {
    pub device: DeviceId,
    pub topic: String,
    pub payload: Vec<u8>,
}

pub fn prepare_events(
    mode: Mode,
    events: &[DeviceEvent],
    keys: &BTreeMap<DeviceId, SymmetricKey>,
) -> Result<Vec<PreparedEvent>> {
    let encryptors: HashMap<&DeviceId, Encryptor> = keys
        .iter()
        .map(|(d, k)| (d, Encryptor::new(k.clone())))
        .collect();
    events
        .iter()
        .map(|e| {
            let topic = Topic::event(&e.device);
            let json = e.to_json();
            let payload = match mode {
                Mode::Full => encryptors
                    .get(&e.device)
                    .ok_or_else(|| Error::UnknownDevice(e.device.to_string()))?
                    .encrypt(json.as_bytes(), topic.as_bytes(), e.device.as_str())?
                    .to_json()
                    .into_bytes(),
                _ => json.into_bytes(),
            };
            Ok(PreparedEvent {
                device: e.device.clone(),
                topic,
                payload,
            })
        })
        .collect()
}

/// A provisioned boundary ready to receive events in `cfg.mode`.
pub fn provisioned_boundary(
    cfg: &BenchConfig,
    rules: &[Rule],
    keys: &BTreeMap<DeviceId, SymmetricKey>,
    ruleset_key: &SymmetricKey,
) -> Result<TrustedBoundary> {
    let boundary = TrustedBoundary::new(
        BoundaryConfig {
            mode: cfg.mode,
            cache_policy: cfg.cache_policy,
            cache_capacity: cfg.cache_capacity,
            transition_cost: cfg.transition_cost,
            ..Default::default()
        },
        SessionKeySet::with_random_sealing_key(keys.clone()),
        Some(ruleset_key.clone()),
    )?;
    for chunk in chunk_ruleset(rules, MAX_RULESET_CHUNK)? {
        let payload = match cfg.mode {
            Mode::Full => TrustedBoundary::seal_ruleset_for_transport(
                &Encryptor::new(ruleset_key.clone()),
                &chunk,
                "bench",
            )?
            .to_json()
            .into_bytes(),
            _ => crate::rule::ruleset_to_json(&chunk).into_bytes(),
        };
        boundary.provision_ruleset(&payload)?;
    }
    Ok(boundary)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    // nearest rank
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(
    cfg: &BenchConfig,
    latencies_us: Vec<f64>,
    wall: Duration,
    fired: u64,
    boundary: &TrustedBoundary,
) -> BenchResult {
    let mut sorted = latencies_us.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean_us = sorted.iter().sum::<f64>() / sorted.len().max(1) as f64;
    BenchResult {
        mode: cfg.mode,
        ruleset_size: cfg.ruleset_size,
        devices: cfg.devices,
        events: latencies_us.len(),
        mean_us,
        p50_us: percentile(&sorted, 50.0),
        p95_us: percentile(&sorted, 95.0),
        p99_us: percentile(&sorted, 99.0),
        min_us: sorted.first().copied().unwrap_or(0.0),
        max_us: sorted.last().copied().unwrap_or(0.0),
        latencies_us,
        wall,
        hit_rate: boundary.cache_stats().hit_rate(),
        fired,
        counters: boundary.counters(),
    }
}

fn warm_up(boundary: &TrustedBoundary, cfg: &BenchConfig, keys: &BTreeMap<DeviceId, SymmetricKey>) -> Result<()> {
    if !cfg.warmup {
        return Ok(());
    }
    let events: Vec<DeviceEvent> = (0..cfg.devices)
        .map(|i| DeviceEvent {
            device: device_name(i),
            capability: "switchLevel".into(),
            attribute: BENCH_ATTRIBUTE.into(),
            // only the cache fill matters here
            value: Scalar::Number(VALUE_RANGE.0),
            timestamp: 0,
        })
        .collect();
    for p in prepare_events(cfg.mode, &events, keys)? {
        boundary.handle_event(&p.topic, &p.payload)?;
    }
    boundary.reset_cache_stats();
    Ok(())
}

fn time_one(boundary: &TrustedBoundary, p: &PreparedEvent) -> Result<(f64, usize)> {
    let start = Instant::now();
    let out = boundary.handle_event(&p.topic, &p.payload)?;
    let elapsed = start.elapsed();
    Ok((elapsed.as_secs_f64() * 1e6, out.len()))
}

/// Provisions a fresh boundary, then replays the event stream through it.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let rules = generate_ruleset(cfg.ruleset_size, cfg.devices, cfg.seed)?;
    let (keys, ruleset_key) = bench_keys(cfg.devices, cfg.seed);
    let boundary = Arc::new(provisioned_boundary(cfg, &rules, &keys, &ruleset_key)?);
    let events = generate_events(cfg.devices, cfg.events, cfg.seed);
    let prepared = prepare_events(cfg.mode, &events, &keys)?;
    warm_up(&boundary, cfg, &keys)?;

    let start = Instant::now();
    let (latencies, fired) = if cfg.workers == 1 {
        let mut lat = Vec::with_capacity(prepared.len());
        let mut fired = 0u64;
        for p in &prepared {
            let (us, n) = time_one(&boundary, p)?;
            lat.push(us);
            fired += n as u64;
        }
        (lat, fired)
    } else {
        let mut shards: Vec<Vec<PreparedEvent>> = (0..cfg.workers).map(|_| Vec::new()).collect();
        for p in prepared {
            let w = shard_of(&p.device, cfg.workers);
            shards[w].push(p);
        }
        let handles: Vec<_> = shards
            .into_iter()
            .map(|shard| {
                let boundary = boundary.clone();
                thread::spawn(move || -> Result<(Vec<f64>, u64)> {
                    let mut lat = Vec::with_capacity(shard.len());
                    let mut fired = 0u64;
                    for p in &shard {
                        let (us, n) = time_one(&boundary, p)?;
                        lat.push(us);
                        fired += n as u64;
                    }
                    Ok((lat, fired))
                })
            })
            .collect();
        let mut lat = Vec::with_capacity(cfg.events);
        let mut fired = 0;
        for h in handles {
            let (l, f) = h
                .join()
                .map_err(|_| Error::InvalidConfig("bench worker panicked".into()))??;
            lat.extend(l);
            fired += f;
        }
        (lat, fired)
    };
    let wall = start.elapsed();
    Ok(summarize(cfg, latencies, wall, fired, &boundary))
}

fn shard_of(device: &DeviceId, workers: usize) -> usize {
    device
        .as_str()
        .bytes()
        .fold(0usize, |h, b| h.wrapping_mul(31).wrapping_add(b as usize))
        % workers
}

/// Runs several modes over the same ruleset and event stream, alternating
/// between modes event by event so that drift in machine load affects every
/// mode alike. Single-threaded.
pub fn run_interleaved(base: &BenchConfig, modes: &[Mode]) -> Result<Vec<BenchResult>> {
    base.validate()?;
    let rules = generate_ruleset(base.ruleset_size, base.devices, base.seed)?;
    let (keys, ruleset_key) = bench_keys(base.devices, base.seed);
    let events = generate_events(base.devices, base.events, base.seed);
    let mut lanes = Vec::with_capacity(modes.len());
    for &mode in modes {
        let cfg = BenchConfig {
            mode,
            ..base.clone()
        };
        let boundary = provisioned_boundary(&cfg, &rules, &keys, &ruleset_key)?;
        let prepared = prepare_events(mode, &events, &keys)?;
        warm_up(&boundary, &cfg, &keys)?;
        lanes.push((cfg, boundary, prepared, Vec::with_capacity(base.events), 0u64, Duration::ZERO));
    }
    for i in 0..base.events {
        for (_, boundary, prepared, lat, fired, wall) in lanes.iter_mut() {
            let start = Instant::now();
            let (us, n) = time_one(boundary, &prepared[i])?;
            *wall += start.elapsed();
            lat.push(us);
            *fired += n as u64;
        }
    }
    Ok(lanes
        .into_iter()
        .map(|(cfg, boundary, _, lat, fired, wall)| summarize(&cfg, lat, wall, fired, &boundary))
        .collect())
}

pub const REPORT_CSV_HEADER: &str = "mode,ruleset,events,mean_us,p50_us,p95_us,p99_us,hit_rate";

pub fn report_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.4}",
            r.mode, r.ruleset_size, r.events, r.mean_us, r.p50_us, r.p95_us, r.p99_us, r.hit_rate
        );
    }
    out
}

/// Mean latency per ruleset size (rows) and mode (columns).
pub fn report_table(results: &[BenchResult]) -> String {
    let mut modes: Vec<Mode> = results.iter().map(|r| r.mode).collect();
    modes.sort();
    modes.dedup();
    let mut sizes: Vec<usize> = results.iter().map(|r| r.ruleset_size).collect();
    sizes.sort();
    sizes.dedup();

    let mut out = String::new();
    let _ = write!(out, "{:>8}", "rules");
    for m in &modes {
        let _ = write!(out, " {:>16}", format!("{m} (us)"));
    }
    out.push('\n');
    for s in sizes {
        let _ = write!(out, "{s:>8}");
        for m in &modes {
            match results.iter().find(|r| r.mode == *m && r.ruleset_size == s) {
                Some(r) => {
                    let _ = write!(out, " {:>16.3}", r.mean_us);
                }
                None => {
                    let _ = write!(out, " {:>16}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// CSV plus the human-readable table.
pub fn emit_report(results: &[BenchResult]) -> (String, String) {
    (report_csv(results), report_table(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::group_by_trigger_device;
    use std::collections::HashSet;

    #[test]
    fn ruleset_covers_devices() {
        let rules = generate_ruleset(100, 32, 7).unwrap();
        assert_eq!(rules.len(), 100);
        let groups = group_by_trigger_device(&rules);
        assert_eq!(groups.len(), 32);
        assert_eq!(groups.values().map(Vec::len).sum::<usize>(), 100);
    }

    #[test]
    fn one_rule_per_device_at_lower_bound() {
        let rules = generate_ruleset(32, 32, 1).unwrap();
        let groups = group_by_trigger_device(&rules);
        assert!(groups.values().all(|r| r.len() == 1));
    }

    #[test]
    fn ruleset_is_deterministic() {
        assert_eq!(
            generate_ruleset(400, 32, 5).unwrap(),
            generate_ruleset(400, 32, 5).unwrap()
        );
        assert_ne!(
            generate_ruleset(400, 32, 5).unwrap(),
            generate_ruleset(400, 32, 6).unwrap()
        );
    }

    #[test]
    fn operators_are_mixed_and_about_half_satisfiable() {
        let rules = generate_ruleset(1000, 32, 3).unwrap();
        let ops: HashSet<_> = rules
            .iter()
            .flat_map(|r| r.conditions.iter().map(|c| c.operator))
            .collect();
        assert_eq!(ops.len(), Operator::ALL.len());
        let satisfiable = rules
            .iter()
            .filter(|r| {
                (0..=100).any(|v| {
                    let v = Scalar::Number(v as f64);
                    match r.combinator {
                        Combinator::All => r.conditions.iter().all(|c| c.holds_for(&v)),
                        Combinator::Any => r.conditions.iter().any(|c| c.holds_for(&v)),
                    }
                })
            })
            .count();
        assert!((400..=600).contains(&satisfiable), "{satisfiable}");
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_ruleset(10, 32, 0).is_err());
        assert!(generate_ruleset(0, 0, 0).is_err());
        let cfg = BenchConfig {
            events: 0,
            ..Default::default()
        };
        assert!(matches!(run_bench(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn small_run_summary() {
        let cfg = BenchConfig {
            mode: Mode::Full,
            ruleset_size: 40,
            devices: 8,
            events: 200,
            ..Default::default()
        };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.latencies_us.len(), 200);
        assert!(r.min_us <= r.mean_us && r.mean_us <= r.max_us);
        assert!(r.p50_us <= r.p95_us && r.p95_us <= r.p99_us);
        assert_eq!(r.hit_rate, 1.0);
        assert_eq!(r.counters.decrypts, 200 + 8 + 1);
    }

    #[test]
    fn parallel_workers_process_every_event() {
        let cfg = BenchConfig {
            mode: Mode::TrustedNoEnc,
            ruleset_size: 40,
            devices: 8,
            events: 300,
            workers: 4,
            ..Default::default()
        };
        let serial = run_bench(&BenchConfig { workers: 1, ..cfg.clone() }).unwrap();
        let par = run_bench(&cfg).unwrap();
        assert_eq!(par.events, 300);
        assert_eq!(par.fired, serial.fired);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
    }

    #[test]
    fn report_shapes() {
        let (csv, _) = emit_report(&[]);
        assert_eq!(csv, format!("{REPORT_CSV_HEADER}\n"));
        let base = BenchConfig {
            ruleset_size: 16,
            devices: 4,
            events: 20,
            transition_cost: Duration::ZERO,
            ..Default::default()
        };
        let mut results = Vec::new();
        for size in [16, 32] {
            results.extend(
                run_interleaved(&BenchConfig { ruleset_size: size, ..base.clone() }, &Mode::ALL)
                    .unwrap(),
            );
        }
        let (csv, table) = emit_report(&results);
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.lines().nth(1).unwrap().starts_with("plain,16,20,"));
        assert_eq!(table.lines().count(), 3);
    }
}
