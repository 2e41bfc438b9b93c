//! Python bindings: envelopes, rule parsing, the engine boundary, the broker
//! and its client, trace divergence and the latency bench.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use cloakrule::attestation::SessionKeySet;
use cloakrule::bench::{self, BenchConfig};
use cloakrule::broker::{self, BrokerConfig};
use cloakrule::enclave::{BoundaryConfig, CachePolicy, Mode, TrustedBoundary};
use cloakrule::envelope::{self, Envelope, SymmetricKey};
use cloakrule::rule::{self, DeviceId};
use cloakrule::trace::{self, AccessTrace};
use cloakrule::Error;

create_exception!(cloakrule, CloakruleError, PyException);
create_exception!(cloakrule, AuthenticationError, CloakruleError);
create_exception!(cloakrule, RuleSyntaxError, CloakruleError);
create_exception!(cloakrule, SchemaError, CloakruleError);
create_exception!(cloakrule, AttestationError, CloakruleError);
create_exception!(cloakrule, BrokerError, CloakruleError);

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Authentication | Error::KeyMismatch(_) | Error::UnsupportedVersion(_) => {
            AuthenticationError::new_err(msg)
        }
        Error::Syntax(_) => RuleSyntaxError::new_err(msg),
        Error::Schema(_) | Error::Binding { .. } => SchemaError::new_err(msg),
        Error::AttestationRejected(_) => AttestationError::new_err(msg),
        Error::NotConnected
        | Error::TopicInvalid(_)
        | Error::PatternInvalid(_)
        | Error::Backpressure
        | Error::BrokerUnreachable { .. }
        | Error::Frame(_)
        | Error::Publish(_)
        | Error::Timeout(_)
        | Error::Bind { .. } => BrokerError::new_err(msg),
        _ => CloakruleError::new_err(msg),
    }
}

fn key(key_id: &str, bytes: &[u8]) -> PyResult<SymmetricKey> {
    SymmetricKey::from_slice(key_id, bytes).map_err(err)
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

/// Encrypts with an explicit 12-byte nonce and returns the envelope JSON.
#[pyfunction]
#[pyo3(signature = (key_bytes, key_id, nonce, plaintext, aad, sender))]
fn encrypt(
    key_bytes: &[u8],
    key_id: &str,
    nonce: &[u8],
    plaintext: &[u8],
    aad: &[u8],
    sender: &str,
) -> PyResult<String> {
    let nonce: [u8; envelope::NONCE_LEN] = nonce
        .try_into()
        .map_err(|_| PyValueError::new_err("nonce must be 12 bytes"))?;
    let env = envelope::encrypt_with_nonce(&key(key_id, key_bytes)?, nonce, plaintext, aad, sender)
        .map_err(err)?;
    Ok(env.to_json())
}

/// Verifies and decrypts envelope JSON; raises AuthenticationError on any
/// tampering.
#[pyfunction]
fn decrypt<'py>(
    py: Python<'py>,
    key_bytes: &[u8],
    key_id: &str,
    envelope_json: &[u8],
) -> PyResult<Bound<'py, PyBytes>> {
    let env = Envelope::from_json(envelope_json).map_err(|_| err(Error::Authentication))?;
    let plain = envelope::decrypt(&key(key_id, key_bytes)?, &env).map_err(err)?;
    Ok(PyBytes::new(py, &plain))
}

/// Parses and validates a ruleset; returns it re-serialized as JSON.
#[pyfunction]
fn parse_ruleset(text: &[u8]) -> PyResult<String> {
    let rules = rule::parse_ruleset(text).map_err(err)?;
    Ok(rule::ruleset_to_json(&rules))
}

#[pyfunction]
fn parse_event(text: &[u8]) -> PyResult<String> {
    Ok(rule::parse_event(text).map_err(err)?.to_json())
}

/// The rule engine behind its trusted boundary.
#[pyclass(module = "cloakrule")]
struct Engine {
    inner: TrustedBoundary,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (mode, device_keys, ruleset_key=None, enclave_id="enclave-0", cache_capacity=100, cache_policy="lru", transition_us=2))]
    fn new(
        mode: &str,
        device_keys: HashMap<String, Vec<u8>>,
        ruleset_key: Option<Vec<u8>>,
        enclave_id: &str,
        cache_capacity: usize,
        cache_policy: &str,
        transition_us: u64,
    ) -> PyResult<Self> {
        let mut keys = BTreeMap::new();
        for (d, k) in device_keys {
            let id = DeviceId::new(&d).map_err(err)?;
            keys.insert(id, key(&d, &k)?);
        }
        let ruleset_key = ruleset_key
            .map(|k| key(cloakrule::attestation::RULESET_KEY_ID, &k))
            .transpose()?;
        let cfg = BoundaryConfig {
            enclave_id: enclave_id.to_string(),
            mode: parse_mode(mode)?,
            cache_policy: cache_policy
                .parse::<CachePolicy>()
                .map_err(|e| PyValueError::new_err(e.to_string()))?,
            cache_capacity,
            store_path: None,
            transition_cost: Duration::from_micros(transition_us),
        };
        let inner = TrustedBoundary::new(cfg, SessionKeySet::with_random_sealing_key(keys), ruleset_key)
            .map_err(err)?;
        Ok(Engine { inner })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode().name()
    }

    fn set_mode(&self, mode: &str) -> PyResult<()> {
        self.inner.set_mode(parse_mode(mode)?).map_err(err)
    }

    /// Loads a ruleset message (an envelope in full mode). Returns
    /// (devices, rules).
    fn provision(&self, payload: &[u8]) -> PyResult<(usize, usize)> {
        let r = self.inner.provision_ruleset(payload).map_err(err)?;
        Ok((r.devices, r.rules))
    }

    /// Handles one `evt/<device>` message; returns the outbound
    /// (topic, payload) pairs.
    fn handle_event<'py>(
        &self,
        py: Python<'py>,
        topic: &str,
        payload: &[u8],
    ) -> PyResult<Vec<(String, Bound<'py, PyBytes>)>> {
        let out = self.inner.handle_event(topic, payload).map_err(err)?;
        Ok(out
            .into_iter()
            .map(|m| (m.topic, PyBytes::new(py, &m.payload)))
            .collect())
    }

    fn counters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.counters();
        let d = PyDict::new(py);
        d.set_item("events", c.events)?;
        d.set_item("decrypts", c.decrypts)?;
        d.set_item("encrypts", c.encrypts)?;
        d.set_item("crossings", c.crossings)?;
        d.set_item("auth_failures", c.auth_failures)?;
        d.set_item("unknown_device", c.unknown_device)?;
        d.set_item("undeliverable", c.undeliverable)?;
        Ok(d)
    }

    fn hit_rate(&self) -> f64 {
        self.inner.cache_stats().hit_rate()
    }

    fn stored_devices(&self) -> Vec<String> {
        self.inner
            .stored_devices()
            .into_iter()
            .map(|d| d.as_str().to_string())
            .collect()
    }
}

/// In-process broker. `address` is the bound host:port.
#[pyclass(module = "cloakrule")]
struct Broker {
    handle: Option<broker::BrokerHandle>,
    address: String,
}

#[pymethods]
impl Broker {
    #[new]
    #[pyo3(signature = (addr="127.0.0.1:0", capture=false))]
    fn new(addr: &str, capture: bool) -> PyResult<Self> {
        let handle = broker::bind(
            addr,
            BrokerConfig {
                capture,
                ..Default::default()
            },
        )
        .map_err(err)?;
        let address = handle.local_addr().to_string();
        Ok(Broker {
            handle: Some(handle),
            address,
        })
    }

    #[getter]
    fn address(&self) -> &str {
        &self.address
    }

    fn captured<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyBytes>> {
        self.handle
            .as_ref()
            .map(|h| h.captured())
            .unwrap_or_default()
            .iter()
            .map(|f| PyBytes::new(py, f))
            .collect()
    }

    fn shutdown(&mut self, py: Python<'_>) {
        if let Some(mut h) = self.handle.take() {
            py.detach(move || h.shutdown());
        }
    }
}

#[pyclass(module = "cloakrule")]
struct Client {
    inner: broker::BrokerClient,
}

#[pymethods]
impl Client {
    #[new]
    fn new(py: Python<'_>, addr: &str) -> PyResult<Self> {
        let inner = py.detach(|| broker::BrokerClient::connect(addr)).map_err(err)?;
        Ok(Client { inner })
    }

    fn publish(&self, py: Python<'_>, topic: &str, payload: &[u8]) -> PyResult<u64> {
        py.detach(|| self.inner.publish(topic, payload)).map_err(err)
    }

    fn subscribe(&self, py: Python<'_>, pattern: &str) -> PyResult<()> {
        py.detach(|| self.inner.subscribe(pattern)).map_err(err)
    }

    /// Next delivery as (topic, payload), or None after `timeout` seconds.
    #[pyo3(signature = (timeout=1.0))]
    fn recv<'py>(
        &self,
        py: Python<'py>,
        timeout: f64,
    ) -> PyResult<Option<(String, Bound<'py, PyBytes>)>> {
        let t = Duration::from_secs_f64(timeout.max(0.0));
        let msg = py.detach(|| self.inner.recv_timeout(t)).map_err(err)?;
        Ok(msg.map(|m| (m.topic, PyBytes::new(py, &m.payload))))
    }

    fn close(&self) {
        self.inner.close();
    }
}

/// Forward KL divergence between the bigram distributions of two trace
/// dumps (one `R|W,region` per line).
#[pyfunction]
fn trace_divergence(p_dump: &str, q_dump: &str) -> PyResult<f64> {
    let dist = |text: &str| {
        AccessTrace::parse_dump(text).and_then(|t| trace::build_distribution(&t))
    };
    let p = dist(p_dump).map_err(err)?;
    let q = dist(q_dump).map_err(err)?;
    Ok(trace::kl_divergence(&p, &q).map_err(err)?.value())
}

/// Pairwise scores of the three-set fixture for one seed, row-major.
#[pyfunction]
#[pyo3(signature = (seed, mode="full", threshold=0.05))]
fn table2_scores(seed: u64, mode: &str, threshold: f64) -> PyResult<Vec<Vec<f64>>> {
    let m = trace::fixture::table2_scores(seed, parse_mode(mode)?, threshold).map_err(err)?;
    Ok(m.scores)
}

/// Runs the latency bench for one mode and returns summary statistics.
#[pyfunction]
#[pyo3(signature = (mode, ruleset_size=100, devices=32, events=10000, seed=1, transition_us=2))]
fn run_bench<'py>(
    py: Python<'py>,
    mode: &str,
    ruleset_size: usize,
    devices: usize,
    events: usize,
    seed: u64,
    transition_us: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = BenchConfig {
        mode: parse_mode(mode)?,
        ruleset_size,
        devices,
        events,
        seed,
        transition_cost: Duration::from_micros(transition_us),
        ..Default::default()
    };
    let r = py.detach(|| bench::run_bench(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mode", r.mode.name())?;
    d.set_item("ruleset", r.ruleset_size)?;
    d.set_item("events", r.events)?;
    d.set_item("mean_us", r.mean_us)?;
    d.set_item("p50_us", r.p50_us)?;
    d.set_item("p95_us", r.p95_us)?;
    d.set_item("p99_us", r.p99_us)?;
    d.set_item("hit_rate", r.hit_rate)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "cloakrule")]
fn cloakrule_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("CloakruleError", py.get_type::<CloakruleError>())?;
    m.add("AuthenticationError", py.get_type::<AuthenticationError>())?;
    m.add("RuleSyntaxError", py.get_type::<RuleSyntaxError>())?;
    m.add("SchemaError", py.get_type::<SchemaError>())?;
    m.add("AttestationError", py.get_type::<AttestationError>())?;
    m.add("BrokerError", py.get_type::<BrokerError>())?;
    m.add_function(wrap_pyfunction!(encrypt, m)?)?;
    m.add_function(wrap_pyfunction!(decrypt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_ruleset, m)?)?;
    m.add_function(wrap_pyfunction!(parse_event, m)?)?;
    m.add_function(wrap_pyfunction!(trace_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(table2_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_class::<Engine>()?;
    m.add_class::<Broker>()?;
    m.add_class::<Client>()?;
    Ok(())
}
