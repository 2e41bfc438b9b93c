//! Simulated devices: sensor profiles with seeded value generators and
//! actuators whose state only changes through commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::BrokerClient;
use crate::error::{Error, Result};
use crate::hub::Hub;
use crate::rule::{ActionCommand, DeviceEvent, DeviceId, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Presence,
    Temperature,
    Humidity,
    Co2,
    AirQuality,
    Switch,
    Bulb,
    Thermostat,
}

impl DeviceKind {
    pub fn is_sensor(self) -> bool {
        !self.is_actuator()
    }

    pub fn is_actuator(self) -> bool {
        matches!(self, DeviceKind::Switch | DeviceKind::Bulb | DeviceKind::Thermostat)
    }

    pub fn capability(self) -> &'static str {
        match self {
            DeviceKind::Presence => "presenceSensor",
            DeviceKind::Temperature => "temperatureMeasurement",
            DeviceKind::Humidity => "relativeHumidityMeasurement",
            DeviceKind::Co2 => "carbonDioxideMeasurement",
            DeviceKind::AirQuality => "airQualitySensor",
            DeviceKind::Switch => "switch",
            DeviceKind::Bulb => "switch",
            DeviceKind::Thermostat => "thermostatMode",
        }
    }

    /// Attributes a sensor reports, in emission order. An air-quality
    /// sensor rotates through its three channels.
    pub fn attributes(self) -> &'static [&'static str] {
        match self {
            DeviceKind::Presence => &["presence"],
            DeviceKind::Temperature => &["temperature"],
            DeviceKind::Humidity => &["humidity"],
            DeviceKind::Co2 => &["carbonDioxide"],
            DeviceKind::AirQuality => &["temperature", "humidity", "carbonDioxide"],
            DeviceKind::Switch | DeviceKind::Bulb => &["switch"],
            DeviceKind::Thermostat => &["thermostatMode"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Constant { value: Scalar },
    Uniform {
        min: f64,
        max: f64,
        #[serde(default)]
        integer: bool,
    },
    /// One value per line; JSON scalars are parsed, anything else is text.
    Trace { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    #[serde(rename = "id")]
    pub device: DeviceId,
    pub kind: DeviceKind,
    #[serde(default, rename = "period_ms", with = "millis")]
    pub emit_period: Duration,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl DeviceProfile {
    pub fn sensor(device: DeviceId, kind: DeviceKind, generator: GeneratorSpec) -> Self {
        DeviceProfile {
            device,
            kind,
            emit_period: Duration::ZERO,
            generator: Some(generator),
        }
    }

    pub fn actuator(device: DeviceId, kind: DeviceKind) -> Self {
        DeviceProfile {
            device,
            kind,
            emit_period: Duration::ZERO,
            generator: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.is_sensor(), &self.generator) {
            (true, None) => Err(Error::InvalidConfig(format!(
                "sensor `{}` has no value generator",
                self.device
            ))),
            (false, Some(_)) => Err(Error::InvalidConfig(format!(
                "actuator `{}` cannot have a value generator",
                self.device
            ))),
            (_, Some(GeneratorSpec::Uniform { min, max, .. })) if !(min <= max) => {
                Err(Error::InvalidConfig(format!(
                    "`{}`: uniform range {min}..{max} is empty",
                    self.device
                )))
            }
            _ => Ok(()),
        }
    }
}

fn parse_trace_value(line: &str) -> Scalar {
    serde_json::from_str::<Scalar>(line).unwrap_or_else(|_| Scalar::Text(line.to_string()))
}

/// Stateful value source built from a [`GeneratorSpec`].
#[derive(Debug)]
pub enum ValueSource {
    Constant(Scalar),
    Uniform {
        rng: ChaCha8Rng,
        min: f64,
        max: f64,
        integer: bool,
    },
    Replay { values: Vec<Scalar>, next: usize },
}

impl ValueSource {
    /// The stream for a device depends only on `seed` and the device id.
    pub fn new(spec: &GeneratorSpec, device: &DeviceId, seed: u64) -> Result<Self> {
        Ok(match spec {
            GeneratorSpec::Constant { value } => ValueSource::Constant(value.clone()),
            GeneratorSpec::Uniform { min, max, integer } => ValueSource::Uniform {
                rng: ChaCha8Rng::seed_from_u64(seed ^ fnv1a(device.as_str().as_bytes())),
                min: *min,
                max: *max,
                integer: *integer,
            },
            GeneratorSpec::Trace { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::InvalidConfig(format!("trace file {}: {e}", path.display()))
                })?;
                let values: Vec<Scalar> = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(parse_trace_value)
                    .collect();
                if values.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "trace file {} has no values",
                        path.display()
                    )));
                }
                ValueSource::Replay { values, next: 0 }
            }
        })
    }

    pub fn replay(values: Vec<Scalar>) -> Self {
        ValueSource::Replay { values, next: 0 }
    }

    /// Replays wrap around once the recorded values run out.
    pub fn next_value(&mut self) -> Scalar {
        match self {
            ValueSource::Constant(v) => v.clone(),
            ValueSource::Uniform {
                rng,
                min,
                max,
                integer,
            } => {
                let x = if min == max { *min } else { rng.gen_range(*min..=*max) };
                Scalar::Number(if *integer { x.round() } else { x })
            }
            ValueSource::Replay { values, next } => {
                let v = values[*next % values.len()].clone();
                *next += 1;
                v
            }
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Emits readings for one sensor, rotating through its attributes.
#[derive(Debug)]
pub struct SensorSim {
    pub profile: DeviceProfile,
    source: ValueSource,
    emitted: usize,
}

impl SensorSim {
    pub fn new(profile: DeviceProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let spec = profile.generator.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("`{}` is not a sensor", profile.device))
        })?;
        let source = ValueSource::new(spec, &profile.device, seed)?;
        Ok(SensorSim {
            profile,
            source,
            emitted: 0,
        })
    }

    pub fn next_event(&mut self, timestamp: i64) -> DeviceEvent {
        let attrs = self.profile.kind.attributes();
        let attribute = attrs[self.emitted % attrs.len()];
        self.emitted += 1;
        DeviceEvent {
            device: self.profile.device.clone(),
            capability: self.profile.kind.capability().to_string(),
            attribute: attribute.to_string(),
            value: self.source.next_value(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    pub device: DeviceId,
    pub attributes: BTreeMap<String, Scalar>,
    pub last_command_at: Option<i64>,
}

impl ActuatorState {
    pub fn new(device: DeviceId, kind: DeviceKind) -> Self {
        let mut attributes = BTreeMap::new();
        match kind {
            DeviceKind::Switch | DeviceKind::Bulb => {
                attributes.insert("switch".to_string(), Scalar::from("off"));
            }
            DeviceKind::Thermostat => {
                attributes.insert("thermostatMode".to_string(), Scalar::from("off"));
            }
            _ => {}
        }
        ActuatorState {
            device,
            attributes,
            last_command_at: None,
        }
    }

    pub fn get(&self, attribute: &str) -> Option<&Scalar> {
        self.attributes.get(attribute)
    }
}

fn one_arg<'a>(cmd: &'a ActionCommand) -> Result<&'a Scalar> {
    match cmd.arguments.as_slice() {
        [v] => Ok(v),
        args => Err(Error::Schema(format!(
            "`{}` takes one argument, got {}",
            cmd.command,
            args.len()
        ))),
    }
}

/// Returns the state after `cmd`. The input state is left untouched.
pub fn apply_command(state: &ActuatorState, cmd: &ActionCommand, now_us: i64) -> Result<ActuatorState> {
    if cmd.device != state.device {
        return Err(Error::WrongDevice {
            command_device: cmd.device.to_string(),
            actuator: state.device.to_string(),
        });
    }
    let (attribute, value) = match cmd.command.as_str() {
        "on" => ("switch", Scalar::from("on")),
        "off" => ("switch", Scalar::from("off")),
        "setMode" | "setThermostatMode" => ("thermostatMode", one_arg(cmd)?.clone()),
        "setHeatingSetpoint" => ("heatingSetpoint", one_arg(cmd)?.clone()),
        "setCoolingSetpoint" => ("coolingSetpoint", one_arg(cmd)?.clone()),
        "setLevel" => ("level", one_arg(cmd)?.clone()),
        "setColor" => ("color", one_arg(cmd)?.clone()),
        "notify" => ("notification", one_arg(cmd)?.clone()),
        other => return Err(Error::UnknownCommand(other.to_string())),
    };
    let mut next = state.clone();
    next.attributes.insert(attribute.to_string(), value);
    next.last_command_at = Some(now_us);
    Ok(next)
}

pub fn now_us() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as i64)
        .unwrap_or(0)
}

/// Per-device event counts for round-robin emission of `total` events.
pub fn emission_counts(devices: usize, total: usize) -> Vec<usize> {
    if devices == 0 {
        return Vec::new();
    }
    let (base, extra) = (total / devices, total % devices);
    (0..devices).map(|i| base + usize::from(i < extra)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionRecord {
    pub device: DeviceId,
    pub attribute: String,
    pub value: Scalar,
    pub sent_us: i64,
}

pub const EMISSION_CSV_HEADER: &str = "device,attribute,value,sent_us";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emission_csv(log: &[EmissionRecord]) -> String {
    let mut out = String::from(EMISSION_CSV_HEADER);
    out.push('\n');
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(r.device.as_str()),
            csv_field(&r.attribute),
            csv_field(&r.value.to_string()),
            r.sent_us
        );
    }
    out
}

/// The events a fleet would emit, in global round-robin order, without any
/// transport. Sensors only; actuators emit nothing.
pub fn plan_events(profiles: &[DeviceProfile], event_count: usize, seed: u64) -> Result<Vec<DeviceEvent>> {
    let mut sims = profiles
        .iter()
        .filter(|p| p.kind.is_sensor())
        .map(|p| SensorSim::new(p.clone(), seed))
        .collect::<Result<Vec<_>>>()?;
    if sims.is_empty() {
        return if event_count == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::InvalidConfig("fleet has no sensors".into()))
        };
    }
    let n = sims.len();
    Ok((0..event_count)
        .map(|i| sims[i % n].next_event(i as i64))
        .collect())
}

const PUBLISH_ATTEMPTS: u32 = 8;

/// Retries on backpressure. Delivery is at-least-once, so a subscriber that
/// already took the message may see it twice.
fn publish_with_backoff(client: &BrokerClient, topic: &str, payload: &[u8]) -> Result<u64> {
    let mut pause = Duration::from_millis(10);
    for _ in 1..PUBLISH_ATTEMPTS {
        match client.publish(topic, payload) {
            Err(Error::Backpressure) => {
                thread::sleep(pause);
                pause *= 2;
            }
            other => return other,
        }
    }
    client.publish(topic, payload)
}

/// Runs every sensor as its own actor with its own broker connection. Each
/// reading goes through `hub` (which encrypts it in `Full` mode) and is
/// published on `evt/<device>`. Returns the merged log ordered by send time.
pub fn run_fleet(
    profiles: &[DeviceProfile],
    event_count: usize,
    broker_addr: &str,
    hub: Arc<Hub>,
    seed: u64,
) -> Result<Vec<EmissionRecord>> {
    let sensors: Vec<&DeviceProfile> = profiles.iter().filter(|p| p.kind.is_sensor()).collect();
    if sensors.is_empty() {
        if event_count == 0 {
            return Ok(Vec::new());
        }
        return Err(Error::InvalidConfig("fleet has no sensors".into()));
    }
    let counts = emission_counts(sensors.len(), event_count);
    let mut actors = Vec::new();
    for (profile, count) in sensors.into_iter().zip(counts) {
        let sim = SensorSim::new(profile.clone(), seed)?;
        let client = BrokerClient::connect(broker_addr)?;
        actors.push((sim, client, count));
    }
    let handles: Vec<_> = actors
        .into_iter()
        .map(|(mut sim, client, count)| {
            let hub = hub.clone();
            thread::spawn(move || -> Result<Vec<EmissionRecord>> {
                let mut log = Vec::with_capacity(count);
                for i in 0..count {
                    if i > 0 && !sim.profile.emit_period.is_zero() {
                        thread::sleep(sim.profile.emit_period);
                    }
                    let sent_us = now_us();
                    let event = sim.next_event(sent_us);
                    let msg = hub.wrap_reading(&event)?;
                    publish_with_backoff(&client, &msg.topic, &msg.payload)?;
                    log.push(EmissionRecord {
                        device: event.device,
                        attribute: event.attribute,
                        value: event.value,
                        sent_us,
                    });
                }
                Ok(log)
            })
        })
        .collect();
    let mut log = Vec::with_capacity(event_count);
    for h in handles {
        log.extend(
            h.join()
                .map_err(|_| Error::Publish("device actor panicked".into()))??,
        );
    }
    log.sort_by_key(|r| r.sent_us);
    Ok(log)
}
