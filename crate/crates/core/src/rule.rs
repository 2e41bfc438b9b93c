//! Trigger-action rules and device events.
//!
//! Rules and events travel as JSON. A rule is a list of trigger conditions
//! (`if`) joined by a combinator and a list of action commands (`then`):
//!
//! ```json
//! {
//!   "id": "r1",
//!   "name": "cool down when someone arrives",
//!   "if": [{"device": "presence-1", "attribute": "presence",
//!           "operator": "equals", "value": "present"}],
//!   "combinator": "all",
//!   "then": [{"device": "thermostat-1", "capability": "thermostatMode",
//!             "command": "setMode", "arguments": ["cool"]}]
//! }
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub const MAX_DEVICE_ID_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct DeviceId(String);

impl DeviceId {
    /// Device ids double as topic segments, so `/`, `+` and `#` are rejected
    /// along with empty, over-long and whitespace-bearing ids.
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty() {
            return Err(Error::Schema("device id is empty".into()));
        }
        if value.len() > MAX_DEVICE_ID_LEN {
            return Err(Error::Schema(format!(
                "device id is {} bytes, limit is {MAX_DEVICE_ID_LEN}",
                value.len()
            )));
        }
        if value
            .chars()
            .any(|c| matches!(c, '/' | '+' | '#') || c.is_whitespace() || c.is_control())
        {
            return Err(Error::Schema(format!(
                "device id `{value}` contains a reserved character"
            )));
        }
        Ok(DeviceId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        DeviceId::new(raw).map_err(D::Error::custom)
    }
}

/// A reading or argument value. Equality is type-strict: `"90"` never equals `90`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl Scalar {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Scalar::Number(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Number(n) => write!(f, "{n}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Text(s.to_string())
    }
}

impl From<f64> for Scalar {
    fn from(n: f64) -> Self {
        Scalar::Number(n)
    }
}

impl From<bool> for Scalar {
    fn from(b: bool) -> Self {
        Scalar::Bool(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub device: DeviceId,
    pub capability: String,
    pub attribute: String,
    pub value: Scalar,
    /// Microseconds since the Unix epoch.
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Equals,
    GreaterThan,
    LessThan,
    GreaterThanOrEquals,
    LessThanOrEquals,
}

impl Operator {
    pub const ALL: [Operator; 5] = [
        Operator::Equals,
        Operator::GreaterThan,
        Operator::LessThan,
        Operator::GreaterThanOrEquals,
        Operator::LessThanOrEquals,
    ];

    pub fn is_numeric(self) -> bool {
        !matches!(self, Operator::Equals)
    }

    /// Applies the operator as `observed <op> expected`.
    pub fn apply(self, observed: &Scalar, expected: &Scalar) -> bool {
        match self {
            Operator::Equals => observed == expected,
            _ => match (observed.as_number(), expected.as_number()) {
                (Some(a), Some(b)) => match self {
                    Operator::GreaterThan => a > b,
                    Operator::LessThan => a < b,
                    Operator::GreaterThanOrEquals => a >= b,
                    Operator::LessThanOrEquals => a <= b,
                    Operator::Equals => unreachable!(),
                },
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub device: DeviceId,
    pub attribute: String,
    pub operator: Operator,
    pub value: Scalar,
}

impl Condition {
    pub fn refers_to(&self, device: &DeviceId, attribute: &str) -> bool {
        &self.device == device && self.attribute == attribute
    }

    pub fn holds_for(&self, observed: &Scalar) -> bool {
        self.operator.apply(observed, &self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub device: DeviceId,
    pub capability: String,
    pub command: String,
    #[serde(default)]
    pub arguments: Vec<Scalar>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combinator {
    #[default]
    All,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(rename = "if")]
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub combinator: Combinator,
    #[serde(rename = "then")]
    pub actions: Vec<ActionCommand>,
}

impl Rule {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Schema("rule id is empty".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Schema(format!("rule `{}` has no conditions", self.id)));
        }
        if self.actions.is_empty() {
            return Err(Error::Schema(format!("rule `{}` has no actions", self.id)));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if c.attribute.is_empty() {
                return Err(Error::Schema(format!(
                    "rule `{}`: if[{i}].attribute is empty",
                    self.id
                )));
            }
            if c.operator.is_numeric() && c.value.as_number().is_none() {
                return Err(Error::Schema(format!(
                    "rule `{}`: if[{i}] uses a numeric operator with non-numeric value `{}`",
                    self.id, c.value
                )));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.command.is_empty() {
                return Err(Error::Schema(format!(
                    "rule `{}`: then[{i}].command is empty",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Devices named in the trigger conditions, in first-seen order.
    pub fn trigger_devices(&self) -> Vec<&DeviceId> {
        let mut seen = HashSet::new();
        self.conditions
            .iter()
            .map(|c| &c.device)
            .filter(|d| seen.insert(*d))
            .collect()
    }

    pub fn references(&self, device: &DeviceId) -> bool {
        self.conditions.iter().any(|c| &c.device == device)
            || self.actions.iter().any(|a| &a.device == device)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("rule serialization is infallible")
    }
}

fn utf8(text: &[u8]) -> Result<&str> {
    std::str::from_utf8(text).map_err(|e| Error::Syntax(format!("input is not UTF-8: {e}")))
}

/// Typed parse with serde's line/column diagnostics. A failure on input that
/// is not even well-formed JSON is reported as a syntax error, even when a
/// prefix already had the wrong shape (`[1,` for an object).
fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => match serde_json::from_str::<serde::de::IgnoredAny>(text) {
                Ok(_) => Error::Schema(e.to_string()),
                Err(syntax) => Error::Syntax(syntax.to_string()),
            },
            _ => Error::Syntax(e.to_string()),
        }
    })
}

pub fn parse_rule(text: &[u8]) -> Result<Rule> {
    let rule: Rule = from_json(utf8(text)?)?;
    rule.validate()?;
    Ok(rule)
}

/// Parses either a bare JSON array of rules or `{"rules": [...]}`. Rule ids
/// must be unique across the set.
pub fn parse_ruleset(text: &[u8]) -> Result<Vec<Rule>> {
    #[derive(Deserialize)]
    struct Wrapped {
        rules: Vec<Rule>,
    }
    let text = utf8(text)?;
    let rules: Vec<Rule> = match text.trim_start().as_bytes().first() {
        Some(b'{') => from_json::<Wrapped>(text)?.rules,
        _ => from_json(text)?,
    };
    let mut ids = HashSet::new();
    for (i, rule) in rules.iter().enumerate() {
        rule.validate().map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("rules[{i}]: {m}")),
            other => other,
        })?;
        if !ids.insert(rule.id.as_str()) {
            return Err(Error::Schema(format!(
                "rules[{i}]: duplicate rule id `{}`",
                rule.id
            )));
        }
    }
    Ok(rules)
}

pub fn ruleset_to_json(rules: &[Rule]) -> String {
    serde_json::to_string(rules).expect("rule serialization is infallible")
}

pub fn parse_event(text: &[u8]) -> Result<DeviceEvent> {
    #[derive(Deserialize)]
    struct Wire {
        device: DeviceId,
        capability: String,
        attribute: String,
        value: Scalar,
        timestamp: i64,
    }
    let w: Wire = from_json(utf8(text)?)?;
    if w.attribute.is_empty() {
        return Err(Error::Schema("event attribute is empty".into()));
    }
    if w.timestamp < 0 {
        return Err(Error::Schema(format!(
            "event timestamp {} is negative",
            w.timestamp
        )));
    }
    Ok(DeviceEvent {
        device: w.device,
        capability: w.capability,
        attribute: w.attribute,
        value: w.value,
        timestamp: w.timestamp,
    })
}

impl DeviceEvent {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event serialization is infallible")
    }
}

pub fn match_condition(condition: &Condition, event: &DeviceEvent) -> bool {
    condition.refers_to(&event.device, &event.attribute) && condition.holds_for(&event.value)
}

/// Evaluates a rule against a single event in isolation. Conditions on other
/// devices or attributes evaluate to false.
pub fn evaluate_rule(rule: &Rule, event: &DeviceEvent) -> Vec<ActionCommand> {
    let mut results = rule.conditions.iter().map(|c| match_condition(c, event));
    let fired = match rule.combinator {
        Combinator::All => results.all(|b| b),
        Combinator::Any => results.any(|b| b),
    };
    if fired {
        rule.actions.clone()
    } else {
        Vec::new()
    }
}

/// Evaluates a rule when `event` arrives, with `known` supplying the latest
/// value of every other (device, attribute) pair. The rule is only considered
/// when one of its conditions watches the event's own attribute.
pub fn evaluate_rule_in_context<F>(rule: &Rule, event: &DeviceEvent, known: F) -> Vec<ActionCommand>
where
    F: Fn(&DeviceId, &str) -> Option<Scalar>,
{
    if !rule
        .conditions
        .iter()
        .any(|c| c.refers_to(&event.device, &event.attribute))
    {
        return Vec::new();
    }
    let holds = |c: &Condition| {
        if c.refers_to(&event.device, &event.attribute) {
            c.holds_for(&event.value)
        } else {
            known(&c.device, &c.attribute).is_some_and(|v| c.holds_for(&v))
        }
    };
    let fired = match rule.combinator {
        Combinator::All => rule.conditions.iter().all(holds),
        Combinator::Any => rule.conditions.iter().any(holds),
    };
    if fired {
        rule.actions.clone()
    } else {
        Vec::new()
    }
}
