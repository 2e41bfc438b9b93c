use std::fmt;

use crate::error::{Error, Result};
use crate::rule::DeviceId;

pub const RULES_TOPIC: &str = "prov/rules";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Topic {
    /// `evt/<device>`
    Event(DeviceId),
    /// `cmd/<device>`
    Command(DeviceId),
    /// `prov/rules`
    Rules,
    /// `attest/<enclave_id>`
    Attest(String),
}

impl Topic {
    pub fn parse(name: &str) -> Result<Self> {
        let invalid = || Error::TopicInvalid(name.to_string());
        if name == RULES_TOPIC {
            return Ok(Topic::Rules);
        }
        let (head, tail) = name.split_once('/').ok_or_else(invalid)?;
        let id = DeviceId::new(tail).map_err(|_| invalid())?;
        match head {
            "evt" => Ok(Topic::Event(id)),
            "cmd" => Ok(Topic::Command(id)),
            "attest" => Ok(Topic::Attest(id.as_str().to_string())),
            _ => Err(invalid()),
        }
    }

    pub fn event(device: &DeviceId) -> String {
        format!("evt/{device}")
    }

    pub fn command(device: &DeviceId) -> String {
        format!("cmd/{device}")
    }

    pub fn attest(enclave_id: &str) -> String {
        format!("attest/{enclave_id}")
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topic::Event(d) => write!(f, "evt/{d}"),
            Topic::Command(d) => write!(f, "cmd/{d}"),
            Topic::Rules => f.write_str(RULES_TOPIC),
            Topic::Attest(id) => write!(f, "attest/{id}"),
        }
    }
}

/// An exact topic or one of the single-level wildcards `evt/+` and `cmd/+`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TopicPattern {
    Exact(String),
    AllEvents,
    AllCommands,
}

impl TopicPattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        match pattern {
            "evt/+" => Ok(TopicPattern::AllEvents),
            "cmd/+" => Ok(TopicPattern::AllCommands),
            _ => Topic::parse(pattern)
                .map(|t| TopicPattern::Exact(t.to_string()))
                .map_err(|_| Error::PatternInvalid(pattern.to_string())),
        }
    }

    pub fn matches(&self, topic: &str) -> bool {
        match self {
            TopicPattern::Exact(t) => t == topic,
            TopicPattern::AllEvents => {
                topic.starts_with("evt/") && matches!(Topic::parse(topic), Ok(Topic::Event(_)))
            }
            TopicPattern::AllCommands => {
                topic.starts_with("cmd/") && matches!(Topic::parse(topic), Ok(Topic::Command(_)))
            }
        }
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopicPattern::Exact(t) => f.write_str(t),
            TopicPattern::AllEvents => f.write_str("evt/+"),
            TopicPattern::AllCommands => f.write_str("cmd/+"),
        }
    }
}
