use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rule::{DeviceId, Rule};

pub const DEFAULT_CAPACITY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CachePolicy {
    #[default]
    Lru,
    Lfu,
}

impl FromStr for CachePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(CachePolicy::Lru),
            "lfu" => Ok(CachePolicy::Lfu),
            other => Err(Error::InvalidConfig(format!("unknown cache policy `{other}`"))),
        }
    }
}

#[derive(Debug)]
struct Entry {
    rules: Arc<Vec<Rule>>,
    last_used: u64,
    uses: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Device-keyed rule cache. Eviction scans for the victim, which is fine at
/// the capacities the engine runs with.
#[derive(Debug)]
pub struct RuleCache {
    capacity: usize,
    policy: CachePolicy,
    entries: HashMap<DeviceId, Entry>,
    clock: u64,
    stats: CacheStats,
}

impl RuleCache {
    pub fn new(capacity: usize, policy: CachePolicy) -> Self {
        RuleCache {
            capacity,
            policy,
            entries: HashMap::with_capacity(capacity),
            clock: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn lru(capacity: usize) -> Self {
        Self::new(capacity, CachePolicy::Lru)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, device: &DeviceId) -> bool {
        self.entries.contains_key(device)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// A hit refreshes recency (LRU) or bumps the use count (LFU).
    pub fn get(&mut self, device: &DeviceId) -> Option<Arc<Vec<Rule>>> {
        let now = self.tick();
        match self.entries.get_mut(device) {
            Some(e) => {
                e.last_used = now;
                e.uses += 1;
                self.stats.hits += 1;
                Some(e.rules.clone())
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    pub fn peek(&self, device: &DeviceId) -> Option<Arc<Vec<Rule>>> {
        self.entries.get(device).map(|e| e.rules.clone())
    }

    /// Inserts or replaces, returning the evicted device if any.
    pub fn insert(&mut self, device: DeviceId, rules: Arc<Vec<Rule>>) -> Option<DeviceId> {
        if self.capacity == 0 {
            return None;
        }
        let now = self.tick();
        if let Some(e) = self.entries.get_mut(&device) {
            e.rules = rules;
            e.last_used = now;
            e.uses += 1;
            return None;
        }
        let evicted = if self.entries.len() >= self.capacity {
            let victim = self.victim();
            if let Some(v) = &victim {
                self.entries.remove(v);
                self.stats.evictions += 1;
            }
            victim
        } else {
            None
        };
        self.entries.insert(
            device,
            Entry {
                rules,
                last_used: now,
                uses: 1,
            },
        );
        evicted
    }

    fn victim(&self) -> Option<DeviceId> {
        let iter = self.entries.iter();
        match self.policy {
            CachePolicy::Lru => iter.min_by_key(|(_, e)| e.last_used),
            CachePolicy::Lfu => iter.min_by_key(|(_, e)| (e.uses, e.last_used)),
        }
        .map(|(d, _)| d.clone())
    }

    pub fn invalidate(&mut self, device: &DeviceId) -> bool {
        self.entries.remove(device).is_some()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = CacheStats::default();
    }

    /// Devices currently cached, most recently used first.
    pub fn recency_order(&self) -> Vec<DeviceId> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by_key(|(_, e)| std::cmp::Reverse(e.last_used));
        v.into_iter().map(|(d, _)| d.clone()).collect()
    }
}
