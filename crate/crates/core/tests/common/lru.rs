//! LRU eviction sequences with hand-worked expectations.

use std::sync::Arc;

use cloakrule::enclave::{CachePolicy, RuleCache};
use cloakrule::rule::DeviceId;

pub struct Case {
    pub capacity: usize,
    /// `x` looks device x up and loads it on a miss; `-x` invalidates it.
    pub ops: &'static str,
    pub evicted: &'static str,
    /// Most recently used first.
    pub order: &'static str,
    pub hits: u64,
}

const fn case(
    capacity: usize,
    ops: &'static str,
    evicted: &'static str,
    order: &'static str,
    hits: u64,
) -> Case {
    Case { capacity, ops, evicted, order, hits }
}

// Expected columns were worked out by hand.
pub const LRU_CASES: &[Case] = &[
    case(2, "a b c", "a", "c b", 0),
    case(2, "a b a c", "b", "c a", 1),
    case(3, "a b c d e", "a b", "e d c", 0),
    case(3, "a b c a d", "b", "d a c", 1),
    case(3, "a b c b a d", "c", "d a b", 2),
    case(1, "a a b b a", "a b", "a", 2),
    case(2, "a b a b a b", "", "b a", 4),
    case(2, "a b c a b c", "a b c a", "c b", 0),
    case(3, "a b c a b c d", "a", "d c b", 3),
    case(4, "a b c d a e b f", "b c d", "f b e a", 1),
    case(2, "a a a b c", "a", "c b", 2),
    case(3, "a b a c a d a e", "b c", "e a d", 3),
    case(0, "a a b", "", "", 0),
    case(5, "a b c", "", "c b a", 0),
    case(2, "a b b a c b", "b a", "b c", 2),
    case(3, "d c b a d c b a", "d c b a d", "a b c", 0),
    case(3, "a b c c c a", "", "a c b", 3),
    case(2, "x y x z x y", "y z", "y x", 2),
    case(4, "a b c d e a b c", "a b c d", "c b a e", 0),
    case(3, "a b c b b d a", "a c", "a d b", 2),
    case(2, "a b -a c", "", "c b", 0),
    case(3, "a b c -b d a", "", "a d c", 1),
    case(2, "a b a -a c d", "b", "d c", 1),
];

fn d(s: &str) -> DeviceId {
    DeviceId::new(s).unwrap()
}

fn words(s: &str) -> Vec<DeviceId> {
    s.split_whitespace().map(d).collect()
}

/// Runs one case; `Err` describes the first difference.
pub fn run_case(c: &Case) -> Result<(), String> {
    let mut cache = RuleCache::new(c.capacity, CachePolicy::Lru);
    let mut evicted = Vec::new();
    for op in c.ops.split_whitespace() {
        if let Some(name) = op.strip_prefix('-') {
            cache.invalidate(&d(name));
        } else if cache.get(&d(op)).is_none() {
            evicted.extend(cache.insert(d(op), Arc::new(Vec::new())));
        }
    }
    let check = |what: &str, ok: bool| if ok { Ok(()) } else { Err(format!("{what} differ for `{}`", c.ops)) };
    check("evictions", evicted == words(c.evicted))?;
    check("recency orders", cache.recency_order() == words(c.order))?;
    check("hit counts", cache.stats().hits == c.hits)?;
    check("sizes", cache.len() <= c.capacity)
}
