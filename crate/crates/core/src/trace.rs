//! Access-pattern traces of the rule engine and KL-divergence comparison.
//!
//! The engine emits one [`TraceSymbol`] per read or write of a named region
//! while tracing is enabled. A trace is turned into a smoothed distribution
//! over symbol bigrams, and two distributions are compared with forward
//! Kullback-Leibler divergence in nats.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::enclave::{OutboundMessage, TrustedBoundary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Op {
    R,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    EventBuf,
    Cache,
    Store,
    RuleCond,
    RuleAct,
    OutBuf,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::EventBuf,
        Region::Cache,
        Region::Store,
        Region::RuleCond,
        Region::RuleAct,
        Region::OutBuf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::EventBuf => "event_buf",
            Region::Cache => "cache",
            Region::Store => "store",
            Region::RuleCond => "rule_cond",
            Region::RuleAct => "rule_act",
            Region::OutBuf => "out_buf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TraceSymbol {
    pub op: Op,
    pub region: Region,
}

pub const SYMBOL_COUNT: usize = 12;
pub const BIGRAM_CELLS: usize = SYMBOL_COUNT * SYMBOL_COUNT;
pub const SMOOTHING_ALPHA: f64 = 1e-3;

impl TraceSymbol {
    pub const fn new(op: Op, region: Region) -> Self {
        TraceSymbol { op, region }
    }

    pub fn index(self) -> usize {
        let op = match self.op {
            Op::R => 0,
            Op::W => 1,
        };
        op * Region::ALL.len() + self.region as usize
    }
}

impl fmt::Display for TraceSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            Op::R => "R",
            Op::W => "W",
        };
        write!(f, "{op},{}", self.region.name())
    }
}

impl FromStr for TraceSymbol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (op, region) = s
            .trim()
            .split_once(',')
            .ok_or_else(|| Error::Schema(format!("trace line `{s}` is not `op,region`")))?;
        let op = match op {
            "R" => Op::R,
            "W" => Op::W,
            other => return Err(Error::Schema(format!("unknown trace op `{other}`"))),
        };
        let region = Region::ALL
            .into_iter()
            .find(|r| r.name() == region)
            .ok_or_else(|| Error::Schema(format!("unknown trace region `{region}`")))?;
        Ok(TraceSymbol { op, region })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub symbols: Vec<TraceSymbol>,
}

impl AccessTrace {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// One `R|W,region` pair per line.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.symbols.len() * 12);
        for s in &self.symbols {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let symbols = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(AccessTrace { symbols })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDistribution {
    pub probabilities: Vec<f64>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DivergenceScore(pub f64);

impl DivergenceScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Relative bigram frequencies over all 144 cells with additive smoothing.
/// A single-symbol trace has no bigrams; it is counted as the self-pair so
/// that every non-empty trace yields a distribution.
pub fn build_distribution(trace: &AccessTrace) -> Result<TraceDistribution> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut counts = vec![0u64; BIGRAM_CELLS];
    if trace.len() == 1 {
        let i = trace.symbols[0].index();
        counts[i * SYMBOL_COUNT + i] += 1;
    } else {
        for pair in trace.symbols.windows(2) {
            counts[pair[0].index() * SYMBOL_COUNT + pair[1].index()] += 1;
        }
    }
    Ok(smoothed(&counts))
}

pub(crate) fn smoothed(counts: &[u64]) -> TraceDistribution {
    let total: u64 = counts.iter().sum();
    let denom = total as f64 + SMOOTHING_ALPHA * counts.len() as f64;
    TraceDistribution {
        probabilities: counts
            .iter()
            .map(|&c| (c as f64 + SMOOTHING_ALPHA) / denom)
            .collect(),
        sample_count: total as usize,
    }
}

/// Forward KL divergence `sum p_i ln(p_i / q_i)`, clamped at zero against
/// rounding.
pub fn kl_divergence(p: &TraceDistribution, q: &TraceDistribution) -> Result<DivergenceScore> {
    kl_divergence_raw(&p.probabilities, &q.probabilities).map(DivergenceScore)
}

pub fn kl_divergence_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::AlphabetMismatch(p.len(), q.len()));
    }
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    Ok(sum.max(0.0))
}

/// Handles `events` (topic, payload) in order with tracing on and returns the
/// symbols they produced along with the engine's outputs.
pub fn record_trace(
    boundary: &TrustedBoundary,
    events: &[(String, Vec<u8>)],
) -> Result<(AccessTrace, Vec<Vec<OutboundMessage>>)> {
    if !boundary.tracing_enabled() {
        return Err(Error::TracingDisabled);
    }
    boundary.take_trace();
    let mut outputs = Vec::with_capacity(events.len());
    for (topic, payload) in events {
        outputs.push(boundary.handle_event(topic, payload)?);
    }
    Ok((boundary.take_trace(), outputs))
}

#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub names: Vec<String>,
    /// `scores[i][j]` is KL(trace_i || trace_j); the diagonal is zero.
    pub scores: Vec<Vec<f64>>,
    pub threshold: f64,
}

impl ScoreMatrix {
    /// Ordered pairs whose score falls below the indistinguishability threshold.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        let n = self.names.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.scores[i][j] < self.threshold)
            .collect()
    }

    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.names.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| self.scores[i][j])
            .collect()
    }

    /// Symmetrised score `(KL(i||j) + KL(j||i)) / 2`.
    pub fn pair_score(&self, i: usize, j: usize) -> f64 {
        (self.scores[i][j] + self.scores[j][i]) / 2.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("set");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, row) in self.scores.iter().enumerate() {
            out.push_str(&self.names[i]);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Traces every named set on its own freshly built boundary and scores all
/// ordered pairs. `make_boundary` must build identically provisioned
/// boundaries with tracing enabled.
pub fn distinguishability_report<F>(
    sets: &[(String, Vec<(String, Vec<u8>)>)],
    mut make_boundary: F,
    threshold: f64,
) -> Result<ScoreMatrix>
where
    F: FnMut() -> Result<TrustedBoundary>,
{
    if sets.len() < 2 {
        return Err(Error::InvalidConfig(
            "a distinguishability report needs at least two event sets".into(),
        ));
    }
    let mut dists = Vec::with_capacity(sets.len());
    for (_, events) in sets {
        let boundary = make_boundary()?;
        let (trace, _) = record_trace(&boundary, events)?;
        dists.push(build_distribution(&trace)?);
    }
    let n = sets.len();
    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                scores[i][j] = kl_divergence(&dists[i], &dists[j])?.value();
            }
        }
    }
    Ok(ScoreMatrix {
        names: sets.iter().map(|(n, _)| n.clone()).collect(),
        scores,
        threshold,
    })
}

/// The three-set comparison fixture: ten rules, and three ten-event sets
/// where `S2` differs from `S1` in a single reading and `S3` is drawn
/// independently.
pub mod fixture {
    use std::time::Duration;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{distinguishability_report, ScoreMatrix};
    use crate::bench::{self, BenchConfig};
    use crate::enclave::{Mode, TrustedBoundary};
    use crate::error::Result;
    use crate::rule::{DeviceEvent, Rule, Scalar};

    pub const RULES: usize = 10;
    pub const EVENTS_PER_SET: usize = 10;
    pub const DEVICES: usize = 4;
    pub const SET_NAMES: [&str; 3] = ["S1", "S2", "S3"];

    pub struct Table2Fixture {
        pub rules: Vec<Rule>,
        pub sets: [Vec<DeviceEvent>; 3],
    }

    pub fn table2(seed: u64) -> Result<Table2Fixture> {
        let rules = bench::generate_ruleset(RULES, DEVICES, seed)?;
        let s1 = bench::generate_events(DEVICES, EVENTS_PER_SET, seed.wrapping_mul(2).wrapping_add(1));
        let mut s2 = s1.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ab1e2);
        let i = rng.gen_range(0..EVENTS_PER_SET);
        let v = s2[i].value.as_number().unwrap_or(0.0);
        s2[i].value = Scalar::Number(if v >= bench::VALUE_RANGE.1 { v - 1.0 } else { v + 1.0 });
        let s3 = bench::generate_events(DEVICES, EVENTS_PER_SET, seed.wrapping_mul(2).wrapping_add(2));
        Ok(Table2Fixture {
            rules,
            sets: [s1, s2, s3],
        })
    }

    /// Scores the fixture for `seed` on fresh `mode` boundaries.
    pub fn table2_scores(seed: u64, mode: Mode, threshold: f64) -> Result<ScoreMatrix> {
        let fx = table2(seed)?;
        let cfg = BenchConfig {
            mode,
            ruleset_size: RULES,
            devices: DEVICES,
            seed,
            transition_cost: Duration::ZERO,
            ..Default::default()
        };
        let (keys, ruleset_key) = bench::bench_keys(DEVICES, seed);
        let mut sets = Vec::with_capacity(3);
        for (name, events) in SET_NAMES.iter().zip(&fx.sets) {
            let prepared = bench::prepare_events(mode, events, &keys)?
                .into_iter()
                .map(|p| (p.topic, p.payload))
                .collect();
            sets.push((name.to_string(), prepared));
        }
        distinguishability_report(
            &sets,
            || {
                let b: TrustedBoundary =
                    bench::provisioned_boundary(&cfg, &fx.rules, &keys, &ruleset_key)?;
                b.enable_tracing();
                Ok(b)
            },
            threshold,
        )
    }

    /// Forward KL(S1||S2) is below KL(S1||S3) and KL(S2||S3).
    pub fn near_pair_is_lowest(m: &ScoreMatrix) -> bool {
        let s = &m.scores;
        s[0][1] < s[0][2] && s[0][1] < s[1][2]
    }
}
