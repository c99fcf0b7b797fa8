//! Flush+Reload cache model and the taint-based leakage oracle.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::machine::{Taint, TaintLabel};
use crate::pipeline::{PipelineTrace, Touch};

/// Fully associative set of cached lines. Each line records the cycle its
/// fill completes so in-flight misses are visible to later accesses.
#[derive(Clone, Debug)]
pub struct Cache {
    pub line_size: u64,
    pub hit: u64,
    pub miss: u64,
    lines: HashMap<u64, u64>,
}

impl Cache {
    pub fn new(line_size: u64, hit: u64, miss: u64) -> Cache {
        Cache { line_size, hit, miss, lines: HashMap::new() }
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.line_size
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.lines.contains_key(&self.line_of(addr))
    }

    pub fn insert(&mut self, addr: u64) {
        self.lines.insert(self.line_of(addr), 0);
    }

    pub fn flush(&mut self, addr: u64) {
        self.lines.remove(&self.line_of(addr));
    }

    pub fn flush_range(&mut self, addr: u64, len: u64) {
        let first = self.line_of(addr);
        let last = self.line_of(addr + len.max(1) - 1);
        for l in first..=last {
            self.lines.remove(&l);
        }
    }

    /// Access at cycle `now` from the simulated core. Inserts the line and
    /// returns the load latency.
    pub fn access(&mut self, addr: u64, now: u64) -> u64 {
        let line = self.line_of(addr);
        match self.lines.get(&line) {
            Some(&ready) => ready.saturating_sub(now).max(self.hit),
            None => {
                self.lines.insert(line, now + self.miss);
                self.miss
            }
        }
    }

    /// Attacker-side timed reload after the victim has finished.
    pub fn timed_access(&mut self, addr: u64) -> u64 {
        let line = self.line_of(addr);
        if let std::collections::hash_map::Entry::Vacant(e) = self.lines.entry(line) {
            e.insert(0);
            self.miss
        } else {
            self.hit
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ProbeError {
    #[error("no probe bucket was cached")]
    NoSignal,
    #[error("several probe buckets were cached: {0:?}")]
    AmbiguousSignal(Vec<usize>),
}

/// Times every bucket of a probe array and returns the single one that hits.
pub fn probe_recover(cache: &mut Cache, base: u64, stride: u64, buckets: usize) -> Result<usize, ProbeError> {
    let hits: Vec<usize> = (0..buckets)
        .filter(|i| cache.timed_access(base + *i as u64 * stride) == cache.hit)
        .collect();
    match hits.as_slice() {
        [] => Err(ProbeError::NoSignal),
        [one] => Ok(*one),
        _ => Err(ProbeError::AmbiguousSignal(hits)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Witness {
    pub uop: String,
    pub transient: bool,
    pub addr: u64,
    pub labels: Taint,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LeakReport {
    pub leaked: BTreeSet<TaintLabel>,
    pub witnesses: Vec<Witness>,
}

impl LeakReport {
    pub fn is_empty(&self) -> bool {
        self.leaked.is_empty()
    }
}

fn secret_labels(t: &Touch) -> Taint {
    t.addr_taint.iter().chain(t.control_taint.iter()).filter(|l| l.secret).copied().collect()
}

/// Secret labels that reached a cache-modulating access, either transiently
/// or architecturally when the scenario marks such access unauthorized.
pub fn taint_oracle(trace: &PipelineTrace, unauthorized: bool) -> LeakReport {
    let mut rep = LeakReport::default();
    for t in &trace.touches {
        if !(t.transient || unauthorized) {
            continue;
        }
        let labels = secret_labels(t);
        if labels.is_empty() {
            continue;
        }
        rep.leaked.extend(labels.iter().copied());
        rep.witnesses.push(Witness { uop: t.uop.clone(), transient: t.transient, addr: t.addr, labels });
    }
    rep
}
