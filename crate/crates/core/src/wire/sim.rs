//! Deterministic simulated network.
//!
//! Deliveries are ordered by `(deliver_at, enqueue_seq)`. Latency is drawn
//! uniformly from an integer millisecond range using a seeded ChaCha stream,
//! so the same seed and the same sequence of sends always yields the same
//! schedule. Loss only happens across partitions; messages to crashed or
//! unknown nodes are dropped by the driver at delivery time.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Address, Envelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimNetConfig {
    pub seed: u64,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig { seed: 0, latency_min_ms: 1, latency_max_ms: 5 }
    }
}

/// One scheduled delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub deliver_at: u64,
    pub enqueue_seq: u64,
    pub env: Envelope,
}

#[derive(Debug, Clone)]
pub struct SimNet {
    clock: u64,
    queue: BTreeMap<(u64, u64), Envelope>,
    next_seq: u64,
    partitions: Vec<BTreeSet<Address>>,
    rng: ChaCha8Rng,
    latency: (u64, u64),
    dropped: u64,
}

impl SimNet {
    pub fn new(cfg: SimNetConfig) -> Self {
        let (lo, hi) = if cfg.latency_min_ms <= cfg.latency_max_ms {
            (cfg.latency_min_ms, cfg.latency_max_ms)
        } else {
            (cfg.latency_max_ms, cfg.latency_min_ms)
        };
        SimNet {
            clock: 0,
            queue: BTreeMap::new(),
            next_seq: 0,
            partitions: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            latency: (lo, hi),
            dropped: 0,
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Messages discarded at a partition boundary so far.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Splits the listed addresses into groups that cannot talk to each
    /// other. Addresses absent from every group are unaffected.
    pub fn partition(&mut self, groups: Vec<BTreeSet<Address>>) {
        self.partitions = groups;
    }

    pub fn heal(&mut self) {
        self.partitions.clear();
    }

    pub fn can_reach(&self, from: &Address, to: &Address) -> bool {
        let group_of = |a: &Address| self.partitions.iter().position(|g| g.contains(a));
        match (group_of(from), group_of(to)) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }

    /// Schedules a delivery, or drops the message if it would cross a
    /// partition. Returns the scheduled delivery time.
    pub fn send(&mut self, env: Envelope) -> Option<u64> {
        // Draw latency before the partition check so the random stream does
        // not depend on partition state.
        let latency = self.rng.gen_range(self.latency.0..=self.latency.1);
        if !self.can_reach(&env.from, &env.to) {
            self.dropped += 1;
            return None;
        }
        let at = self.clock + latency;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), env);
        Some(at)
    }

    pub fn next_delivery_time(&self) -> Option<u64> {
        self.queue.keys().next().map(|(at, _)| *at)
    }

    /// Moves the clock forward without delivering. The clock never moves
    /// backward and never past a pending delivery.
    pub fn advance_to(&mut self, t: u64) {
        let limit = self.next_delivery_time().unwrap_or(u64::MAX);
        self.clock = self.clock.max(t.min(limit));
    }

    /// Advances to the earliest pending instant and returns everything due
    /// then, in enqueue order. An empty queue leaves the clock unchanged.
    pub fn step(&mut self) -> Vec<Delivery> {
        let Some(at) = self.next_delivery_time() else {
            return Vec::new();
        };
        self.clock = self.clock.max(at);
        let mut out = Vec::new();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 != at {
                break;
            }
            let ((deliver_at, enqueue_seq), env) = entry.remove_entry();
            out.push(Delivery { deliver_at, enqueue_seq, env });
        }
        out
    }
}
