//! Table manager state: the volatile lock table, access statistics, and the
//! persisted per-table metadata.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::monitor::AvailabilityScore;
use crate::storage::TableSchema;
use crate::wire::Address;


pub const EWMA_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LockMode {
    Read,
    Write,
}

impl LockMode {
    pub fn compatible(self, other: LockMode) -> bool {
        self == LockMode::Read && other == LockMode::Read
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LockMode::Read => "READ",
            LockMode::Write => "WRITE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LockRequest<W> {
    pub txn: String,
    pub mode: LockMode,
    pub enqueued_at: u64,
    pub waiter: W,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Acquire<W> {
    Granted(W),
    Queued,
}

/// Table-level shared/exclusive locks with a FIFO wait queue.
///
/// A request is granted only when it is compatible with every holder and
/// nobody is queued ahead of it, so a stream of readers cannot starve a
/// waiting writer.
#[derive(Debug, Clone)]
pub struct LockTable<W> {
    holders: BTreeMap<String, LockMode>,
    queue: VecDeque<LockRequest<W>>,
}

impl<W> Default for LockTable<W> {
    fn default() -> Self {
        LockTable { holders: BTreeMap::new(), queue: VecDeque::new() }
    }
}

impl<W> LockTable<W> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn holders(&self) -> impl Iterator<Item = (&str, LockMode)> {
        self.holders.iter().map(|(t, m)| (t.as_str(), *m))
    }

    pub fn queued(&self) -> impl Iterator<Item = &LockRequest<W>> {
        self.queue.iter()
    }

    pub fn is_idle(&self) -> bool {
        self.holders.is_empty() && self.queue.is_empty()
    }

    pub fn holds(&self, txn: &str) -> Option<LockMode> {
        self.holders.get(txn).copied()
    }

    fn grantable(&self, txn: &str, mode: LockMode) -> bool {
        self.holders.iter().all(|(t, m)| t == txn || mode.compatible(*m))
    }

    pub fn acquire(&mut self, txn: &str, mode: LockMode, now: u64, waiter: W) -> Acquire<W> {
        if let Some(held) = self.holders.get(txn) {
            if *held == LockMode::Write || mode == LockMode::Read {
                return Acquire::Granted(waiter);
            }
        }
        if self.queue.is_empty() && self.grantable(txn, mode) {
            self.holders.insert(txn.into(), mode);
            return Acquire::Granted(waiter);
        }
        self.queue.push_back(LockRequest { txn: txn.into(), mode, enqueued_at: now, waiter });
        Acquire::Queued
    }

    fn drain(&mut self) -> Vec<LockRequest<W>> {
        let mut granted = Vec::new();
        while let Some(front) = self.queue.front() {
            if !self.grantable(&front.txn, front.mode) {
                break;
            }
            let req = self.queue.pop_front().expect("front exists");
            let mode = match self.holders.get(&req.txn) {
                Some(LockMode::Write) => LockMode::Write,
                _ => req.mode,
            };
            self.holders.insert(req.txn.clone(), mode);
            granted.push(req);
        }
        granted
    }

    /// Drops the transaction's lock and any queued request; returns the
    /// waiters granted as a result. Unknown transactions are a no-op.
    pub fn release(&mut self, txn: &str) -> Vec<LockRequest<W>> {
        let held = self.holders.remove(txn).is_some();
        let before = self.queue.len();
        self.queue.retain(|r| r.txn != txn);
        if !held && before == self.queue.len() {
            return Vec::new();
        }
        self.drain()
    }

    /// Releases every transaction matching `pred`, returning the released
    /// transaction ids and the resulting grants.
    pub fn release_where(&mut self, mut pred: impl FnMut(&str) -> bool) -> (Vec<String>, Vec<LockRequest<W>>) {
        let victims: Vec<String> = self.holders.keys().filter(|t| pred(t)).cloned().collect();
        for t in &victims {
            self.holders.remove(t);
        }
        self.queue.retain(|r| !pred(&r.txn));
        (victims, self.drain())
    }

    /// Withdraws requests that have waited at least `wait_ms`; returns the
    /// withdrawn requests and any grants their removal unblocked.
    pub fn expire(&mut self, now: u64, wait_ms: u64) -> (Vec<LockRequest<W>>, Vec<LockRequest<W>>) {
        let mut expired = Vec::new();
        let mut kept = VecDeque::new();
        for r in self.queue.drain(..) {
            if now.saturating_sub(r.enqueued_at) >= wait_ms {
                expired.push(r);
            } else {
                kept.push_back(r);
            }
        }
        self.queue = kept;
        let granted = if expired.is_empty() { Vec::new() } else { self.drain() };
        (expired, granted)
    }

    pub fn next_expiry(&self, wait_ms: u64) -> Option<u64> {
        self.queue.iter().map(|r| r.enqueued_at + wait_ms).min()
    }

    /// Returns true when no WRITE holder coexists with another holder.
    pub fn is_consistent(&self) -> bool {
        let writers = self.holders.values().filter(|m| **m == LockMode::Write).count();
        writers == 0 || self.holders.len() == 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessStats {
    pub reads: u64,
    pub writes: u64,
    pub routed: BTreeMap<Address, u64>,
    pub response_ewma_ms: Option<f64>,
}

impl AccessStats {
    pub fn record_read(&mut self, replica: Option<&Address>) {
        self.reads += 1;
        if let Some(r) = replica {
            *self.routed.entry(r.clone()).or_default() += 1;
        }
    }

    pub fn record_write(&mut self) {
        self.writes += 1;
    }

    pub fn record_response(&mut self, ms: f64) {
        self.response_ewma_ms = Some(match self.response_ewma_ms {
            None => ms,
            Some(prev) => EWMA_ALPHA * ms + (1.0 - EWMA_ALPHA) * prev,
        });
    }

    pub fn routed_to(&self, a: &Address) -> u64 {
        self.routed.get(a).copied().unwrap_or(0)
    }
}

/// Persisted table manager metadata. The lock table is deliberately not a
/// field: it lives beside this struct in the running manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableManagerState {
    pub table_name: String,
    pub schema: TableSchema,
    pub replicas: Vec<Address>,
    pub target_rf: u32,
    pub commit_seq: u64,
    pub row_count: u64,
    pub meta_replicas: Vec<Address>,
    pub stats: AccessStats,
}

impl TableManagerState {
    pub fn new(schema: TableSchema, replicas: Vec<Address>, target_rf: u32) -> Self {
        TableManagerState {
            table_name: schema.name.clone(),
            schema,
            replicas,
            target_rf,
            commit_seq: 0,
            row_count: 0,
            meta_replicas: Vec::new(),
            stats: AccessStats::default(),
        }
    }

    pub fn under_replicated(&self) -> bool {
        (self.replicas.len() as u64) < u64::from(self.target_rf)
    }
}

pub fn tm_path(table: &str) -> String {
    format!("tm/{table}.json")
}

/// The replica with the highest score; ties go to the replica that has
/// served fewer routed reads, then to the smallest address. Replicas with no
/// score are treated as scoring 0.
pub fn choose_read_replica(
    replicas: &[Address],
    stats: &AccessStats,
    scores: &BTreeMap<Address, AvailabilityScore>,
) -> Option<Address> {
    let score = |a: &Address| scores.get(a).map(|s| s.0).unwrap_or(0.0);
    let mut best: Option<&Address> = None;
    for r in replicas {
        best = Some(match best {
            None => r,
            Some(b) => {
                let (sr, sb) = (score(r), score(b));
                let better = sr > sb
                    || (sr == sb
                        && (stats.routed_to(r), r) < (stats.routed_to(b), b));
                if better { r } else { b }
            }
        });
    }
    best.cloned()
}
