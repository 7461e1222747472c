//! Deterministic cluster driver: instances, the simulated network, fault
//! injection, a client endpoint and the global event log.
//!
//! The driver always processes whichever comes first, the next delivery or
//! the next instance deadline. Deliveries win ties. Instances due at the
//! same instant are ticked in address order.

mod check;
mod script;

pub use check::{
    check_convergence, check_lock_safety, committed_writes, conflict_graph, serial_witness, ConflictGraph,
    RefDb, WriteTxn,
};
pub use script::{parse_script, run_script, Check, Expect, Op, OpResult, ScriptError, ScriptOp, ScriptOutcome};

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ClusterConfig;
use crate::error::{DbError, ErrorKind};
use crate::monitor::ResourceSample;
use crate::node::msg::{self, SqlExec, SqlResult};
use crate::node::{Node, NodeStatus};
use crate::storage::MemDisk;
use crate::systable::{CatalogEntry, SystemTableState};
use crate::tablemgr::TableManagerState;
use crate::wire::{SimNet, SimNetConfig};
use crate::wire::{canonical_json, Address, Envelope};

/// Address used by the simulated client. It is never partitioned.
pub const CLIENT: &str = "client";

/// Default bound on how long the client waits for one answer.
pub const CLIENT_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: u64,
    pub node: String,
    pub kind: String,
    pub detail: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    /// One canonical JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&canonical_json(&serde_json::to_value(r).expect("records serialize")));
            out.push('\n');
        }
        out
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.of_kind(kind).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub t: u64,
    pub nodes: BTreeMap<String, NodeStatus>,
    pub crashed: Vec<Address>,
    pub departed: Vec<Address>,
}

pub struct SimCluster {
    cfg: ClusterConfig,
    net: SimNet,
    nodes: BTreeMap<Address, Node>,
    disks: BTreeMap<Address, MemDisk>,
    samples: BTreeMap<Address, ResourceSample>,
    crashed: BTreeSet<Address>,
    departed: BTreeSet<Address>,
    log: EventLog,
    client: Address,
    next_client_rid: u64,
    replies: BTreeMap<u64, Envelope>,
}

impl SimCluster {
    pub fn new(cfg: ClusterConfig) -> Result<Self, DbError> {
        cfg.validate().map_err(|e| DbError::new(ErrorKind::Validation, e))?;
        let net = SimNet::new(SimNetConfig {
            seed: cfg.seed,
            latency_min_ms: cfg.latency_range[0],
            latency_max_ms: cfg.latency_range[1],
        });
        Ok(SimCluster {
            cfg,
            net,
            nodes: BTreeMap::new(),
            disks: BTreeMap::new(),
            samples: BTreeMap::new(),
            crashed: BTreeSet::new(),
            departed: BTreeSet::new(),
            log: EventLog::default(),
            client: Address::new(CLIENT),
            next_client_rid: 0,
            replies: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.net.clock()
    }

    fn record(&mut self, node: &str, kind: &str, detail: Value) {
        self.log.records.push(LogRecord { t: self.now(), node: node.into(), kind: kind.into(), detail });
    }

    /// Starts (or restarts, keeping its disk) an instance. Without a
    /// bootstrap address the instance forms a new ring.
    pub fn start_node(&mut self, addr: &str, bootstrap: Option<&str>) -> Result<(), DbError> {
        let a = Address::new(addr);
        if addr == CLIENT || self.nodes.contains_key(&a) {
            return Err(DbError::new(ErrorKind::Validation, format!("{addr} is already running")));
        }
        let disk = self.disks.entry(a.clone()).or_default().clone();
        let now = self.now();
        let sample = match self.samples.get(&a) {
            Some(s) => s.clone(),
            None => ResourceSample::idle(a.clone(), now),
        };
        let restarted = self.crashed.remove(&a);
        self.departed.remove(&a);
        self.record(addr, "start", json!({ "bootstrap": bootstrap, "restart": restarted }));
        let node = Node::start(a.clone(), self.cfg.clone(), Box::new(disk), bootstrap.map(Address::new), sample, now);
        self.nodes.insert(a.clone(), node);
        self.flush(&a);
        Ok(())
    }

    /// Kills an instance. Its disk survives for a later restart.
    pub fn crash(&mut self, addr: &str) -> Result<(), DbError> {
        let a = Address::new(addr);
        let Some(mut node) = self.nodes.remove(&a) else {
            return Err(DbError::new(ErrorKind::Validation, format!("{addr} is not running")));
        };
        node.halt();
        let _ = node.take_outbox();
        let _ = node.take_events();
        self.crashed.insert(a);
        self.record(addr, "crash", json!({}));
        Ok(())
    }

    pub fn partition(&mut self, groups: Vec<Vec<String>>) {
        let sets: Vec<BTreeSet<Address>> =
            groups.iter().map(|g| g.iter().map(Address::new).collect()).collect();
        self.record(CLIENT, "partition", json!({ "groups": groups }));
        self.net.partition(sets);
    }

    pub fn heal(&mut self) {
        self.record(CLIENT, "heal", json!({}));
        self.net.heal();
    }

    /// Scripts an instance's resource sample; it is published right away.
    pub fn set_resources(&mut self, sample: ResourceSample) -> Result<(), DbError> {
        sample.validate().map_err(|e| DbError::new(ErrorKind::Validation, e))?;
        let a = sample.instance.clone();
        self.samples.insert(a.clone(), sample.clone());
        self.record(a.as_str(), "set_resources", serde_json::to_value(&sample).unwrap_or_default());
        if let Some(n) = self.nodes.get_mut(&a) {
            n.set_sample(sample);
            self.flush(&a);
        }
        Ok(())
    }

    fn client_send(&mut self, to: &str, msg_type: &str, body: serde_json::Map<String, Value>) -> u64 {
        self.next_client_rid += 1;
        let rid = self.next_client_rid;
        let env = Envelope::new(msg_type, self.client.clone(), Address::new(to), rid, body);
        self.net.send(env);
        rid
    }

    /// Sends a statement from the client; returns a ticket for the answer.
    pub fn submit(&mut self, node: &str, sql: &str) -> u64 {
        self.record(CLIENT, "submit", json!({ "node": node, "sql": sql }));
        self.client_send(node, msg::SQL_EXEC, msg::encode(&SqlExec { text: sql.into() }))
    }

    /// The answer for a ticket, once it has arrived.
    pub fn take_result(&mut self, ticket: u64) -> Option<Result<SqlResult, DbError>> {
        let env = self.replies.remove(&ticket)?;
        Some(msg::decode_reply(&env))
    }

    /// Waits up to `timeout_ms` for a ticket's answer.
    pub fn wait_result(&mut self, ticket: u64, timeout_ms: u64) -> Result<SqlResult, DbError> {
        let deadline = self.now() + timeout_ms;
        loop {
            if let Some(r) = self.take_result(ticket) {
                return r;
            }
            if self.now() >= deadline || !self.step_until(deadline) {
                return Err(DbError::new(ErrorKind::Timeout, "no answer from the cluster"));
            }
        }
    }

    /// Runs one statement to completion.
    pub fn sql(&mut self, node: &str, sql: &str) -> Result<SqlResult, DbError> {
        let t = self.submit(node, sql);
        self.wait_result(t, CLIENT_TIMEOUT_MS)
    }

    /// Asks an instance to leave gracefully and waits for it to finish.
    pub fn leave(&mut self, node: &str) -> Result<(), DbError> {
        if !self.nodes.contains_key(&Address::new(node)) {
            return Err(DbError::new(ErrorKind::Validation, format!("{node} is not running")));
        }
        self.record(CLIENT, "leave", json!({ "node": node }));
        let t = self.client_send(node, msg::ADMIN_LEAVE, serde_json::Map::new());
        self.wait_result(t, CLIENT_TIMEOUT_MS).map(|_| ())
    }

    /// Processes the next event if it is due at or before `limit`. Returns
    /// false (after moving the clock to `limit`) when nothing is due.
    fn step_until(&mut self, limit: u64) -> bool {
        let net_t = self.net.next_delivery_time();
        let timer_t = self.nodes.values().filter_map(Node::next_deadline).min();
        match (net_t, timer_t) {
            (Some(n), t) if n <= limit && t.is_none_or(|t| n <= t) => {
                for d in self.net.step() {
                    self.deliver(d.env);
                }
                true
            }
            (_, Some(t)) if t <= limit => {
                self.net.advance_to(t);
                let due: Vec<Address> =
                    self.nodes.iter().filter(|(_, n)| n.next_deadline() == Some(t)).map(|(a, _)| a.clone()).collect();
                for a in due {
                    if let Some(n) = self.nodes.get_mut(&a) {
                        n.tick(t);
                    }
                    self.flush(&a);
                }
                true
            }
            _ => {
                self.net.advance_to(limit);
                false
            }
        }
    }

    pub fn run_until(&mut self, t: u64) {
        while self.step_until(t) {}
    }

    pub fn run_for(&mut self, ms: u64) {
        let t = self.now() + ms;
        self.run_until(t);
    }

    /// Runs until `pred` holds, checking every `every_ms`. Returns whether it
    /// held within `max_ms`.
    pub fn run_until_pred(&mut self, max_ms: u64, every_ms: u64, mut pred: impl FnMut(&SimCluster) -> bool) -> bool {
        let deadline = self.now() + max_ms;
        loop {
            if pred(self) {
                return true;
            }
            if self.now() >= deadline {
                return false;
            }
            let next = (self.now() + every_ms.max(1)).min(deadline);
            self.run_until(next);
        }
    }

    fn deliver(&mut self, env: Envelope) {
        let at = self.now();
        let mut detail = json!({ "from": env.from.as_str(), "rid": env.rid, "type": env.msg_type.as_str() });
        if let Some(re) = env.reply_to() {
            detail["re"] = json!(re);
        }
        let to = env.to.clone();
        if to == self.client {
            self.record(CLIENT, "deliver", detail);
            if let Some(re) = env.reply_to() {
                self.replies.insert(re, env);
            }
            return;
        }
        let Some(node) = self.nodes.get_mut(&to) else {
            self.record(to.as_str(), "drop", detail);
            return;
        };
        self.log.records.push(LogRecord { t: at, node: to.as_str().into(), kind: "deliver".into(), detail });
        node.handle(env, at);
        self.flush(&to);
    }

    fn flush(&mut self, addr: &Address) {
        let Some(node) = self.nodes.get_mut(addr) else { return };
        let out = node.take_outbox();
        let events = node.take_events();
        let departed = node.has_departed();
        for e in events {
            self.record(addr.as_str(), &e.kind, e.detail);
        }
        for env in out {
            self.net.send(env);
        }
        if departed {
            self.nodes.remove(addr);
            self.departed.insert(addr.clone());
        }
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn node(&self, addr: &str) -> Option<&Node> {
        self.nodes.get(&Address::new(addr))
    }

    pub fn live(&self) -> Vec<Address> {
        self.nodes.keys().cloned().collect()
    }

    pub fn is_live(&self, addr: &str) -> bool {
        self.nodes.contains_key(&Address::new(addr))
    }

    pub fn disk(&self, addr: &str) -> Option<MemDisk> {
        self.disks.get(&Address::new(addr)).cloned()
    }

    pub fn snapshot(&self) -> ClusterSnapshot {
        ClusterSnapshot {
            t: self.now(),
            nodes: self.nodes.iter().map(|(a, n)| (a.as_str().to_string(), n.status())).collect(),
            crashed: self.crashed.iter().cloned().collect(),
            departed: self.departed.iter().cloned().collect(),
        }
    }

    /// The live keeper with the highest epoch.
    pub fn keeper(&self) -> Option<(Address, SystemTableState)> {
        self.nodes
            .iter()
            .filter_map(|(a, n)| n.status().catalog.map(|c| (a.clone(), c)))
            .max_by_key(|(_, c)| c.epoch)
    }

    pub fn catalog_entry(&self, table: &str) -> Option<CatalogEntry> {
        self.keeper().and_then(|(_, c)| c.entries.get(table).cloned())
    }

    /// The manager state of a table at the address the catalog names.
    pub fn manager(&self, table: &str) -> Option<(Address, TableManagerState)> {
        let e = self.catalog_entry(table)?;
        let state = self.nodes.get(&e.tm_address)?.manager(table)?;
        Some((e.tm_address, state))
    }
}
