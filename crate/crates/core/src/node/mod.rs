//! One database instance as a message-driven state machine.
//!
//! The same `Node` runs under the deterministic simulator and under the
//! socket transport: the driver hands it envelopes and clock ticks, and
//! collects the envelopes it wants sent.

mod catalog;
mod coord;
mod leave;
mod manager;
pub mod msg;
mod replica;
mod ring;
mod rt;

pub use rt::NodeEvent;

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ClusterConfig;
use crate::error::{DbError, ErrorKind};
use crate::monitor::{score, ResourceSample};
use crate::overlay::{node_id, Peer, RingState};
use crate::storage::{stored_tables, Disk, ReplicaStore};
use crate::systable::{CatalogEntry, PointerRecord, SystemTableState, POINTER_PATH, SNAPSHOT_PATH};
use crate::tablemgr::{tm_path, LockTable, TableManagerState};
use crate::wire::{canonical_json, Address, Envelope};

use rt::{Rt, Runner};

/// Who to answer when a queued lock is granted.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Waiter {
    Remote { from: Address, rid: u64, msg_type: String },
    Local,
}

pub(crate) struct Manager {
    pub state: TableManagerState,
    pub locks: LockTable<Waiter>,
    /// False while the manager reconciles after being re-instantiated.
    pub ready: bool,
    pub repairing: bool,
    pub synced_meta: BTreeSet<Address>,
}

impl Manager {
    fn new(state: TableManagerState, ready: bool) -> Self {
        Manager { state, locks: LockTable::new(), ready, repairing: false, synced_meta: BTreeSet::new() }
    }
}

pub(crate) struct Keeper {
    pub st: SystemTableState,
    pub meta: Vec<Address>,
    pub synced: BTreeMap<Address, u64>,
}

pub(crate) struct Staged {
    pub txn: String,
    pub entries: Vec<crate::storage::LogEntry>,
}

pub(crate) struct NodeState {
    pub cfg: ClusterConfig,
    pub addr: Address,
    pub ring: Option<RingState>,
    pub disk: Box<dyn Disk>,
    pub replicas: BTreeMap<String, ReplicaStore>,
    pub staged: BTreeMap<String, Staged>,
    pub tms: BTreeMap<String, Manager>,
    pub tm_copies: BTreeMap<String, TableManagerState>,
    pub keeper: Option<Keeper>,
    pub st_copy: Option<(Address, SystemTableState)>,
    pub pointer: Option<PointerRecord>,
    pub cache: BTreeMap<String, CatalogEntry>,
    pub keeper_hint: Option<Address>,
    pub sample: ResourceSample,
    pub failed: BTreeSet<Address>,
    /// Every peer this instance has learned of, for rejoining after its
    /// whole successor list failed.
    pub contacts: BTreeSet<Address>,
    pub booted: bool,
    pub leaving: bool,
    pub departed: bool,
    pub active_txns: usize,
    pub txn_counter: u64,
    pub rng: ChaCha8Rng,
}

impl NodeState {
    pub fn peer(&self, addr: &Address) -> Peer {
        Peer::new(addr.clone(), self.cfg.m)
    }

    pub fn successors(&self) -> Vec<Address> {
        match &self.ring {
            Some(r) => r.successors.iter().map(|p| p.addr.clone()).filter(|a| a != &self.addr).collect(),
            None => Vec::new(),
        }
    }

    /// Up to `s` live successors, used as metadata replica holders.
    pub fn meta_targets(&self) -> Vec<Address> {
        let mut v: Vec<Address> = self.successors().into_iter().filter(|a| !self.failed.contains(a)).collect();
        v.truncate(self.cfg.s);
        v
    }

    pub fn neighbours(&self) -> Vec<Address> {
        let mut v = self.successors();
        if let Some(p) = self.ring.as_ref().and_then(|r| r.predecessor.as_ref()) {
            if p.addr != self.addr && !v.contains(&p.addr) {
                v.push(p.addr.clone());
            }
        }
        v
    }

    pub fn persist_json<T: Serialize>(&mut self, path: &str, value: &T) {
        let v = serde_json::to_value(value).expect("state serializes");
        let text = canonical_json(&v);
        // A failing disk leaves the in-memory state authoritative; recovery
        // then works from the last successful write.
        let _ = self.disk.write_atomic(path, text.as_bytes());
    }

    pub fn load_json<T: DeserializeOwned>(&self, path: &str) -> Option<T> {
        let raw = self.disk.read(path).ok()??;
        serde_json::from_slice(&raw).ok()
    }

    pub fn persist_tm(&mut self, table: &str) {
        if let Some(state) = self.tms.get(table).map(|m| m.state.clone()) {
            self.persist_json(&tm_path(table), &state);
        }
    }

    pub fn persist_keeper(&mut self) {
        if let Some(st) = self.keeper.as_ref().map(|k| k.st.clone()) {
            self.persist_json(SNAPSHOT_PATH, &st);
        }
    }

    pub fn next_txn(&mut self) -> String {
        self.txn_counter += 1;
        format!("{}:{}", self.addr, self.txn_counter)
    }

    pub fn backoff(&mut self, attempt: u32) -> u64 {
        self.rng.gen_range(50..150) * u64::from(attempt + 1)
    }

    pub fn is_keeper(&self) -> bool {
        self.keeper.is_some()
    }
}

#[derive(Clone)]
pub(crate) struct Ctx {
    pub rt: Rc<Rt>,
    pub st: Rc<RefCell<NodeState>>,
}

impl Ctx {
    pub fn now(&self) -> u64 {
        self.rt.now()
    }

    pub fn me(&self) -> Address {
        self.rt.me.clone()
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut NodeState) -> R) -> R {
        f(&mut self.st.borrow_mut())
    }

    pub fn cfg(&self) -> ClusterConfig {
        self.st.borrow().cfg.clone()
    }

    pub fn event(&self, kind: &str, detail: Value) {
        self.rt.event(kind, detail);
    }

    pub fn send<T: Serialize>(&self, to: &Address, msg_type: &str, body: &T) {
        self.rt.send(to, msg_type, msg::encode(body));
    }

    pub fn reply<T: Serialize>(&self, req: &Envelope, body: &Result<T, DbError>) {
        self.rt.reply(req, &msg::reply_type(&req.msg_type), msg::result_body(body));
    }

    /// Request/response with a timeout; a missing reply becomes `Timeout`.
    pub async fn rpc<T: DeserializeOwned, B: Serialize>(
        &self,
        to: &Address,
        msg_type: &str,
        body: &B,
        timeout_ms: u64,
    ) -> Result<T, DbError> {
        match self.rt.call(to, msg_type, msg::encode(body), timeout_ms).await {
            Some(env) => msg::decode_reply(&env),
            None => Err(DbError::new(ErrorKind::Timeout, format!("{msg_type} to {to} timed out"))),
        }
    }

    /// Starts a request now; the returned future resolves to its reply.
    pub fn start_rpc<T: DeserializeOwned, B: Serialize>(
        &self,
        to: &Address,
        msg_type: &str,
        body: &B,
        timeout_ms: u64,
    ) -> impl core::future::Future<Output = Result<T, DbError>> + '_ {
        let fut = self.rt.call(to, msg_type, msg::encode(body), timeout_ms);
        let (to, msg_type) = (to.clone(), String::from(msg_type));
        async move {
            match fut.await {
                Some(env) => msg::decode_reply(&env),
                None => Err(DbError::new(ErrorKind::Timeout, format!("{msg_type} to {to} timed out"))),
            }
        }
    }

    pub fn spawn(&self, f: impl core::future::Future<Output = ()> + 'static) {
        self.rt.spawn(f);
    }

    pub async fn sleep(&self, ms: u64) {
        self.rt.sleep(ms).await
    }
}

/// Snapshot of one instance for status reports and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub addr: Address,
    pub joined: bool,
    pub successors: Vec<Address>,
    pub predecessor: Option<Address>,
    pub keeper: bool,
    pub catalog: Option<SystemTableState>,
    pub pointer: Option<PointerRecord>,
    pub managers: BTreeMap<String, TableManagerState>,
    pub replicas: BTreeMap<String, u64>,
    pub score: f64,
}

pub struct Node {
    rt: Rc<Rt>,
    st: Rc<RefCell<NodeState>>,
    runner: Runner,
}

impl Node {
    /// Boots an instance. Without `bootstrap` it forms a new ring and creates
    /// the System Table; otherwise it joins through `bootstrap`. Replicas
    /// already on `disk` are recovered by log replay before anything else.
    pub fn start(
        addr: Address,
        cfg: ClusterConfig,
        mut disk: Box<dyn Disk>,
        bootstrap: Option<Address>,
        sample: ResourceSample,
        now: u64,
    ) -> Node {
        let mut replicas = BTreeMap::new();
        let mut recovery_errors = Vec::new();
        for table in stored_tables(&*disk).unwrap_or_default() {
            match ReplicaStore::recover(&mut *disk, &table) {
                Ok(store) => {
                    replicas.insert(table, store);
                }
                Err(e) => recovery_errors.push(format!("{table}: {e}")),
            }
        }
        let meta = json!({"address": addr.as_str(), "node_id": node_id(addr.as_str(), cfg.m).0});
        let _ = disk.write_atomic("meta.json", canonical_json(&meta).as_bytes());
        let seed = cfg.seed ^ node_id(addr.as_str(), 64).0;
        let state = NodeState {
            addr: addr.clone(),
            ring: None,
            disk,
            replicas,
            staged: BTreeMap::new(),
            tms: BTreeMap::new(),
            tm_copies: BTreeMap::new(),
            keeper: None,
            st_copy: None,
            pointer: None,
            cache: BTreeMap::new(),
            keeper_hint: None,
            sample,
            failed: BTreeSet::new(),
            contacts: BTreeSet::new(),
            booted: false,
            leaving: false,
            departed: false,
            active_txns: 0,
            txn_counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg,
        };
        let mut node = Node { rt: Rc::new(Rt::new(addr, now)), st: Rc::new(RefCell::new(state)), runner: Runner::new() };
        let ctx = node.ctx();
        {
            let mut st = node.st.borrow_mut();
            let names: Vec<String> = st.disk.list_dir("tm").unwrap_or_default();
            for file in names {
                if let Some(table) = file.strip_suffix(".json") {
                    if let Some(state) = st.load_json::<TableManagerState>(&tm_path(table)) {
                        st.tm_copies.insert(table.into(), state);
                    }
                }
            }
            if let Some(p) = st.load_json::<PointerRecord>(POINTER_PATH) {
                st.pointer = Some(p);
            }
        }
        for e in recovery_errors {
            ctx.event("recovery_error", json!({ "detail": e }));
        }
        ctx.spawn(ring::boot(ctx.clone(), bootstrap));
        node.runner.run(&node.rt);
        node
    }

    fn ctx(&self) -> Ctx {
        Ctx { rt: self.rt.clone(), st: self.st.clone() }
    }

    pub fn addr(&self) -> &Address {
        &self.rt.me
    }

    pub fn handle(&mut self, env: Envelope, now: u64) {
        self.rt.set_now(now);
        if self.st.borrow().departed {
            return;
        }
        {
            let mut st = self.st.borrow_mut();
            if st.failed.remove(&env.from) {
                self.rt.event("peer_returned", json!({ "addr": env.from.as_str() }));
            }
            if !matches!(env.msg_type.as_str(), msg::SQL_EXEC | msg::ADMIN_LEAVE | msg::ADMIN_STATUS | msg::ADMIN_KILL) {
                st.contacts.insert(env.from.clone());
            }
        }
        if env.reply_to().is_some() {
            self.rt.accept_reply(env);
        } else {
            dispatch(&self.ctx(), env);
        }
        self.runner.run(&self.rt);
    }

    pub fn tick(&mut self, now: u64) {
        self.rt.set_now(now);
        if self.st.borrow().departed {
            return;
        }
        manager::expire_locks(&self.ctx());
        self.runner.run(&self.rt);
    }

    pub fn next_deadline(&self) -> Option<u64> {
        let st = self.st.borrow();
        if st.departed {
            return None;
        }
        let wait = st.cfg.lock_wait_ms;
        let now = self.rt.now();
        let locks = st.tms.values().filter_map(|m| m.locks.next_expiry(wait)).filter(|t| *t > now).min();
        match (self.rt.next_deadline(), locks) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn take_outbox(&mut self) -> Vec<Envelope> {
        self.rt.take_outbox()
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        self.rt.take_events()
    }

    /// Replaces the resource sample and publishes it right away.
    pub fn set_sample(&mut self, sample: ResourceSample) {
        self.st.borrow_mut().sample = sample;
        let ctx = self.ctx();
        ctx.spawn(coord::publish_once(ctx.clone()));
        self.runner.run(&self.rt);
    }

    /// Replaces the resource sample; the periodic publisher picks it up.
    pub fn refresh_sample(&mut self, sample: ResourceSample) {
        self.st.borrow_mut().sample = sample;
    }

    pub fn has_departed(&self) -> bool {
        self.st.borrow().departed
    }

    pub fn is_booted(&self) -> bool {
        self.st.borrow().booted
    }

    pub fn task_count(&self) -> usize {
        self.runner.len()
    }

    /// Stops all work, as if the process were killed. Disk contents stay.
    pub fn halt(&mut self) {
        self.runner.clear();
        self.rt.clear_waits();
        self.st.borrow_mut().departed = true;
    }

    pub fn status(&self) -> NodeStatus {
        status_of(&self.st.borrow())
    }

    pub fn replica(&self, table: &str) -> Option<ReplicaStore> {
        self.st.borrow().replicas.get(table).cloned()
    }

    /// Tables with a prepared but not yet decided write on this instance.
    pub fn staged_tables(&self) -> Vec<String> {
        self.st.borrow().staged.keys().cloned().collect()
    }

    pub fn replica_tables(&self) -> Vec<String> {
        self.st.borrow().replicas.keys().cloned().collect()
    }

    pub fn manager(&self, table: &str) -> Option<TableManagerState> {
        self.st.borrow().tms.get(table).map(|m| m.state.clone())
    }

    /// Holders and queued requests of a hosted manager's lock table.
    pub fn lock_holders(&self, table: &str) -> Vec<(String, String)> {
        let st = self.st.borrow();
        st.tms
            .get(table)
            .map(|m| m.locks.holders().map(|(t, mode)| (String::from(t), String::from(mode.as_str()))).collect())
            .unwrap_or_default()
    }
}

pub(crate) fn status_of(st: &NodeState) -> NodeStatus {
    NodeStatus {
        addr: st.addr.clone(),
        joined: st.ring.is_some(),
        successors: st.successors(),
        predecessor: st.ring.as_ref().and_then(|r| r.predecessor.as_ref().map(|p| p.addr.clone())),
        keeper: st.keeper.is_some(),
        catalog: st.keeper.as_ref().map(|k| k.st.clone()),
        pointer: st.pointer.clone(),
        managers: st.tms.iter().map(|(t, m)| (t.clone(), m.state.clone())).collect(),
        replicas: st.replicas.iter().map(|(t, r)| (t.clone(), r.applied_seq)).collect(),
        score: score(&st.sample, &st.cfg.monitor.weights).map(|s| s.0).unwrap_or(0.0),
    }
}

fn dispatch(ctx: &Ctx, env: Envelope) {
    use msg::*;
    match env.msg_type.as_str() {
        FIND_SUCC | GET_PRED | NOTIFY | PING | XFER_META | RING_LEAVE => ring::handle(ctx, env),
        ST_REGISTER | ST_UPDATE | ST_UNREGISTER | ST_LOOKUP | ST_LIST | ST_SYNC | ST_PTR_GET | ST_PTR_PUT
        | ST_RECOVER | ST_NODE_FAILED | ST_HANDOFF => catalog::handle(ctx, env),
        TM_LOCK | TM_RELEASE | TM_UPDATE | TM_META_SYNC | TM_META_DROP | TM_RECOVER | TM_NODE_FAILED
        | TM_HANDOFF | TM_REPLICA_LEAVE | TM_REJOIN | TM_DROP => manager::handle(ctx, env),
        TM_PREPARE | TM_COMMIT | TM_ABORT | TM_COPY_REQ | REPLICA_CREATE | REPLICA_INSTALL | REPLICA_DROP
        | REPLICA_FETCH | REPLICA_STATUS => replica::handle(ctx, env),
        SQL_EXEC | EXEC_QUERY => coord::handle(ctx, env),
        ADMIN_LEAVE => leave::handle(ctx, env),
        ADMIN_STATUS => {
            let status = status_of(&ctx.st.borrow());
            ctx.reply(&env, &Ok::<_, DbError>(status));
        }
        other => {
            let e = DbError::new(ErrorKind::Unsupported, format!("unknown message type {other}"));
            ctx.reply::<msg::Empty>(&env, &Err(e));
        }
    }
}

pub(crate) fn empty_ok() -> Result<msg::Empty, DbError> {
    Ok(msg::Empty {})
}
