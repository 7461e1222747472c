//! Checkers over a quiescent cluster and its event log.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{EventLog, SimCluster};
use crate::error::DbError;
use crate::exec::{evaluate_select, ResultSet};
use crate::sql::{parse, Statement};
use crate::storage::{LogEntry, ReplicaStore, TableSchema};

/// All replicas of every catalogued table are live, hold the manager's
/// commit sequence, and have byte-identical logs.
pub fn check_convergence(c: &SimCluster) -> Result<(), String> {
    let (_, catalog) = c.keeper().ok_or("no live keeper")?;
    for (table, entry) in &catalog.entries {
        let tm = c
            .node(entry.tm_address.as_str())
            .ok_or_else(|| format!("manager of {table} at {} is not live", entry.tm_address))?;
        let state = tm.manager(table).ok_or_else(|| format!("{} does not host the manager of {table}", entry.tm_address))?;
        let mut reference: Option<(String, Vec<u8>)> = None;
        for r in &state.replicas {
            let node = c.node(r.as_str()).ok_or_else(|| format!("replica holder {r} of {table} is not live"))?;
            let rep = node.replica(table).ok_or_else(|| format!("{r} has no replica of {table}"))?;
            if rep.applied_seq != state.commit_seq {
                return Err(format!(
                    "replica of {table} at {r} is at {} but the manager is at {}",
                    rep.applied_seq, state.commit_seq
                ));
            }
            let bytes = rep.log_bytes();
            match &reference {
                None => reference = Some((r.as_str().into(), bytes)),
                Some((first, b)) if *b != bytes => {
                    return Err(format!("replicas of {table} at {first} and {r} differ"));
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

fn detail_str<'a>(v: &'a serde_json::Value, key: &str) -> &'a str {
    v.get(key).and_then(|x| x.as_str()).unwrap_or("")
}

/// Conflicting locks on one table at one manager never overlap.
pub fn check_lock_safety(log: &EventLog) -> Result<(), String> {
    // (manager, table) -> txn -> mode
    let mut open: BTreeMap<(String, String), BTreeMap<String, String>> = BTreeMap::new();
    for (i, r) in log.records.iter().enumerate() {
        match r.kind.as_str() {
            "lock_grant" => {
                let key = (r.node.clone(), detail_str(&r.detail, "table").into());
                let txn = detail_str(&r.detail, "txn");
                let mode = detail_str(&r.detail, "mode");
                let holders = open.entry(key.clone()).or_default();
                for (other, m) in holders.iter() {
                    if other != txn && (m == "WRITE" || mode == "WRITE") {
                        return Err(format!(
                            "record {i}: {txn} granted {mode} on {} at {} while {other} holds {m}",
                            key.1, key.0
                        ));
                    }
                }
                holders.insert(txn.into(), mode.into());
            }
            "lock_release" => {
                let key = (r.node.clone(), detail_str(&r.detail, "table").into());
                if let Some(h) = open.get_mut(&key) {
                    h.remove(detail_str(&r.detail, "txn"));
                }
            }
            "crash" => open.retain(|(n, _), _| *n != r.node),
            "tm_handed_off" | "table_dropped" => {
                open.remove(&(r.node.clone(), detail_str(&r.detail, "table").into()));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Precedence graph over committed transactions: an edge `a -> b` when
/// both locked the same table in conflicting modes and `a` was granted
/// first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConflictGraph {
    pub txns: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
}

impl ConflictGraph {
    /// A cycle if there is one (Kahn's algorithm leaves it unconsumed).
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        let mut indeg: BTreeMap<&str, usize> = self.txns.iter().map(|t| (t.as_str(), 0)).collect();
        for (_, b) in &self.edges {
            *indeg.entry(b.as_str()).or_default() += 1;
        }
        let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(t, _)| *t).collect();
        let mut seen = 0;
        while let Some(t) = ready.pop() {
            seen += 1;
            for (a, b) in &self.edges {
                if a == t {
                    let d = indeg.get_mut(b.as_str()).expect("node");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(b.as_str());
                    }
                }
            }
        }
        if seen == indeg.len() {
            None
        } else {
            Some(indeg.into_iter().filter(|(_, d)| *d > 0).map(|(t, _)| String::from(t)).collect())
        }
    }

    pub fn is_acyclic(&self) -> bool {
        self.find_cycle().is_none()
    }
}

pub fn conflict_graph(log: &EventLog) -> ConflictGraph {
    let committed: BTreeSet<String> = log
        .of_kind("txn_end")
        .filter(|r| r.detail.get("committed").and_then(|v| v.as_bool()) == Some(true))
        .map(|r| detail_str(&r.detail, "txn").into())
        .collect();
    let mut per_table: BTreeMap<String, Vec<(String, bool)>> = BTreeMap::new();
    for r in log.of_kind("lock_grant") {
        let txn = detail_str(&r.detail, "txn");
        if !committed.contains(txn) {
            continue;
        }
        let write = detail_str(&r.detail, "mode") == "WRITE";
        per_table.entry(detail_str(&r.detail, "table").into()).or_default().push((txn.into(), write));
    }
    let mut g = ConflictGraph { txns: committed, edges: BTreeSet::new() };
    for grants in per_table.values() {
        for (i, (a, wa)) in grants.iter().enumerate() {
            for (b, wb) in &grants[i + 1..] {
                if a != b && (*wa || *wb) {
                    g.edges.insert((a.clone(), b.clone()));
                }
            }
        }
    }
    g
}

/// A committed write transaction as recorded by its table manager.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteTxn {
    pub txn: String,
    pub table: String,
    pub stmts: Vec<String>,
}

/// Committed writes in commit order.
pub fn committed_writes(log: &EventLog) -> Vec<WriteTxn> {
    log.of_kind("commit")
        .map(|r| WriteTxn {
            txn: detail_str(&r.detail, "txn").into(),
            table: detail_str(&r.detail, "table").into(),
            stmts: r
                .detail
                .get("stmts")
                .and_then(|v| v.as_array())
                .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
                .unwrap_or_default(),
        })
        .collect()
}

/// Single-node reference engine: each table is one in-memory store and
/// statements apply in call order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefDb {
    pub tables: BTreeMap<String, ReplicaStore>,
}

impl RefDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Executes one statement. SELECT returns its result; other statements
    /// return an empty result.
    pub fn execute(&mut self, text: &str) -> Result<ResultSet, DbError> {
        match parse(text)? {
            Statement::CreateTable { name, columns, .. } => {
                self.tables.insert(name.clone(), ReplicaStore::empty(TableSchema::new(&name, columns)?));
                Ok(ResultSet::default())
            }
            Statement::DropTable { name } => {
                self.tables.remove(&name);
                Ok(ResultSet::default())
            }
            Statement::Select(sel) => {
                let mut data = BTreeMap::new();
                for t in &sel.tables {
                    if let Some(s) = self.tables.get(t) {
                        data.insert(t.clone(), (s.schema.clone(), s.scan(None)?));
                    }
                }
                evaluate_select(&sel, &data)
            }
            stmt => {
                let table = String::from(stmt.tables()[0]);
                let store = self.tables.get_mut(&table).ok_or_else(|| {
                    DbError::new(crate::error::ErrorKind::NoSuchTable, format!("no such table {table}"))
                })?;
                let entry = LogEntry { seq: store.applied_seq + 1, stmt: format!("{stmt}"), txn: String::new() };
                store.apply_in_memory(&entry)?;
                Ok(ResultSet::default())
            }
        }
    }

    /// Rows of every table, keyed by table, for state comparison.
    pub fn state(&self) -> BTreeMap<String, Vec<(u64, Vec<crate::sql::Value>)>> {
        self.tables
            .iter()
            .map(|(t, s)| (t.clone(), s.rows.iter().map(|(id, v)| (*id, v.clone())).collect()))
            .collect()
    }
}

/// Searches every serial order of `txns` applied to `initial` for one that
/// ends in `target`. Returns the first such order (indices into `txns`).
/// Statements that fail in a given order abort their transaction.
pub fn serial_witness(
    initial: &RefDb,
    txns: &[WriteTxn],
    target: &BTreeMap<String, Vec<(u64, Vec<crate::sql::Value>)>>,
) -> Option<Vec<usize>> {
    assert!(txns.len() <= 8, "brute force is limited to 8 transactions");
    let mut order: Vec<usize> = (0..txns.len()).collect();
    let mut found = None;
    permute(&mut order, 0, &mut |perm| {
        let mut db = initial.clone();
        for &i in perm {
            let snapshot = db.clone();
            if txns[i].stmts.iter().any(|s| db.execute(s).is_err()) {
                db = snapshot;
            }
        }
        if &db.state() == target {
            found = Some(perm.to_vec());
            true
        } else {
            false
        }
    });
    found
}

/// Visits permutations of `v[k..]`; stops when `f` returns true.
fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize]) -> bool) -> bool {
    if k == v.len() {
        return f(v);
    }
    for i in k..v.len() {
        v.swap(k, i);
        if permute(v, k + 1, f) {
            return true;
        }
        v.swap(k, i);
    }
    false
}
