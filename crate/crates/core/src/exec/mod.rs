//! Query planning, join evaluation and per-transaction bookkeeping used by
//! the coordinator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{DbError, ErrorKind};
use crate::monitor::AvailabilityScore;
use crate::sql::{Atom, CmpOp, ColumnRef, Projection, Select, Statement, Value};
use crate::storage::{Row, TableSchema};
use crate::tablemgr::{choose_read_replica, AccessStats, LockMode};
use crate::wire::Address;

#[cfg(test)]
mod tests;

pub const ROW_SIZE_BYTES: u64 = 64;
pub const DEFAULT_ALPHA: f64 = 0.7;

/// What a table manager reports about its table when it grants a lock.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableInfo {
    pub replicas: Vec<Address>,
    pub row_count: u64,
    pub stats: AccessStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub addr: Address,
    pub locality: f64,
    pub score: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub executor: Address,
    pub table_sources: BTreeMap<String, Address>,
    pub lock_set: Vec<(String, LockMode)>,
    pub candidates: Vec<Candidate>,
}

/// Locks a statement needs, ordered by table name.
pub fn lock_set(stmt: &Statement) -> Vec<(String, LockMode)> {
    let mode = if stmt.is_write() || matches!(stmt, Statement::DropTable { .. }) {
        LockMode::Write
    } else {
        LockMode::Read
    };
    let mut tables: Vec<String> = stmt.tables().into_iter().map(String::from).collect();
    tables.sort();
    tables.dedup();
    tables.into_iter().map(|t| (t, mode)).collect()
}

/// Chooses the executing instance and the replica each table is read from.
///
/// Candidates are the replica holders of the referenced tables plus the
/// caller. Each is rated `alpha * locality + (1 - alpha) * score`, where
/// locality is the fraction of referenced bytes (row count times a fixed
/// row size) held locally; when every table is empty the fraction of tables
/// is used instead. Ties go to higher locality, then the smallest address.
pub fn plan_select(
    select: &Select,
    tables: &BTreeMap<String, TableInfo>,
    scores: &BTreeMap<Address, AvailabilityScore>,
    caller: &Address,
    alpha: f64,
) -> Result<QueryPlan, DbError> {
    let mut referenced: Vec<(&str, &TableInfo)> = Vec::new();
    for t in &select.tables {
        let info = tables
            .get(t)
            .ok_or_else(|| DbError::new(ErrorKind::NoSuchTable, format!("no such table {t}")))?;
        if !referenced.iter().any(|(n, _)| *n == t.as_str()) {
            referenced.push((t.as_str(), info));
        }
    }
    let total_bytes: u64 = referenced.iter().map(|(_, i)| i.row_count * ROW_SIZE_BYTES).sum();
    let weight = |info: &TableInfo| -> f64 {
        if total_bytes == 0 {
            1.0 / referenced.len() as f64
        } else {
            (info.row_count * ROW_SIZE_BYTES) as f64 / total_bytes as f64
        }
    };

    let mut addrs: Vec<&Address> = referenced.iter().flat_map(|(_, i)| i.replicas.iter()).collect();
    addrs.push(caller);
    addrs.sort();
    addrs.dedup();

    let candidates: Vec<Candidate> = addrs
        .into_iter()
        .map(|a| {
            let locality: f64 = referenced
                .iter()
                .filter(|(_, i)| i.replicas.contains(a))
                .map(|(_, i)| weight(i))
                .sum();
            let score = scores.get(a).map(|s| s.0).unwrap_or(0.0);
            Candidate { addr: a.clone(), locality, score, combined: alpha * locality + (1.0 - alpha) * score }
        })
        .collect();

    let mut best = &candidates[0];
    for c in &candidates[1..] {
        if c.combined > best.combined || (c.combined == best.combined && c.locality > best.locality) {
            best = c;
        }
    }
    let executor = best.addr.clone();

    let mut table_sources = BTreeMap::new();
    for (name, info) in &referenced {
        let src = if info.replicas.contains(&executor) {
            Some(executor.clone())
        } else {
            choose_read_replica(&info.replicas, &info.stats, scores)
        };
        let src = src.ok_or_else(|| DbError::new(ErrorKind::TableUnavailable, format!("table {name} has no replica")))?;
        table_sources.insert(String::from(*name), src);
    }

    Ok(QueryPlan {
        executor,
        table_sources,
        lock_set: lock_set(&Statement::Select(select.clone())),
        candidates,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

/// Input to the evaluator: a table's schema and its rows in id order.
pub type Materialized = BTreeMap<String, (TableSchema, Vec<Row>)>;

fn bind_error(msg: String) -> DbError {
    DbError::new(ErrorKind::Bind, msg)
}

/// Resolves a column to (table position in FROM, column index).
fn resolve(select: &Select, data: &Materialized, col: &ColumnRef) -> Result<(usize, usize), DbError> {
    let mut found = None;
    for (ti, t) in select.tables.iter().enumerate() {
        if col.table.as_deref().is_some_and(|q| q != t) {
            continue;
        }
        let (schema, _) = &data[t];
        if let Some(ci) = schema.column_index(&col.column) {
            if found.is_some() {
                return Err(bind_error(format!("ambiguous column {col}")));
            }
            found = Some((ti, ci));
        }
    }
    found.ok_or_else(|| bind_error(format!("unknown column {col}")))
}

/// Evaluates a SELECT over materialized tables. Single-table filters run
/// before the join; the join is a hash join on the first equality atom and
/// output is ordered by (left row id, right row id).
pub fn evaluate_select(select: &Select, data: &Materialized) -> Result<ResultSet, DbError> {
    for t in &select.tables {
        if !data.contains_key(t) {
            return Err(DbError::new(ErrorKind::NoSuchTable, format!("no such table {t}")));
        }
    }
    let ntables = select.tables.len();
    let mut filters: Vec<Vec<(usize, CmpOp, &Value)>> = alloc::vec![Vec::new(); ntables];
    let mut joins: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for atom in select.predicate.iter().flat_map(|p| p.atoms.iter()) {
        match atom {
            Atom::Compare { column, op, value } => {
                let (ti, ci) = resolve(select, data, column)?;
                let ty = data[&select.tables[ti]].0.columns[ci].ty;
                if value.column_type() != ty {
                    return Err(bind_error(format!("type mismatch for column {column}")));
                }
                filters[ti].push((ci, *op, value));
            }
            Atom::Join { left, right } => {
                let (l, r) = (resolve(select, data, left)?, resolve(select, data, right)?);
                let (lt, rt) = (&data[&select.tables[l.0]].0, &data[&select.tables[r.0]].0);
                if lt.columns[l.1].ty != rt.columns[r.1].ty {
                    return Err(bind_error(format!("join {left} = {right} compares different types")));
                }
                joins.push(if l.0 <= r.0 { (l, r) } else { (r, l) });
            }
        }
    }

    let filtered: Vec<Vec<&Row>> = select
        .tables
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            data[t]
                .1
                .iter()
                .filter(|row| filters[ti].iter().all(|(ci, op, v)| op.holds(row.values[*ci].cmp(v))))
                .collect()
        })
        .collect();

    let tuples: Vec<Vec<&Row>> = if ntables == 1 {
        filtered[0].iter().map(|r| alloc::vec![*r]).collect()
    } else {
        let cross: Vec<_> = joins.iter().filter(|(l, r)| l.0 != r.0).collect();
        let same: Vec<_> = joins.iter().filter(|(l, r)| l.0 == r.0).collect();
        let mut out = Vec::new();
        if let Some(((_, lc), (_, rc))) = cross.first().map(|j| **j) {
            let mut index: BTreeMap<&Value, Vec<&Row>> = BTreeMap::new();
            for r in &filtered[1] {
                index.entry(&r.values[rc]).or_default().push(r);
            }
            for l in &filtered[0] {
                for r in index.get(&l.values[lc]).map(Vec::as_slice).unwrap_or_default() {
                    out.push(alloc::vec![*l, *r]);
                }
            }
        } else {
            for l in &filtered[0] {
                for r in &filtered[1] {
                    out.push(alloc::vec![*l, *r]);
                }
            }
        }
        out.retain(|tuple| {
            cross.iter().chain(same.iter()).all(|((lt, lc), (rt, rc))| tuple[*lt].values[*lc] == tuple[*rt].values[*rc])
        });
        out
    };

    let qualified = ntables > 1;
    let name = |ti: usize, ci: usize| {
        let t = &select.tables[ti];
        let c = &data[t].0.columns[ci].name;
        if qualified { format!("{t}.{c}") } else { c.clone() }
    };
    let outputs: Vec<(usize, usize)> = match &select.projection {
        Projection::All => select
            .tables
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..data[t].0.columns.len()).map(move |ci| (ti, ci)))
            .collect(),
        Projection::Columns(cols) => cols.iter().map(|c| resolve(select, data, c)).collect::<Result<_, _>>()?,
    };
    Ok(ResultSet {
        columns: outputs.iter().map(|(t, c)| name(*t, *c)).collect(),
        rows: tuples
            .iter()
            .map(|tuple| outputs.iter().map(|(t, c)| tuple[*t].values[*c].clone()).collect())
            .collect(),
    })
}

/// Splits a leading `EXPLAIN` keyword off a statement.
pub fn split_explain(text: &str) -> (bool, &str) {
    let trimmed = text.trim_start();
    let head = trimmed.get(..7);
    if head.is_some_and(|h| h.eq_ignore_ascii_case("explain"))
        && trimmed[7..].starts_with(|c: char| c.is_whitespace())
    {
        (true, &trimmed[7..])
    } else {
        (false, text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TxnState {
    Active,
    Committing,
    Committed,
    Aborted,
}

/// Coordinator-side record of one transaction's locks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnContext {
    pub txn_id: String,
    pub locks_held: Vec<(String, LockMode)>,
    pub state: TxnState,
    released: bool,
}

impl TxnContext {
    pub fn new(txn_id: String) -> Self {
        TxnContext { txn_id, locks_held: Vec::new(), state: TxnState::Active, released: false }
    }

    /// Records a granted lock. Refuses once any lock has been released.
    pub fn note_acquired(&mut self, table: &str, mode: LockMode) -> Result<(), DbError> {
        if self.released {
            return Err(DbError::new(ErrorKind::Internal, "lock acquired after release"));
        }
        self.locks_held.push((table.into(), mode));
        Ok(())
    }

    /// Moves to a final state; only then may locks be released.
    pub fn finish(&mut self, committed: bool) -> Vec<(String, LockMode)> {
        self.state = if committed { TxnState::Committed } else { TxnState::Aborted };
        self.released = true;
        core::mem::take(&mut self.locks_held)
    }
}
