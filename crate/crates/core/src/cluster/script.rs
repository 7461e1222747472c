//! Timed fault-injection scripts: JSON lines of `{at, op, ...}`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_convergence, ClusterSnapshot, EventLog, SimCluster, CLIENT_TIMEOUT_MS};
use crate::config::ClusterConfig;
use crate::error::{DbError, ErrorKind};
use crate::monitor::ResourceSample;
use crate::node::msg::SqlResult;
use crate::sql::Value;
use crate::wire::Address;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptOp {
    /// Logical time in ms at which the op runs; never earlier than the
    /// previous op finished.
    #[serde(default)]
    pub at: u64,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    StartNode {
        node: String,
        #[serde(default)]
        bootstrap: Option<String>,
    },
    Sql {
        node: String,
        sql: String,
        #[serde(default)]
        expect: Option<Expect>,
        /// When false the statement is submitted and the script moves on;
        /// its answer is collected before the script ends.
        #[serde(default = "yes")]
        wait: bool,
    },
    Crash {
        node: String,
    },
    Leave {
        node: String,
        #[serde(default)]
        expect_error: Option<ErrorKind>,
    },
    Partition {
        groups: Vec<Vec<String>>,
    },
    Heal {},
    SetResources {
        node: String,
        cpu_idle: f64,
        mem_free: u64,
        mem_total: u64,
        disk_free: u64,
        disk_total: u64,
    },
    Assert {
        #[serde(flatten)]
        check: Check,
    },
}

fn yes() -> bool {
    true
}

/// Expected outcome of a `sql` op. Unset fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Expect {
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default)]
    pub rows: Option<Vec<Vec<Value>>>,
    #[serde(default)]
    pub affected: Option<u64>,
    #[serde(default)]
    pub error: Option<ErrorKind>,
    /// For EXPLAIN: the chosen executor.
    #[serde(default)]
    pub executor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    ReplicaCount { table: String, expect: usize },
    Converged {},
    TableExists { table: String, #[serde(default = "yes")] expect: bool },
    CommitSeq { table: String, expect: u64 },
    Keeper { expect: String },
    Members { expect: Vec<String> },
    EventCount {
        event: String,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpResult {
    pub index: usize,
    pub result: Result<SqlResult, DbError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptOutcome {
    pub log: EventLog,
    pub snapshot: ClusterSnapshot,
    /// Answers of `sql` and `leave` ops without an expectation.
    pub results: Vec<OpResult>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScriptError {
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("op {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("assertion failed at op {index}: {message}")]
    Assertion { index: usize, message: String, log: EventLog },
}

/// Parses JSON lines; blank lines are skipped.
pub fn parse_script(text: &str) -> Result<Vec<ScriptOp>, ScriptError> {
    let mut ops = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let op: ScriptOp =
            serde_json::from_str(line).map_err(|e| ScriptError::Parse { line: i + 1, message: format!("{e}") })?;
        ops.push(op);
    }
    Ok(ops)
}

fn check_expect(r: &Result<SqlResult, DbError>, e: &Expect) -> Result<(), String> {
    match (r, e.error) {
        (Err(err), Some(k)) if err.kind == k => return Ok(()),
        (Err(err), _) => return Err(format!("statement failed: {err}")),
        (Ok(_), Some(k)) => return Err(format!("expected {k:?}, statement succeeded")),
        (Ok(_), None) => {}
    }
    let res = r.as_ref().expect("checked above");
    if let Some(c) = &e.columns {
        if *c != res.columns {
            return Err(format!("columns {:?}, expected {c:?}", res.columns));
        }
    }
    if let Some(rows) = &e.rows {
        if *rows != res.rows {
            return Err(format!("rows {:?}, expected {rows:?}", res.rows));
        }
    }
    if let Some(a) = e.affected {
        if res.affected != Some(a) {
            return Err(format!("affected {:?}, expected {a}", res.affected));
        }
    }
    if let Some(x) = &e.executor {
        let got = res.plan.as_ref().map(|p| p.executor.as_str());
        if got != Some(x.as_str()) {
            return Err(format!("executor {got:?}, expected {x}"));
        }
    }
    Ok(())
}

fn evaluate(c: &SimCluster, check: &Check) -> Result<(), String> {
    match check {
        Check::ReplicaCount { table, expect } => {
            let (_, state) = c.manager(table).ok_or_else(|| format!("no live manager for {table}"))?;
            if state.replicas.len() != *expect {
                return Err(format!("{table} has replicas {:?}, expected {expect}", state.replicas));
            }
            Ok(())
        }
        Check::Converged {} => check_convergence(c),
        Check::TableExists { table, expect } => {
            let exists = c.catalog_entry(table).is_some();
            if exists != *expect {
                return Err(format!("{table} exists: {exists}, expected {expect}"));
            }
            Ok(())
        }
        Check::CommitSeq { table, expect } => {
            let (_, state) = c.manager(table).ok_or_else(|| format!("no live manager for {table}"))?;
            if state.commit_seq != *expect {
                return Err(format!("{table} commit_seq {}, expected {expect}", state.commit_seq));
            }
            Ok(())
        }
        Check::Keeper { expect } => match c.keeper() {
            Some((a, _)) if a.as_str() == expect => Ok(()),
            other => Err(format!("keeper {:?}, expected {expect}", other.map(|(a, _)| a))),
        },
        Check::Members { expect } => {
            let mut want: Vec<Address> = expect.iter().map(Address::new).collect();
            want.sort();
            let got = c.live();
            if got != want {
                return Err(format!("live members {got:?}, expected {want:?}"));
            }
            for a in &got {
                let st = c.node(a.as_str()).expect("live").status();
                if !st.joined {
                    return Err(format!("{a} has not joined"));
                }
                for s in &st.successors {
                    if !want.contains(s) {
                        return Err(format!("{a} lists {s} as a successor"));
                    }
                }
            }
            Ok(())
        }
        Check::EventCount { event, min, max } => {
            let n = c.log().count(event);
            if min.is_some_and(|m| n < m) || max.is_some_and(|m| n > m) {
                return Err(format!("{n} {event} events, expected between {min:?} and {max:?}"));
            }
            Ok(())
        }
    }
}

/// Runs a script on a fresh simulated cluster.
pub fn run_script(script: &[ScriptOp], cfg: ClusterConfig) -> Result<ScriptOutcome, ScriptError> {
    let mut c = SimCluster::new(cfg).map_err(|e| ScriptError::Invalid { index: 0, message: e.message })?;
    let mut results = Vec::new();
    let mut pending: Vec<(usize, u64, Option<Expect>)> = Vec::new();
    let mut last_at = 0;
    let fail = |c: &SimCluster, index: usize, message: String| ScriptError::Assertion { index, message, log: c.log().clone() };
    for (index, step) in script.iter().enumerate() {
        if step.at < last_at {
            return Err(ScriptError::Invalid { index, message: format!("time {} is before {last_at}", step.at) });
        }
        last_at = step.at;
        c.run_until(step.at);
        match &step.op {
            Op::StartNode { node, bootstrap } => c
                .start_node(node, bootstrap.as_deref())
                .map_err(|e| ScriptError::Invalid { index, message: e.message })?,
            Op::Sql { node, sql, expect, wait } => {
                let ticket = c.submit(node, sql);
                if !*wait {
                    pending.push((index, ticket, expect.clone()));
                    continue;
                }
                let r = c.wait_result(ticket, CLIENT_TIMEOUT_MS);
                if let Some(e) = expect {
                    check_expect(&r, e).map_err(|m| fail(&c, index, m))?;
                }
                results.push(OpResult { index, result: r });
            }
            Op::Crash { node } => c.crash(node).map_err(|e| ScriptError::Invalid { index, message: e.message })?,
            Op::Leave { node, expect_error } => {
                let r = c.leave(node);
                match (expect_error, r) {
                    (Some(k), Err(e)) if e.kind == *k => {}
                    (Some(k), r) => return Err(fail(&c, index, format!("leave gave {r:?}, expected {k:?}"))),
                    (None, r) => results.push(OpResult { index, result: r.map(|_| SqlResult::default()) }),
                }
            }
            Op::Partition { groups } => c.partition(groups.clone()),
            Op::Heal {} => c.heal(),
            Op::SetResources { node, cpu_idle, mem_free, mem_total, disk_free, disk_total } => {
                let sample = ResourceSample {
                    instance: Address::new(node.as_str()),
                    cpu_idle: *cpu_idle,
                    mem_free_bytes: *mem_free,
                    mem_total_bytes: *mem_total,
                    disk_free_bytes: *disk_free,
                    disk_total_bytes: *disk_total,
                    ts: c.now(),
                };
                c.set_resources(sample).map_err(|e| ScriptError::Invalid { index, message: e.message })?;
            }
            Op::Assert { check } => evaluate(&c, check).map_err(|m| fail(&c, index, m))?,
        }
    }
    for (index, ticket, expect) in pending {
        let r = c.wait_result(ticket, CLIENT_TIMEOUT_MS);
        if let Some(e) = &expect {
            check_expect(&r, e).map_err(|m| fail(&c, index, m))?;
        }
        results.push(OpResult { index, result: r });
    }
    results.sort_by_key(|r| r.index);
    Ok(ScriptOutcome { log: c.log().clone(), snapshot: c.snapshot(), results })
}
