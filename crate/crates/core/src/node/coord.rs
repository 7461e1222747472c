//! Query coordination on the submitting instance: resolve managers, lock in
//! table-name order, plan, ship to the executor, release. Also the resource
//! monitor's publication loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde_json::json;

use super::msg::*;
use super::{catalog, manager, Ctx};
use crate::error::{DbError, ErrorKind};
use crate::exec::{evaluate_select, lock_set, plan_select, split_explain, Materialized, TxnContext};
use crate::monitor::{create_monitor_sql, publish_statements, ranked, scores_from_rows, AvailabilityScore, MONITOR_TABLE};
use crate::sql::{parse, ColumnDef, Select, Statement};
use crate::storage::TableSchema;
use crate::tablemgr::{LockMode, TableManagerState};
use crate::wire::{Address, Envelope};

pub(super) fn handle(ctx: &Ctx, env: Envelope) {
    match env.msg_type.as_str() {
        SQL_EXEC => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.decode_body::<SqlExec>() {
                    Ok(req) => submit(&ctx, &req.text).await,
                    Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                };
                ctx.reply(&env, &r);
            });
        }
        EXEC_QUERY => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.decode_body::<ExecQuery>() {
                    Ok(req) => execute_plan(&ctx, req).await.map(|result| ExecResult { result }),
                    Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                };
                ctx.reply(&env, &r);
            });
        }
        _ => {}
    }
}

/// Runs a client statement, refusing new work while the instance leaves.
async fn submit(ctx: &Ctx, text: &str) -> Result<SqlResult, DbError> {
    let refused = ctx.with(|st| {
        if st.leaving || !st.booted {
            return true;
        }
        st.active_txns += 1;
        false
    });
    if refused {
        return Err(DbError::new(ErrorKind::NotReady, "instance is not accepting transactions"));
    }
    let r = execute_sql(ctx, text).await;
    ctx.with(|st| st.active_txns -= 1);
    r
}

/// Parses and runs one statement as its own transaction, retrying
/// retryable failures with seeded backoff.
pub(super) async fn execute_sql(ctx: &Ctx, text: &str) -> Result<SqlResult, DbError> {
    let (explain, body) = split_explain(text);
    let stmt = parse(body)?;
    if explain && !matches!(stmt, Statement::Select(_)) {
        return Err(DbError::new(ErrorKind::Unsupported, "EXPLAIN applies to SELECT only"));
    }
    let max = ctx.cfg().max_retries;
    let mut attempt = 0;
    loop {
        let (r, may_retry) = run_once(ctx, &stmt, explain).await;
        match r {
            Err(e) if may_retry && e.kind.is_retryable() && attempt < max => {
                for t in stmt.tables() {
                    catalog::invalidate(ctx, t);
                }
                let wait = ctx.with(|st| st.backoff(attempt));
                ctx.event("retry", json!({ "attempt": attempt + 1, "error": format!("{:?}", e.kind) }));
                ctx.sleep(wait).await;
                attempt += 1;
            }
            r => return r,
        }
    }
}

/// One attempt. The flag is false once an update may have been applied,
/// so that an in-doubt outcome is never retried.
async fn run_once(ctx: &Ctx, stmt: &Statement, explain: bool) -> (Result<SqlResult, DbError>, bool) {
    match stmt {
        Statement::Select(sel) => (run_select(ctx, sel, explain).await, true),
        Statement::Insert { table, .. } | Statement::Update { table, .. } | Statement::Delete { table, .. } => {
            let text = stmt.to_string();
            match run_write(ctx, table, alloc::vec![text]).await {
                Ok(affected) => (Ok(SqlResult { affected: Some(affected), ..Default::default() }), true),
                Err((e, retry)) => (Err(e), retry),
            }
        }
        Statement::CreateTable { name, columns, replication } => {
            (create_table(ctx, name, columns, *replication).await.map(|_| SqlResult::default()), true)
        }
        Statement::DropTable { name } => (drop_table(ctx, name).await.map(|_| SqlResult::default()), true),
    }
}

struct Held {
    table: String,
    tm: Address,
}

/// Acquires one lock at the table's manager.
async fn lock(ctx: &Ctx, txn: &mut TxnContext, held: &mut Vec<Held>, table: &str, mode: LockMode) -> Result<LockGrant, DbError> {
    let cfg = ctx.cfg();
    let entry = catalog::lookup_table(ctx, table, true).await?;
    let req = LockReq { table: table.into(), txn: txn.txn_id.clone(), mode };
    let timeout = cfg.lock_wait_ms + cfg.rpc_timeout_ms;
    match ctx.rpc::<LockGrant, _>(&entry.tm_address, TM_LOCK, &req, timeout).await {
        Ok(g) => {
            txn.note_acquired(table, mode)?;
            held.push(Held { table: table.into(), tm: entry.tm_address });
            Ok(g)
        }
        Err(e) => {
            if e.kind == ErrorKind::Timeout {
                // The request may still be granted later; make sure it is not left behind.
                ctx.send(&entry.tm_address, TM_RELEASE, &Release { table: table.into(), txn: txn.txn_id.clone(), routed: None, elapsed_ms: None });
            }
            if matches!(e.kind, ErrorKind::WrongManager | ErrorKind::Timeout | ErrorKind::NotReady) {
                catalog::invalidate(ctx, table);
            }
            Err(e)
        }
    }
}

fn txn_end(ctx: &Ctx, txn: &TxnContext, committed: bool) {
    ctx.event("txn_end", json!({ "txn": txn.txn_id.as_str(), "committed": committed }));
}

fn release_all(ctx: &Ctx, txn: &mut TxnContext, held: &[Held], committed: bool) {
    txn.finish(committed);
    txn_end(ctx, txn, committed);
    for h in held {
        ctx.send(&h.tm, TM_RELEASE, &Release { table: h.table.clone(), txn: txn.txn_id.clone(), routed: None, elapsed_ms: None });
    }
}

fn new_txn(ctx: &Ctx) -> TxnContext {
    TxnContext::new(ctx.with(|st| st.next_txn()))
}

/// Availability scores from the monitoring table, or none if it cannot be
/// read.
pub(super) async fn read_scores(ctx: &Ctx) -> BTreeMap<Address, AvailabilityScore> {
    let sel = Select { projection: crate::sql::Projection::All, tables: alloc::vec![MONITOR_TABLE.into()], predicate: None };
    let Ok(rs) = select_with_scores(ctx, &sel, false, BTreeMap::new()).await else { return BTreeMap::new() };
    let cfg = ctx.cfg();
    scores_from_rows(rs.rows.iter().map(Vec::as_slice), ctx.now(), cfg.monitor.staleness_ms, &cfg.monitor.weights)
}

async fn run_select(ctx: &Ctx, sel: &Select, explain: bool) -> Result<SqlResult, DbError> {
    let scores = if sel.tables.iter().any(|t| t == MONITOR_TABLE) { BTreeMap::new() } else { read_scores(ctx).await };
    select_with_scores(ctx, sel, explain, scores).await
}

async fn select_with_scores(
    ctx: &Ctx,
    sel: &Select,
    explain: bool,
    scores: BTreeMap<Address, AvailabilityScore>,
) -> Result<SqlResult, DbError> {
    let started = ctx.now();
    let cfg = ctx.cfg();
    let me = ctx.me();
    let mut txn = new_txn(ctx);
    let mut held = Vec::new();
    let mut infos = BTreeMap::new();
    let mut min_seqs = BTreeMap::new();
    for (table, mode) in lock_set(&Statement::Select(sel.clone())) {
        match lock(ctx, &mut txn, &mut held, &table, mode).await {
            Ok(g) => {
                min_seqs.insert(table.clone(), g.commit_seq);
                infos.insert(table, g.info);
            }
            Err(e) => {
                release_all(ctx, &mut txn, &held, false);
                return Err(e);
            }
        }
    }
    let plan = match plan_select(sel, &infos, &scores, &me, cfg.alpha) {
        Ok(p) => p,
        Err(e) => {
            release_all(ctx, &mut txn, &held, false);
            return Err(e);
        }
    };
    ctx.event(
        "plan",
        json!({ "txn": txn.txn_id.as_str(), "executor": plan.executor.as_str(), "sources": &plan.table_sources }),
    );
    if explain {
        release_all(ctx, &mut txn, &held, true);
        return Ok(SqlResult { plan: Some(plan), ..Default::default() });
    }
    let query = ExecQuery { query: sel.to_string(), plan: plan.clone(), min_seqs };
    let outcome = if plan.executor == me {
        execute_plan(ctx, query).await
    } else {
        ctx.rpc::<ExecResult, _>(&plan.executor, EXEC_QUERY, &query, cfg.rpc_timeout_ms * 3).await.map(|r| r.result)
    };
    let result = match outcome {
        Ok(r) => r,
        Err(e) => {
            release_all(ctx, &mut txn, &held, false);
            return Err(DbError::new(if e.kind.is_user_error() { e.kind } else { ErrorKind::ReplicaUnavailable }, e.message));
        }
    };
    // Strict 2PL: releases happen after the result is final. Each manager
    // confirms the lock was still held; a lock lost to a manager failure
    // aborts the read.
    txn.finish(true);
    let elapsed = ctx.now() - started;
    let calls: Vec<_> = held
        .iter()
        .map(|h| {
            let body = Release {
                table: h.table.clone(),
                txn: txn.txn_id.clone(),
                routed: plan.table_sources.get(&h.table).cloned(),
                elapsed_ms: Some(elapsed),
            };
            ctx.start_rpc::<Empty, _>(&h.tm, TM_RELEASE, &body, cfg.rpc_timeout_ms)
        })
        .collect();
    let mut lost = None;
    for c in calls {
        if let Err(e) = c.await {
            lost = Some(e);
        }
    }
    if let Some(e) = lost {
        txn_end(ctx, &txn, false);
        return Err(DbError::new(ErrorKind::ManagerLost, format!("read lock lost: {}", e.message)));
    }
    txn_end(ctx, &txn, true);
    Ok(SqlResult { columns: result.columns, rows: result.rows, ..Default::default() })
}

/// Materializes each referenced table from its planned source and
/// evaluates the query here.
async fn execute_plan(ctx: &Ctx, req: ExecQuery) -> Result<crate::exec::ResultSet, DbError> {
    let stmt = parse(&req.query)?;
    let Statement::Select(sel) = stmt else {
        return Err(DbError::new(ErrorKind::Internal, "executor received a non-SELECT"));
    };
    let me = ctx.me();
    let timeout = ctx.cfg().rpc_timeout_ms;
    let mut data: Materialized = BTreeMap::new();
    for (table, src) in &req.plan.table_sources {
        let min_seq = req.min_seqs.get(table).copied().unwrap_or(0);
        let fetched = if *src == me {
            ctx.with(|st| match st.replicas.get(table) {
                Some(r) if r.applied_seq >= min_seq => Ok(FetchReply { schema: r.schema.clone(), rows: r.scan(None)? }),
                _ => Err(DbError::new(ErrorKind::ReplicaUnavailable, format!("local replica of {table} is not current"))),
            })
        } else {
            ctx.rpc::<FetchReply, _>(src, REPLICA_FETCH, &Fetch { table: table.clone(), min_seq }, timeout).await
        }?;
        data.insert(table.clone(), (fetched.schema, fetched.rows));
    }
    evaluate_select(&sel, &data)
}

/// A write transaction over one table. On failure the flag says whether a
/// retry is safe.
async fn run_write(ctx: &Ctx, table: &str, stmts: Vec<String>) -> Result<u64, (DbError, bool)> {
    let cfg = ctx.cfg();
    let mut txn = new_txn(ctx);
    let mut held = Vec::new();
    lock(ctx, &mut txn, &mut held, table, LockMode::Write).await.map_err(|e| (e, true))?;
    let req = UpdateReq { table: table.into(), txn: txn.txn_id.clone(), stmts };
    let timeout = cfg.prepare_timeout_ms + cfg.rpc_timeout_ms * 3;
    let r = ctx.rpc::<UpdateReply, _>(&held[0].tm, TM_UPDATE, &req, timeout).await;
    release_all(ctx, &mut txn, &held, r.is_ok());
    match r {
        Ok(u) => Ok(u.affected),
        // No answer: the manager may or may not have committed.
        Err(e) if e.kind == ErrorKind::Timeout => Err((e, false)),
        Err(e) => Err((e, true)),
    }
}

async fn create_table(ctx: &Ctx, name: &str, columns: &[ColumnDef], replication: Option<u32>) -> Result<(), DbError> {
    match catalog::lookup_table(ctx, name, false).await {
        Ok(_) => return Err(DbError::new(ErrorKind::TableExists, format!("table {name} already exists"))),
        Err(e) if e.kind == ErrorKind::NoSuchTable => {}
        Err(e) => return Err(e),
    }
    let cfg = ctx.cfg();
    let rf = replication.unwrap_or(cfg.default_rf).max(1);
    let schema = TableSchema::new(name, columns.to_vec())?;
    let scores = if name == MONITOR_TABLE { BTreeMap::new() } else { read_scores(ctx).await };
    let me = ctx.me();
    let others: Vec<Address> = ctx.with(|st| {
        let mut pool = scores;
        for n in st.neighbours() {
            pool.entry(n).or_insert(AvailabilityScore(0.0));
        }
        ranked(&pool).into_iter().filter(|a| *a != st.addr && !st.failed.contains(a)).collect()
    });
    ctx.with(|st| {
        let store = crate::storage::ReplicaStore::create(&mut *st.disk, schema.clone())?;
        st.replicas.insert(name.into(), store);
        Ok::<_, DbError>(())
    })?;
    let mut replicas = alloc::vec![me];
    for cand in others {
        if replicas.len() as u32 >= rf {
            break;
        }
        let body = CreateReplica { schema: schema.clone() };
        if ctx.rpc::<Empty, _>(&cand, REPLICA_CREATE, &body, cfg.rpc_timeout_ms).await.is_ok() {
            replicas.push(cand);
        }
    }
    let state = TableManagerState::new(schema, replicas.clone(), rf);
    let under = state.under_replicated();
    match manager::create(ctx, state).await {
        Ok(()) => {
            ctx.event(
                "table_created",
                json!({ "table": name, "replicas": replicas, "target_rf": rf, "under_replicated": under }),
            );
            Ok(())
        }
        Err(e) => {
            for r in &replicas {
                ctx.send(r, REPLICA_DROP, &TableName { table: name.into() });
            }
            Err(e)
        }
    }
}

async fn drop_table(ctx: &Ctx, name: &str) -> Result<(), DbError> {
    let cfg = ctx.cfg();
    let mut txn = new_txn(ctx);
    let mut held = Vec::new();
    lock(ctx, &mut txn, &mut held, name, LockMode::Write).await?;
    let r = ctx
        .rpc::<Empty, _>(&held[0].tm, TM_DROP, &TxnRef { table: name.into(), txn: txn.txn_id.clone() }, cfg.rpc_timeout_ms * 4)
        .await;
    catalog::invalidate(ctx, name);
    if r.is_ok() {
        txn.finish(true);
        txn_end(ctx, &txn, true);
    } else {
        release_all(ctx, &mut txn, &held, false);
    }
    r.map(|_| ())
}

/// Upserts this instance's resource sample into the monitoring table.
pub(super) async fn publish_once(ctx: Ctx) {
    if !ctx.with(|st| st.booted && !st.departed) {
        return;
    }
    let now = ctx.now();
    let sample = ctx.with(|st| {
        st.sample.instance = st.addr.clone();
        st.sample.ts = now;
        st.sample.clone()
    });
    let stmts: Vec<String> = publish_statements(&sample).into_iter().collect();
    match run_write(&ctx, MONITOR_TABLE, stmts).await {
        Ok(_) => ctx.event("published", json!({ "ts": now })),
        Err((e, _)) => ctx.event("publish_dropped", json!({ "error": format!("{:?}", e.kind) })),
    }
}

pub(super) async fn publisher(ctx: Ctx) {
    let interval = ctx.cfg().monitor.publish_interval_ms;
    loop {
        if ctx.with(|st| st.departed) {
            return;
        }
        publish_once(ctx.clone()).await;
        ctx.sleep(interval).await;
    }
}

/// Creates the monitoring table if the catalog lacks it.
pub(super) async fn ensure_monitor_table(ctx: Ctx) {
    for _ in 0..5 {
        match execute_sql(&ctx, &create_monitor_sql()).await {
            Ok(_) => {
                publish_once(ctx.clone()).await;
                return;
            }
            Err(e) if e.kind == ErrorKind::TableExists => return,
            Err(_) => ctx.sleep(ctx.cfg().ping_interval_ms).await,
        }
    }
}
