//! Table managers: lock service, two-phase commit over the data replicas,
//! metadata replication, replica repair, re-instantiation and handoff.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde_json::json;

use super::msg::{self, *};
use super::{catalog, coord, Ctx, Manager, Waiter};
use crate::error::{DbError, ErrorKind};
use crate::exec::TableInfo;
use crate::monitor::ranked;
use crate::sql::{parse, Statement};
use crate::storage::{LogEntry, ReplicaStore};
use crate::tablemgr::{tm_path, Acquire, LockMode, LockRequest, TableManagerState};
use crate::wire::{Address, Envelope};

fn wrong_manager(table: &str) -> DbError {
    DbError::new(ErrorKind::WrongManager, format!("no manager for {table} here"))
}

fn grant_body(m: &Manager) -> LockGrant {
    LockGrant {
        info: TableInfo { replicas: m.state.replicas.clone(), row_count: m.state.row_count, stats: m.state.stats.clone() },
        commit_seq: m.state.commit_seq,
        schema: m.state.schema.clone(),
    }
}

fn answer_waiter(ctx: &Ctx, w: &Waiter, body: Result<LockGrant, DbError>) {
    if let Waiter::Remote { from, rid, msg_type } = w {
        ctx.rt.reply_raw(from, *rid, &msg::reply_type(msg_type), msg::result_body(&body));
    }
}

fn lock_event(ctx: &Ctx, kind: &str, table: &str, txn: &str, mode: Option<LockMode>) {
    let mut d = json!({ "table": table, "txn": txn });
    if let Some(m) = mode {
        d["mode"] = json!(m.as_str());
    }
    ctx.event(kind, d);
}

/// Replies to waiters that a release or expiry just granted.
fn announce_grants(ctx: &Ctx, table: &str, grants: Vec<LockRequest<Waiter>>) {
    for g in grants {
        lock_event(ctx, "lock_grant", table, &g.txn, Some(g.mode));
        let body = ctx.with(|st| st.tms.get(table).map(grant_body));
        match body {
            Some(b) => answer_waiter(ctx, &g.waiter, Ok(b)),
            None => answer_waiter(ctx, &g.waiter, Err(wrong_manager(table))),
        }
    }
}

pub(super) fn expire_locks(ctx: &Ctx) {
    let now = ctx.now();
    let tables: Vec<String> = ctx.with(|st| st.tms.keys().cloned().collect());
    let wait = ctx.cfg().lock_wait_ms;
    for t in tables {
        let Some((expired, grants)) = ctx.with(|st| st.tms.get_mut(&t).map(|m| m.locks.expire(now, wait))) else {
            continue;
        };
        for e in expired {
            lock_event(ctx, "lock_timeout", &t, &e.txn, Some(e.mode));
            answer_waiter(ctx, &e.waiter, Err(DbError::new(ErrorKind::LockTimeout, format!("lock wait on {t} timed out"))));
        }
        announce_grants(ctx, &t, grants);
    }
}

fn release(ctx: &Ctx, table: &str, txn: &str) {
    let Some((held, grants)) = ctx.with(|st| {
        let m = st.tms.get_mut(table)?;
        let held = m.locks.holds(txn).is_some();
        Some((held, m.locks.release(txn)))
    }) else {
        return;
    };
    if held {
        lock_event(ctx, "lock_release", table, txn, None);
    }
    announce_grants(ctx, table, grants);
}

/// Marks the manager's state as changed: persist it and mark every meta
/// replica as needing a fresh copy.
fn changed(ctx: &Ctx, table: &str) {
    ctx.with(|st| {
        if let Some(m) = st.tms.get_mut(table) {
            m.synced_meta.clear();
        }
        st.persist_tm(table);
    });
}

async fn sync_meta(ctx: &Ctx, table: &str) {
    let Some((state, pending)) = ctx.with(|st| {
        let m = st.tms.get(table)?;
        let pending: Vec<Address> =
            m.state.meta_replicas.iter().filter(|a| !m.synced_meta.contains(*a)).cloned().collect();
        Some((m.state.clone(), pending))
    }) else {
        return;
    };
    let timeout = ctx.cfg().rpc_timeout_ms;
    let body = MetaSync { state: state.clone() };
    let calls: Vec<_> =
        pending.iter().map(|a| (a.clone(), ctx.start_rpc::<Empty, _>(a, TM_META_SYNC, &body, timeout))).collect();
    for (a, call) in calls {
        if call.await.is_ok() {
            ctx.with(|st| {
                if let Some(m) = st.tms.get_mut(table) {
                    if m.state == state {
                        m.synced_meta.insert(a);
                    }
                }
            });
        }
    }
}

pub(super) fn handle(ctx: &Ctx, env: Envelope) {
    match env.msg_type.as_str() {
        TM_LOCK => {
            let Ok(req) = env.decode_body::<LockReq>() else { return };
            let now = ctx.now();
            let waiter = Waiter::Remote { from: env.from.clone(), rid: env.rid, msg_type: env.msg_type.clone() };
            let r = ctx.with(|st| {
                let leaving = st.leaving;
                let m = st.tms.get_mut(&req.table).ok_or_else(|| wrong_manager(&req.table))?;
                if !m.ready || (leaving && m.locks.holds(&req.txn).is_none()) {
                    return Err(DbError::new(ErrorKind::NotReady, format!("manager for {} is not ready", req.table)));
                }
                Ok(match m.locks.acquire(&req.txn, req.mode, now, waiter) {
                    Acquire::Granted(_) => Some(grant_body(m)),
                    Acquire::Queued => None,
                })
            });
            match r {
                Ok(Some(grant)) => {
                    lock_event(ctx, "lock_grant", &req.table, &req.txn, Some(req.mode));
                    ctx.reply(&env, &Ok::<_, DbError>(grant));
                }
                Ok(None) => lock_event(ctx, "lock_queued", &req.table, &req.txn, Some(req.mode)),
                Err(e) => ctx.reply::<LockGrant>(&env, &Err(e)),
            }
        }
        TM_RELEASE => {
            let Ok(req) = env.decode_body::<Release>() else { return };
            let held = ctx.with(|st| {
                let m = st.tms.get_mut(&req.table)?;
                let held = m.locks.holds(&req.txn);
                if held == Some(LockMode::Read) {
                    m.state.stats.record_read(req.routed.as_ref());
                }
                if let Some(ms) = req.elapsed_ms {
                    m.state.stats.record_response(ms as f64);
                }
                held
            });
            release(ctx, &req.table, &req.txn);
            // The reply tells a reader whether its lock survived until the end.
            let r = match held {
                Some(_) => Ok(Empty {}),
                None => Err(DbError::new(ErrorKind::ManagerLost, format!("{} held no lock on {}", req.txn, req.table))),
            };
            ctx.reply(&env, &r);
        }
        TM_UPDATE => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.decode_body::<UpdateReq>() {
                    Ok(req) => two_phase_commit(&ctx, req).await,
                    Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                };
                ctx.reply(&env, &r);
            });
        }
        TM_META_SYNC => {
            let r = env.decode_body::<MetaSync>().map_err(|e| DbError::new(ErrorKind::Internal, e)).map(|m| {
                ctx.with(|st| {
                    let table = m.state.table_name.clone();
                    if !st.tms.contains_key(&table) {
                        st.persist_json(&tm_path(&table), &m.state);
                        st.tm_copies.insert(table, m.state);
                    }
                });
                Empty {}
            });
            ctx.reply(&env, &r);
        }
        TM_META_DROP => {
            if let Ok(req) = env.decode_body::<TableName>() {
                ctx.with(|st| {
                    if !st.tms.contains_key(&req.table) && st.tm_copies.remove(&req.table).is_some() {
                        let _ = st.disk.remove_file(&tm_path(&req.table));
                    }
                });
            }
        }
        TM_RECOVER => {
            let Ok(req) = env.decode_body::<Recover>() else { return };
            let r = reinstantiate(ctx, &req.table, &req.failed);
            ctx.reply(&env, &r);
        }
        TM_NODE_FAILED => {
            if let Ok(req) = env.decode_body::<Failed>() {
                node_failed(ctx, req.failed);
            }
        }
        TM_HANDOFF => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.decode_body::<MetaSync>() {
                    Ok(m) => {
                        let table = m.state.table_name.clone();
                        let meta = install_manager(&ctx, m.state, true);
                        sync_meta(&ctx, &table).await;
                        ctx.event("tm_received", json!({ "table": table.as_str(), "from": env.from.as_str() }));
                        Ok(Registration { table, tm: ctx.me(), meta })
                    }
                    Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                };
                ctx.reply(&env, &r);
            });
        }
        TM_REPLICA_LEAVE => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.decode_body::<ReplicaLeave>() {
                    Ok(req) => replica_leave(&ctx, &req.table, &req.addr).await,
                    Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                };
                ctx.reply(&env, &r);
            });
        }
        TM_REJOIN => {
            let Ok(req) = env.decode_body::<Rejoin>() else { return };
            let r = ctx.with(|st| {
                let m = st.tms.get(&req.table).ok_or_else(|| wrong_manager(&req.table))?;
                Ok((m.state.replicas.contains(&req.addr), m.state.commit_seq))
            });
            if let Ok((true, seq)) = r {
                if req.applied_seq != seq {
                    ctx.spawn(catch_up_task(ctx.clone(), req.table.clone(), req.addr.clone()));
                }
            }
            ctx.reply(&env, &r.map(|(keep, _)| RejoinReply { keep }));
        }
        TM_DROP => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.decode_body::<TxnRef>() {
                    Ok(req) => drop_table(&ctx, &req.table, &req.txn).await,
                    Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                };
                ctx.reply(&env, &r);
            });
        }
        _ => {}
    }
}

/// Installs a manager on this instance with its meta replicas set to this
/// instance's successors. Returns those meta replicas.
pub(super) fn install_manager(ctx: &Ctx, mut state: TableManagerState, ready: bool) -> Vec<Address> {
    let table = state.table_name.clone();
    ctx.with(|st| {
        let meta = st.meta_targets();
        state.meta_replicas = meta.clone();
        st.tm_copies.remove(&table);
        st.tms.insert(table.clone(), Manager::new(state, ready));
        st.persist_tm(&table);
        meta
    })
}

fn reinstantiate(ctx: &Ctx, table: &str, failed: &Address) -> Result<Registration, DbError> {
    let me = ctx.me();
    if let Some(meta) = ctx.with(|st| st.tms.get(table).map(|m| m.state.meta_replicas.clone())) {
        return Ok(Registration { table: table.into(), tm: me, meta });
    }
    let copy = ctx
        .with(|st| st.tm_copies.get(table).cloned())
        .ok_or_else(|| DbError::new(ErrorKind::ManagerLost, format!("no copy of the {table} manager here")))?;
    ctx.with(|st| st.failed.insert(failed.clone()));
    let meta = install_manager(ctx, copy, false);
    ctx.event("tm_instantiated", json!({ "table": table, "failed": failed.as_str() }));
    ctx.spawn(reconcile_task(ctx.clone(), table.into()));
    Ok(Registration { table: table.into(), tm: me, meta })
}

fn node_failed(ctx: &Ctx, failed: Address) {
    let prefix = format!("{failed}:");
    let tables: Vec<String> = ctx.with(|st| {
        st.failed.insert(failed.clone());
        st.tms.keys().cloned().collect()
    });
    for t in tables {
        let Some((victims, grants, removed, unavailable)) = ctx.with(|st| {
            let m = st.tms.get_mut(&t)?;
            let (victims, grants) = m.locks.release_where(|txn| txn.starts_with(&prefix));
            let mut removed = false;
            let mut unavailable = false;
            if m.state.replicas.contains(&failed) {
                if m.state.replicas.len() > 1 {
                    m.state.replicas.retain(|a| a != &failed);
                    removed = true;
                } else {
                    unavailable = true;
                }
            }
            m.state.meta_replicas.retain(|a| a != &failed);
            Some((victims, grants, removed, unavailable))
        }) else {
            continue;
        };
        for v in victims {
            lock_event(ctx, "lock_release", &t, &v, None);
        }
        announce_grants(ctx, &t, grants);
        if removed {
            ctx.event("replica_removed", json!({ "table": t.as_str(), "replica": failed.as_str() }));
        }
        if unavailable {
            ctx.event("table_unavailable", json!({ "table": t.as_str(), "replica": failed.as_str() }));
        }
        changed(ctx, &t);
        ctx.spawn(maintain_task(ctx.clone(), t));
    }
}

async fn maintain_task(ctx: Ctx, table: String) {
    maintain(&ctx, &table).await;
}

pub(super) async fn maintain_all(ctx: &Ctx) {
    let tables: Vec<String> = ctx.with(|st| st.tms.keys().cloned().collect());
    for t in tables {
        maintain(ctx, &t).await;
    }
}

/// Keeps meta replicas on this instance's successors, pushes pending state
/// copies, and starts a repair when the table is under-replicated.
async fn maintain(ctx: &Ctx, table: &str) {
    let me = ctx.me();
    let moved = ctx.with(|st| {
        let targets = st.meta_targets();
        let m = st.tms.get_mut(table)?;
        if m.state.meta_replicas == targets {
            return Some(None);
        }
        let old = core::mem::replace(&mut m.state.meta_replicas, targets.clone());
        Some(Some((old, targets)))
    });
    let Some(moved) = moved else { return };
    if let Some((old, targets)) = moved {
        changed(ctx, table);
        for a in old.iter().filter(|a| !targets.contains(a)) {
            ctx.send(a, TM_META_DROP, &TableName { table: table.into() });
        }
        sync_meta(ctx, table).await;
        let reg = Registration { table: table.into(), tm: me.clone(), meta: targets };
        let _ = catalog::call::<Version, _>(ctx, ST_UPDATE, &reg).await;
    } else {
        sync_meta(ctx, table).await;
    }
    let needs_repair = ctx.with(|st| {
        st.tms.get(table).is_some_and(|m| m.ready && !m.repairing && m.state.under_replicated())
    });
    if needs_repair {
        let _ = repair(ctx, table, None).await;
    }
}

/// Acquires this manager's own WRITE lock on behalf of an internal task.
async fn lock_locally(ctx: &Ctx, table: &str, txn: &str) -> Result<(), DbError> {
    let now = ctx.now();
    let wait = ctx.cfg().lock_wait_ms;
    let r = ctx.with(|st| {
        let m = st.tms.get_mut(table).ok_or_else(|| wrong_manager(table))?;
        Ok::<_, DbError>(matches!(m.locks.acquire(txn, LockMode::Write, now, Waiter::Local), Acquire::Granted(_)))
    })?;
    if r {
        lock_event(ctx, "lock_grant", table, txn, Some(LockMode::Write));
        return Ok(());
    }
    let deadline = now + wait;
    loop {
        ctx.sleep(5).await;
        let state = ctx.with(|st| {
            let m = st.tms.get(table)?;
            Some((m.locks.holds(txn).is_some(), m.locks.queued().any(|q| q.txn == txn)))
        });
        match state {
            Some((true, _)) => return Ok(()),
            Some((false, true)) if ctx.now() < deadline => continue,
            _ => {
                release(ctx, table, txn);
                return Err(DbError::new(ErrorKind::LockTimeout, format!("internal lock on {table} timed out")));
            }
        }
    }
}

fn internal_txn(ctx: &Ctx, what: &str) -> String {
    ctx.with(|st| {
        st.txn_counter += 1;
        format!("{}:{what}{}", st.addr, st.txn_counter)
    })
}

/// Instances eligible to receive a new replica, best first.
async fn placement_candidates(ctx: &Ctx, table: &str, exclude: Option<&Address>) -> Vec<Address> {
    let scores = coord::read_scores(ctx).await;
    ctx.with(|st| {
        let mut scores = scores;
        for n in st.neighbours() {
            scores.entry(n).or_insert(crate::monitor::AvailabilityScore(0.0));
        }
        scores.entry(st.addr.clone()).or_insert(crate::monitor::AvailabilityScore(0.0));
        let holders: Vec<Address> = st.tms.get(table).map(|m| m.state.replicas.clone()).unwrap_or_default();
        ranked(&scores)
            .into_iter()
            .filter(|a| !holders.contains(a) && !st.failed.contains(a) && Some(a) != exclude)
            .collect()
    })
}

/// Copies the full log of an up-to-date replica to `target`.
async fn copy_to(ctx: &Ctx, table: &str, target: &Address) -> Result<u64, DbError> {
    let timeout = ctx.cfg().rpc_timeout_ms;
    let (sources, commit_seq) = ctx.with(|st| {
        let m = st.tms.get(table).ok_or_else(|| wrong_manager(table))?;
        let srcs: Vec<Address> =
            m.state.replicas.iter().filter(|a| *a != target && !st.failed.contains(*a)).cloned().collect();
        Ok::<_, DbError>((srcs, m.state.commit_seq))
    })?;
    for src in sources {
        let Ok(data) = ctx.rpc::<CopyData, _>(&src, TM_COPY_REQ, &TableName { table: table.into() }, timeout).await
        else {
            continue;
        };
        if data.entries.last().map(|e| e.seq).unwrap_or(0) != commit_seq {
            continue;
        }
        let install = Install { schema: data.schema, entries: data.entries };
        let applied: Applied = ctx.rpc(target, REPLICA_INSTALL, &install, timeout * 4).await?;
        if applied.applied_seq == commit_seq {
            return Ok(applied.row_count);
        }
    }
    Err(DbError::new(ErrorKind::TableUnavailable, format!("no up-to-date source replica for {table}")))
}

/// Adds one replica on the best eligible instance while holding the
/// table's WRITE lock.
pub(super) async fn repair(ctx: &Ctx, table: &str, exclude: Option<&Address>) -> Result<Address, DbError> {
    let started = ctx.with(|st| match st.tms.get_mut(table) {
        Some(m) if !m.repairing => {
            m.repairing = true;
            true
        }
        _ => false,
    });
    if !started {
        return Err(DbError::new(ErrorKind::NotReady, "repair already running"));
    }
    let candidates = placement_candidates(ctx, table, exclude).await;
    let txn = internal_txn(ctx, "repair");
    let mut outcome = Err(DbError::new(ErrorKind::TableUnavailable, format!("no eligible instance for {table}")));
    if !candidates.is_empty() {
        match lock_locally(ctx, table, &txn).await {
            Ok(()) => {
                for cand in candidates {
                    if copy_to(ctx, table, &cand).await.is_ok() {
                        let added = ctx.with(|st| match st.tms.get_mut(table) {
                            Some(m) if !m.state.replicas.contains(&cand) => {
                                m.state.replicas.push(cand.clone());
                                true
                            }
                            _ => false,
                        });
                        if added {
                            changed(ctx, table);
                            ctx.event("repair", json!({ "table": table, "added": cand.as_str() }));
                        }
                        outcome = Ok(cand);
                        break;
                    }
                }
                release(ctx, table, &txn);
            }
            Err(e) => outcome = Err(e),
        }
    }
    ctx.with(|st| {
        if let Some(m) = st.tms.get_mut(table) {
            m.repairing = false;
        }
    });
    if outcome.is_ok() {
        sync_meta(ctx, table).await;
    }
    outcome
}

async fn catch_up_task(ctx: Ctx, table: String, target: Address) {
    let txn = internal_txn(&ctx, "catchup");
    if lock_locally(&ctx, &table, &txn).await.is_ok() {
        let r = copy_to(&ctx, &table, &target).await;
        ctx.event("catch_up", json!({ "table": table.as_str(), "replica": target.as_str(), "ok": r.is_ok() }));
        release(&ctx, &table, &txn);
    }
}

/// Brings a re-instantiated manager's commit sequence in line with its
/// replicas: the most advanced replica wins and laggards are caught up.
/// Staged but uncommitted work is discarded everywhere (presumed abort).
async fn reconcile(ctx: &Ctx, table: &str) {
    let timeout = ctx.cfg().rpc_timeout_ms;
    let replicas: Vec<Address> = ctx.with(|st| st.tms.get(table).map(|m| m.state.replicas.clone()).unwrap_or_default());
    let req = StatusReq { table: table.into(), discard_staged: true };
    let calls: Vec<_> =
        replicas.iter().map(|a| (a.clone(), ctx.start_rpc::<ReplicaStatus, _>(a, REPLICA_STATUS, &req, timeout))).collect();
    let mut statuses = Vec::new();
    for (a, c) in calls {
        if let Ok(s) = c.await {
            statuses.push((a, s));
        }
    }
    let best = statuses.iter().filter(|(_, s)| s.present).max_by_key(|(_, s)| s.applied_seq).map(|(a, s)| (a.clone(), s.clone()));
    if let Some((_, lead)) = &best {
        let before = ctx.with(|st| {
            let m = st.tms.get_mut(table)?;
            let before = m.state.commit_seq;
            if lead.applied_seq >= m.state.commit_seq {
                m.state.commit_seq = lead.applied_seq;
                m.state.row_count = lead.row_count;
            }
            Some(before)
        });
        if let Some(before) = before {
            ctx.event(
                "reconcile",
                json!({ "table": table, "commit_seq_before": before, "commit_seq": lead.applied_seq.max(before) }),
            );
        }
        let seq = ctx.with(|st| st.tms.get(table).map(|m| m.state.commit_seq).unwrap_or(0));
        for (a, s) in &statuses {
            if !s.present || s.applied_seq != seq {
                let r = copy_to(ctx, table, a).await;
                ctx.event("catch_up", json!({ "table": table, "replica": a.as_str(), "ok": r.is_ok() }));
            }
        }
    }
    ctx.with(|st| {
        if let Some(m) = st.tms.get_mut(table) {
            m.ready = true;
        }
    });
    changed(ctx, table);
    sync_meta(ctx, table).await;
}

async fn reconcile_task(ctx: Ctx, table: String) {
    reconcile(&ctx, &table).await;
}

/// Validates the statements of an update and turns them into log entries
/// numbered after the current commit sequence.
fn entries_for(table: &str, txn: &str, commit_seq: u64, stmts: &[String]) -> Result<Vec<LogEntry>, DbError> {
    let mut out = Vec::new();
    for (i, text) in stmts.iter().enumerate() {
        let stmt = parse(text)?;
        if !stmt.is_write() || stmt.tables() != [table] {
            return Err(DbError::new(ErrorKind::Unsupported, format!("statement does not write {table}: {stmt}")));
        }
        let canonical = match stmt {
            Statement::Insert { .. } | Statement::Update { .. } | Statement::Delete { .. } => alloc::string::ToString::to_string(&stmt),
            _ => unreachable!("checked is_write"),
        };
        out.push(LogEntry { seq: commit_seq + 1 + i as u64, stmt: canonical, txn: txn.into() });
    }
    Ok(out)
}

/// Runs prepare/vote then commit/abort across every replica of the table.
async fn two_phase_commit(ctx: &Ctx, req: UpdateReq) -> Result<UpdateReply, DbError> {
    let cfg = ctx.cfg();
    let table = req.table.as_str();
    let (replicas, commit_seq) = ctx.with(|st| {
        let m = st.tms.get(table).ok_or_else(|| wrong_manager(table))?;
        if m.locks.holds(&req.txn) != Some(LockMode::Write) {
            return Err(DbError::new(ErrorKind::Internal, format!("{} does not hold the WRITE lock on {table}", req.txn)));
        }
        Ok((m.state.replicas.clone(), m.state.commit_seq))
    })?;
    let entries = entries_for(table, &req.txn, commit_seq, &req.stmts)?;
    let prepare = Prepare { table: table.into(), txn: req.txn.clone(), entries: entries.clone() };
    let calls: Vec<_> = replicas
        .iter()
        .map(|a| (a.clone(), ctx.start_rpc::<Vote, _>(a, TM_PREPARE, &prepare, cfg.prepare_timeout_ms)))
        .collect();
    let mut votes = Vec::new();
    for (a, c) in calls {
        let v = c.await;
        ctx.event(
            "vote",
            json!({ "table": table, "txn": req.txn.as_str(), "replica": a.as_str(), "yes": matches!(&v, Ok(v) if v.yes) }),
        );
        votes.push((a, v));
    }

    if votes.iter().all(|(_, v)| matches!(v, Ok(v) if v.yes)) {
        let first = votes.first().and_then(|(_, v)| v.as_ref().ok()).cloned();
        let commit = TxnRef { table: table.into(), txn: req.txn.clone() };
        let calls: Vec<_> = replicas
            .iter()
            .map(|a| (a.clone(), ctx.start_rpc::<Applied, _>(a, TM_COMMIT, &commit, cfg.rpc_timeout_ms)))
            .collect();
        let mut unacked = Vec::new();
        for (a, c) in calls {
            if c.await.is_err() {
                unacked.push(a);
            }
        }
        let n = entries.len() as u64;
        let new_seq = commit_seq + n;
        ctx.with(|st| {
            if let Some(m) = st.tms.get_mut(table) {
                m.state.commit_seq = new_seq;
                if let Some(v) = &first {
                    m.state.row_count = v.rows_after;
                }
                m.state.stats.record_write();
                if unacked.len() < m.state.replicas.len() {
                    m.state.replicas.retain(|a| !unacked.contains(a));
                }
            }
        });
        for a in &unacked {
            ctx.event("replica_removed", json!({ "table": table, "replica": a.as_str(), "reason": "no commit ack" }));
        }
        changed(ctx, table);
        ctx.event(
            "commit",
            json!({ "table": table, "txn": req.txn.as_str(), "seq": new_seq, "stmts": req.stmts }),
        );
        sync_meta(ctx, table).await;
        let affected = first.map(|v| v.affected).unwrap_or(0);
        return Ok(UpdateReply { affected, commit_seq: new_seq });
    }

    let abort = TxnRef { table: table.into(), txn: req.txn.clone() };
    for a in &replicas {
        ctx.send(a, TM_ABORT, &abort);
    }
    let mut user_error = None;
    let mut silent = Vec::new();
    let mut out_of_step = Vec::new();
    for (a, v) in &votes {
        match v {
            Ok(v) if v.yes => {}
            Ok(v) => match &v.reason {
                Some(e) if e.kind.is_user_error() => user_error = Some(e.clone()),
                _ => out_of_step.push(a.clone()),
            },
            Err(_) => silent.push(a.clone()),
        }
    }
    let reason = user_error
        .clone()
        .unwrap_or_else(|| DbError::new(ErrorKind::ReplicaUnavailable, format!("replicas of {table} did not all vote yes")));
    ctx.event("abort", json!({ "table": table, "txn": req.txn.as_str(), "reason": format!("{:?}", reason.kind) }));
    if user_error.is_none() {
        let removed = ctx.with(|st| {
            let m = st.tms.get_mut(table)?;
            if silent.len() < m.state.replicas.len() && !silent.is_empty() {
                m.state.replicas.retain(|a| !silent.contains(a));
                Some(silent.clone())
            } else {
                None
            }
        });
        if let Some(removed) = removed {
            for a in removed {
                ctx.event("replica_removed", json!({ "table": table, "replica": a.as_str(), "reason": "no vote" }));
            }
            changed(ctx, table);
            ctx.spawn(maintain_task(ctx.clone(), table.into()));
        }
        if !out_of_step.is_empty() {
            ctx.with(|st| {
                if let Some(m) = st.tms.get_mut(table) {
                    m.ready = false;
                }
            });
            ctx.spawn(reconcile_task(ctx.clone(), table.into()));
        }
    }
    Err(reason)
}

async fn replica_leave(ctx: &Ctx, table: &str, addr: &Address) -> Result<Empty, DbError> {
    let present = ctx.with(|st| st.tms.get(table).map(|m| m.state.replicas.contains(addr)));
    match present {
        None => return Err(wrong_manager(table)),
        Some(false) => return Ok(Empty {}),
        Some(true) => {}
    }
    let mut waited = 0;
    while ctx.with(|st| st.tms.get(table).is_some_and(|m| m.repairing)) && waited < 100 {
        ctx.sleep(20).await;
        waited += 1;
    }
    let replaced = repair(ctx, table, Some(addr)).await;
    let removed = ctx.with(|st| {
        let m = st.tms.get_mut(table)?;
        if m.state.replicas.len() > 1 {
            m.state.replicas.retain(|a| a != addr);
            Some(true)
        } else {
            Some(false)
        }
    });
    if removed == Some(true) {
        changed(ctx, table);
        sync_meta(ctx, table).await;
        ctx.send(addr, REPLICA_DROP, &TableName { table: table.into() });
        ctx.event("replica_departed", json!({ "table": table, "replica": addr.as_str(), "replaced": replaced.is_ok() }));
        Ok(Empty {})
    } else {
        Err(DbError::new(ErrorKind::TableUnavailable, format!("{addr} holds the only replica of {table}")))
    }
}

async fn drop_table(ctx: &Ctx, table: &str, txn: &str) -> Result<Empty, DbError> {
    let state = ctx.with(|st| {
        let m = st.tms.get(table).ok_or_else(|| wrong_manager(table))?;
        if m.locks.holds(txn) != Some(LockMode::Write) {
            return Err(DbError::new(ErrorKind::Internal, format!("{txn} does not hold the WRITE lock on {table}")));
        }
        Ok(m.state.clone())
    })?;
    let _: Version = catalog::call(ctx, ST_UNREGISTER, &TableName { table: table.into() }).await?;
    for r in &state.replicas {
        ctx.send(r, REPLICA_DROP, &TableName { table: table.into() });
    }
    for m in &state.meta_replicas {
        ctx.send(m, TM_META_DROP, &TableName { table: table.into() });
    }
    let waiters = ctx.with(|st| {
        let m = st.tms.remove(table)?;
        let _ = st.disk.remove_file(&tm_path(table));
        Some(m.locks.queued().map(|q| q.waiter.clone()).collect::<Vec<_>>())
    });
    for w in waiters.unwrap_or_default() {
        answer_waiter(ctx, &w, Err(DbError::new(ErrorKind::NoSuchTable, format!("table {table} was dropped"))));
    }
    ctx.event("table_dropped", json!({ "table": table }));
    Ok(Empty {})
}

/// Moves a hosted manager to `target` during a graceful leave.
pub(super) async fn hand_off(ctx: &Ctx, table: &str, target: &Address) -> Result<(), DbError> {
    let timeout = ctx.cfg().rpc_timeout_ms;
    let Some(state) = ctx.with(|st| st.tms.get(table).map(|m| m.state.clone())) else { return Ok(()) };
    let reg: Registration = ctx.rpc(target, TM_HANDOFF, &MetaSync { state: state.clone() }, timeout * 3).await?;
    let _: Version = catalog::call(ctx, ST_UPDATE, &reg).await?;
    let waiters = ctx.with(|st| {
        let m = st.tms.remove(table)?;
        let _ = st.disk.remove_file(&tm_path(table));
        Some(m.locks.queued().map(|q| q.waiter.clone()).collect::<Vec<_>>())
    });
    for w in waiters.unwrap_or_default() {
        answer_waiter(ctx, &w, Err(wrong_manager(table)));
    }
    for m in state.meta_replicas.iter().filter(|m| !reg.meta.contains(m) && **m != reg.tm) {
        ctx.send(m, TM_META_DROP, &TableName { table: table.into() });
    }
    ctx.event("tm_handed_off", json!({ "table": table, "to": target.as_str() }));
    Ok(())
}

/// Registers a freshly created table's manager with the System Table.
pub(super) async fn create(ctx: &Ctx, state: TableManagerState) -> Result<(), DbError> {
    let table = state.table_name.clone();
    let meta = install_manager(ctx, state, true);
    sync_meta(ctx, &table).await;
    let reg = Registration { table: table.clone(), tm: ctx.me(), meta };
    match catalog::call::<Version, _>(ctx, ST_REGISTER, &reg).await {
        Ok(_) => Ok(()),
        Err(e) => {
            let meta = ctx.with(|st| {
                let m = st.tms.remove(&table);
                let _ = st.disk.remove_file(&tm_path(&table));
                m.map(|m| m.state.meta_replicas).unwrap_or_default()
            });
            for a in meta {
                ctx.send(&a, TM_META_DROP, &TableName { table: table.clone() });
            }
            Err(e)
        }
    }
}

/// After a restart: resume roles the catalog still assigns to this
/// instance and drop local state it no longer owns.
pub(super) async fn resume_roles(ctx: Ctx) {
    let me = ctx.me();
    let copies: Vec<String> = ctx.with(|st| st.tm_copies.keys().cloned().collect());
    let replicas: Vec<String> = ctx.with(|st| st.replicas.keys().cloned().collect());
    if copies.is_empty() && replicas.is_empty() {
        return;
    }
    catalog::resume_keeper_if_named(&ctx).await;
    let timeout = ctx.cfg().rpc_timeout_ms;
    for table in copies {
        match catalog::lookup_table(&ctx, &table, false).await {
            Ok(e) if e.tm_address == me => {
                if let Some(copy) = ctx.with(|st| st.tm_copies.get(&table).cloned()) {
                    install_manager(&ctx, copy, false);
                    ctx.event("tm_resumed", json!({ "table": table.as_str() }));
                    reconcile(&ctx, &table).await;
                }
            }
            Ok(e) if e.tm_meta_replicas.contains(&me) => {}
            Ok(_) | Err(DbError { kind: ErrorKind::NoSuchTable, .. }) => ctx.with(|st| {
                st.tm_copies.remove(&table);
                let _ = st.disk.remove_file(&tm_path(&table));
            }),
            Err(_) => {}
        }
    }
    for table in replicas {
        let keep = match catalog::lookup_table(&ctx, &table, false).await {
            Ok(e) => {
                let applied = ctx.with(|st| st.replicas.get(&table).map(|r| r.applied_seq).unwrap_or(0));
                let req = Rejoin { table: table.clone(), addr: me.clone(), applied_seq: applied };
                match ctx.rpc::<RejoinReply, _>(&e.tm_address, TM_REJOIN, &req, timeout).await {
                    Ok(r) => Some(r.keep),
                    Err(_) => None,
                }
            }
            Err(DbError { kind: ErrorKind::NoSuchTable, .. }) => Some(false),
            Err(_) => None,
        };
        if keep == Some(false) {
            ctx.with(|st| {
                st.replicas.remove(&table);
                let _ = ReplicaStore::destroy(&mut *st.disk, &table);
            });
            ctx.event("stale_replica_dropped", json!({ "table": table.as_str() }));
        }
    }
}
