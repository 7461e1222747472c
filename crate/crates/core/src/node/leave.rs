//! Graceful departure: drain, migrate roles and replicas, leave the ring.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde_json::json;

use super::msg::*;
use super::{catalog, coord, manager, ring, Ctx};
use crate::error::{DbError, ErrorKind};
use crate::monitor::{ranked, AvailabilityScore};
use crate::wire::{Address, Envelope};

pub(super) fn handle(ctx: &Ctx, env: Envelope) {
    let ctx = ctx.clone();
    ctx.clone().spawn(async move {
        let r = leave(&ctx).await;
        ctx.reply(&env, &r);
        if r.is_ok() {
            ctx.with(|st| st.departed = true);
            ctx.event("departed", json!({}));
        }
    });
}

async fn leave(ctx: &Ctx) -> Result<Empty, DbError> {
    let me = ctx.me();
    let cfg = ctx.cfg();
    let already = ctx.with(|st| st.leaving);
    if already {
        return Err(DbError::new(ErrorKind::NotReady, "leave already in progress"));
    }
    if ctx.with(|st| st.successors().is_empty()) {
        return Err(DbError::new(ErrorKind::LeaveRefused, format!("{me} is the only instance")));
    }
    let scores = coord::read_scores(ctx).await;
    let targets: Vec<Address> = ctx.with(|st| {
        let mut pool = scores;
        for n in st.neighbours() {
            pool.entry(n).or_insert(AvailabilityScore(0.0));
        }
        ranked(&pool).into_iter().filter(|a| *a != me && !st.failed.contains(a)).collect()
    });
    if targets.is_empty() {
        return Err(DbError::new(ErrorKind::LeaveRefused, "no other live instance"));
    }
    ctx.with(|st| st.leaving = true);
    ctx.event("leave_started", json!({ "targets": targets }));

    // Drain: running transactions finish and hosted locks empty out.
    let deadline = ctx.now() + cfg.lock_wait_ms;
    while ctx.now() < deadline && ctx.with(|st| st.active_txns > 0 || st.tms.values().any(|m| !m.locks.is_idle())) {
        ctx.sleep(10).await;
    }

    let tables: Vec<String> = ctx.with(|st| st.tms.keys().cloned().collect());
    for table in tables {
        let mut moved = false;
        for t in &targets {
            if manager::hand_off(ctx, &table, t).await.is_ok() {
                moved = true;
                break;
            }
        }
        if !moved {
            ctx.event("leave_incomplete", json!({ "role": "manager", "table": table.as_str() }));
        }
    }

    let replicas: Vec<String> = ctx.with(|st| st.replicas.keys().cloned().collect());
    for table in replicas {
        let timeout = cfg.lock_wait_ms + cfg.rpc_timeout_ms * 8;
        let r = match catalog::lookup_table(ctx, &table, false).await {
            Ok(e) => {
                let body = ReplicaLeave { table: table.clone(), addr: me.clone() };
                ctx.rpc::<Empty, _>(&e.tm_address, TM_REPLICA_LEAVE, &body, timeout).await
            }
            Err(e) => Err(e),
        };
        if let Err(e) = r {
            ctx.event("leave_incomplete", json!({ "role": "replica", "table": table.as_str(), "error": e.message }));
        }
    }

    if ctx.with(|st| st.is_keeper()) {
        let mut moved = false;
        for t in &targets {
            if catalog::hand_off(ctx, t).await.is_ok() {
                moved = true;
                break;
            }
        }
        if !moved {
            ctx.event("leave_incomplete", json!({ "role": "keeper" }));
        }
    }

    // The pointer record moves to whoever owns the key once this instance
    // is gone: its successor.
    let pointer = ctx.with(|st| st.pointer.clone());
    if let (Some(p), Some(succ)) = (pointer, ctx.with(|st| st.successors().into_iter().next())) {
        ctx.send(&succ, XFER_META, &PointerMsg { pointer: Some(p), replicate: false });
    }
    ring::leave_ring(ctx);
    Ok(Empty {})
}
