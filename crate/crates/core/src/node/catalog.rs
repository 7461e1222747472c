//! System Table roles: the keeper, its synchronously updated meta replicas,
//! the pointer record that makes the keeper discoverable, and takeover when
//! the keeper fails.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use super::msg::*;
use super::{coord, manager, ring, Ctx, Keeper};
use crate::error::{DbError, ErrorKind};
use crate::systable::{system_table_key, CatalogEntry, PointerRecord, SystemTableState, SNAPSHOT_PATH};
use crate::wire::{Address, Envelope};

/// First instance of a cluster: resume a persisted catalog or start one.
pub(super) fn create_or_resume(ctx: &Ctx) {
    let me = ctx.me();
    let st = ctx.with(|st| st.load_json::<SystemTableState>(SNAPSHOT_PATH));
    let mut st = st.unwrap_or_default();
    st.epoch += 1;
    let epoch = st.epoch;
    ctx.with(|s| {
        s.keeper = Some(Keeper { st, meta: Vec::new(), synced: BTreeMap::new() });
        s.persist_keeper();
    });
    ring::store_pointer(ctx, PointerRecord { current_keeper: me.clone(), epoch });
    ctx.event("keeper_started", json!({ "epoch": epoch }));
    ctx.spawn(coord::ensure_monitor_table(ctx.clone()));
}

/// Periodic upkeep of every metadata role this instance holds.
pub(super) async fn maintenance(ctx: Ctx) {
    let interval = ctx.cfg().repair_interval_ms;
    loop {
        ctx.sleep(interval).await;
        if ctx.with(|st| st.departed) {
            return;
        }
        keeper_maintain(&ctx).await;
        manager::maintain_all(&ctx).await;
    }
}

async fn keeper_maintain(ctx: &Ctx) {
    if !ctx.with(|st| st.is_keeper()) {
        return;
    }
    ctx.with(|st| {
        let targets = st.meta_targets();
        let k = st.keeper.as_mut().expect("keeper");
        if k.meta != targets {
            k.synced.retain(|a, _| targets.contains(a));
            k.meta = targets;
        }
    });
    sync_meta(ctx).await;
    put_pointer(ctx).await;
}

/// Pushes the catalog to meta replicas that have not yet acknowledged the
/// current version. Returns (acknowledged, configured).
async fn sync_meta(ctx: &Ctx) -> (usize, usize) {
    let Some((snapshot, pending, total)) = ctx.with(|st| {
        let k = st.keeper.as_ref()?;
        let pending: Vec<Address> =
            k.meta.iter().filter(|a| k.synced.get(*a) != Some(&k.st.version)).cloned().collect();
        Some((k.st.clone(), pending, k.meta.len()))
    }) else {
        return (0, 0);
    };
    let timeout = ctx.cfg().rpc_timeout_ms;
    let me = ctx.me();
    let body = CatalogSnapshot { keeper: me, snapshot: snapshot.clone() };
    let calls: Vec<_> = pending.iter().map(|a| (a.clone(), ctx.start_rpc::<Empty, _>(a, ST_SYNC, &body, timeout))).collect();
    let mut acked = total - pending.len();
    for (a, call) in calls {
        match call.await {
            Ok(_) => {
                acked += 1;
                ctx.with(|st| {
                    if let Some(k) = st.keeper.as_mut() {
                        k.synced.insert(a, snapshot.version);
                    }
                });
            }
            Err(e) if e.kind == ErrorKind::StaleEpoch => step_down(ctx, "meta replica holds a newer epoch"),
            Err(_) => {}
        }
    }
    (acked, total)
}

fn step_down(ctx: &Ctx, reason: &str) {
    let was = ctx.with(|st| st.keeper.take().is_some());
    if was {
        ctx.event("keeper_stepped_down", json!({ "reason": reason }));
    }
}

async fn put_pointer(ctx: &Ctx) {
    let me = ctx.me();
    let Some(epoch) = ctx.with(|st| st.keeper.as_ref().map(|k| k.st.epoch)) else { return };
    let pointer = PointerRecord { current_keeper: me.clone(), epoch };
    let key = system_table_key(ctx.cfg().m);
    let timeout = ctx.cfg().rpc_timeout_ms;
    let Ok(owner) = ring::lookup(ctx, key).await else { return };
    let merged = if owner.addr == me {
        let merged = ring::store_pointer(ctx, pointer);
        for s in ring::successors(ctx) {
            ctx.send(&s, ST_PTR_PUT, &PointerMsg { pointer: Some(merged.clone()), replicate: false });
        }
        merged
    } else {
        match ctx.rpc::<PointerMsg, _>(&owner.addr, ST_PTR_PUT, &PointerMsg { pointer: Some(pointer), replicate: true }, timeout).await {
            Ok(PointerMsg { pointer: Some(p), .. }) => p,
            _ => return,
        }
    };
    if merged.current_keeper != me && merged.epoch >= epoch {
        step_down(ctx, "pointer names a newer keeper");
    }
}

/// Applies a catalog mutation on the keeper and writes it through to the
/// meta replicas before answering.
async fn mutate<R>(ctx: &Ctx, f: impl FnOnce(&mut SystemTableState) -> Result<R, DbError>) -> Result<R, DbError> {
    let r = ctx.with(|st| {
        let k = st.keeper.as_mut().ok_or_else(|| DbError::new(ErrorKind::NotKeeper, "not the keeper"))?;
        let r = f(&mut k.st)?;
        st.persist_keeper();
        Ok::<_, DbError>(r)
    })?;
    let (acked, total) = sync_meta(ctx).await;
    if total > 0 && acked == 0 {
        ctx.event("catalog_degraded", json!({ "acked": acked, "replicas": total }));
    }
    Ok(r)
}

pub(super) fn handle(ctx: &Ctx, env: Envelope) {
    match env.msg_type.as_str() {
        ST_LOOKUP => {
            let r = env.decode_body::<TableName>().map_err(|e| DbError::new(ErrorKind::Internal, e)).and_then(|req| {
                ctx.with(|st| match &st.keeper {
                    None => Err(DbError::new(ErrorKind::NotKeeper, "not the keeper")),
                    Some(k) => k.st.lookup(&req.table).map(|e| LookupReply { entry: e.clone() }),
                })
            });
            ctx.reply(&env, &r);
        }
        ST_LIST => {
            let me = ctx.me();
            let r = ctx.with(|st| match &st.keeper {
                None => Err(DbError::new(ErrorKind::NotKeeper, "not the keeper")),
                Some(k) => Ok(CatalogSnapshot { keeper: me, snapshot: k.st.clone() }),
            });
            ctx.reply(&env, &r);
        }
        ST_REGISTER | ST_UPDATE | ST_UNREGISTER => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.msg_type.as_str() {
                    ST_UNREGISTER => match env.decode_body::<TableName>() {
                        Ok(req) => mutate(&ctx, |s| s.unregister(&req.table).map(|_| Version { version: s.version })).await,
                        Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                    },
                    kind => match env.decode_body::<Registration>() {
                        Ok(req) => {
                            let register = kind == ST_REGISTER;
                            mutate(&ctx, move |s| {
                                let v = if register {
                                    s.register(&req.table, req.tm, req.meta)?
                                } else {
                                    s.update(&req.table, req.tm, req.meta)?
                                };
                                Ok(Version { version: v })
                            })
                            .await
                        }
                        Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                    },
                };
                if r.is_ok() {
                    ctx.event("catalog_change", json!({ "op": env.msg_type.as_str(), "from": env.from.as_str() }));
                }
                ctx.reply(&env, &r);
            });
        }
        ST_SYNC => {
            let r = match env.decode_body::<CatalogSnapshot>() {
                Ok(m) => accept_sync(ctx, m),
                Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
            };
            ctx.reply(&env, &r);
        }
        ST_PTR_GET => {
            let pointer = ctx.with(|st| st.pointer.clone());
            ctx.reply(&env, &Ok::<_, DbError>(PointerMsg { pointer, replicate: false }));
        }
        ST_PTR_PUT => {
            let r = match env.decode_body::<PointerMsg>() {
                Ok(PointerMsg { pointer: Some(p), replicate }) => {
                    let merged = ring::store_pointer(ctx, p);
                    if replicate {
                        for s in ring::successors(ctx) {
                            ctx.send(&s, ST_PTR_PUT, &PointerMsg { pointer: Some(merged.clone()), replicate: false });
                        }
                    }
                    Ok(PointerMsg { pointer: Some(merged), replicate: false })
                }
                Ok(_) => Err(DbError::new(ErrorKind::Internal, "empty pointer")),
                Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
            };
            ctx.reply(&env, &r);
        }
        ST_RECOVER => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let Ok(req) = env.decode_body::<Failed>() else { return };
                let took = recover_here(&ctx, &req.failed).await;
                ctx.reply(&env, &Ok::<_, DbError>(Flag { value: took }));
            });
        }
        ST_NODE_FAILED => {
            if let Ok(req) = env.decode_body::<Failed>() {
                ctx.with(|st| st.failed.insert(req.failed.clone()));
                if ctx.with(|st| st.is_keeper()) {
                    ctx.spawn(keeper_node_failed(ctx.clone(), req.failed));
                }
            }
        }
        ST_HANDOFF => {
            let ctx = ctx.clone();
            ctx.clone().spawn(async move {
                let r = match env.decode_body::<CatalogSnapshot>() {
                    Ok(m) => {
                        become_keeper(&ctx, m.snapshot, "handoff", &env.from).await;
                        super::empty_ok()
                    }
                    Err(e) => Err(DbError::new(ErrorKind::Internal, e)),
                };
                ctx.reply(&env, &r);
            });
        }
        _ => {}
    }
}

fn accept_sync(ctx: &Ctx, m: CatalogSnapshot) -> Result<Empty, DbError> {
    let stale = || DbError::new(ErrorKind::StaleEpoch, "catalog copy from an older epoch");
    ctx.with(|st| {
        if let Some(k) = &st.keeper {
            if k.st.epoch >= m.snapshot.epoch {
                return Err(stale());
            }
            st.keeper = None;
        }
        if let Some((_, copy)) = &st.st_copy {
            if copy.epoch > m.snapshot.epoch {
                return Err(stale());
            }
        }
        st.persist_json(SNAPSHOT_PATH, &m.snapshot);
        st.keeper_hint = Some(m.keeper.clone());
        st.st_copy = Some((m.keeper, m.snapshot));
        Ok(Empty {})
    })
}

/// Takes over the keeper role from a persisted copy, bumping the epoch.
async fn become_keeper(ctx: &Ctx, mut snapshot: SystemTableState, reason: &str, previous: &Address) {
    let me = ctx.me();
    let epoch = ctx.with(|st| {
        let floor = st.pointer.as_ref().map(|p| p.epoch).unwrap_or(0);
        snapshot.epoch = snapshot.epoch.max(floor) + 1;
        let epoch = snapshot.epoch;
        st.st_copy = None;
        st.keeper = Some(Keeper { st: snapshot, meta: Vec::new(), synced: BTreeMap::new() });
        st.keeper_hint = None;
        st.cache.clear();
        st.persist_keeper();
        epoch
    });
    ring::store_pointer(ctx, PointerRecord { current_keeper: me, epoch });
    ctx.event("keeper_takeover", json!({ "epoch": epoch, "reason": reason, "previous": previous.as_str() }));
    keeper_maintain(ctx).await;
}

/// Runs the recovery this instance can perform for a failed keeper.
/// Returns true when this instance is (now) the keeper.
async fn recover_here(ctx: &Ctx, failed: &Address) -> bool {
    if ctx.with(|st| st.is_keeper()) {
        ctx.spawn(keeper_node_failed(ctx.clone(), failed.clone()));
        return true;
    }
    let copy = ctx.with(|st| match &st.st_copy {
        Some((k, snap)) if k == failed => Some(snap.clone()),
        _ => None,
    });
    match copy {
        Some(snap) => {
            become_keeper(ctx, snap, "keeper failed", failed).await;
            ctx.spawn(keeper_node_failed(ctx.clone(), failed.clone()));
            true
        }
        None => false,
    }
}

/// Database-layer handling of a failure reported by the overlay.
pub(super) async fn on_failure(ctx: Ctx, failed: Address) {
    if recover_here(&ctx, &failed).await {
        return;
    }
    if let Ok(k) = locate_keeper(&ctx).await {
        if k != failed {
            ctx.send(&k, ST_NODE_FAILED, &Failed { failed });
            return;
        }
    }
    let timeout = ctx.cfg().rpc_timeout_ms;
    let succs: Vec<Address> = ctx.with(|st| st.successors().into_iter().filter(|a| !st.failed.contains(a)).collect());
    for s in succs {
        if let Ok(Flag { value: true }) = ctx.rpc::<Flag, _>(&s, ST_RECOVER, &Failed { failed: failed.clone() }, timeout).await {
            return;
        }
    }
    ctx.event("catalog_lost", json!({ "failed": failed.as_str() }));
}

/// Keeper-side reaction to a failed instance: recover the table managers it
/// hosted and tell every manager about the failure.
pub(super) async fn keeper_node_failed(ctx: Ctx, failed: Address) {
    ctx.with(|st| {
        if let Some(k) = st.keeper.as_mut() {
            k.meta.retain(|a| a != &failed);
            k.synced.remove(&failed);
        }
    });
    let orphaned: Vec<CatalogEntry> = ctx.with(|st| {
        st.keeper.as_ref().map(|k| k.st.managed_by(&failed).cloned().collect()).unwrap_or_default()
    });
    let timeout = ctx.cfg().rpc_timeout_ms;
    for entry in orphaned {
        let mut recovered = false;
        let cands: Vec<Address> = ctx.with(|st| {
            entry.tm_meta_replicas.iter().filter(|a| **a != failed && !st.failed.contains(*a)).cloned().collect()
        });
        for cand in cands {
            let req = Recover { table: entry.table_name.clone(), failed: failed.clone() };
            if let Ok(reg) = ctx.rpc::<Registration, _>(&cand, TM_RECOVER, &req, timeout).await {
                let r = mutate(&ctx, |s| s.update(&reg.table, reg.tm.clone(), reg.meta.clone())).await;
                if r.is_ok() {
                    ctx.event(
                        "tm_recovered",
                        json!({ "table": entry.table_name.as_str(), "from": failed.as_str(), "to": cand.as_str() }),
                    );
                    recovered = true;
                    break;
                }
            }
        }
        if !recovered {
            ctx.event("manager_lost", json!({ "table": entry.table_name.as_str(), "failed": failed.as_str() }));
        }
    }
    let managers: BTreeSet<Address> = ctx.with(|st| {
        st.keeper
            .as_ref()
            .map(|k| k.st.entries.values().map(|e| e.tm_address.clone()).filter(|a| a != &failed).collect())
            .unwrap_or_default()
    });
    for m in managers {
        ctx.send(&m, TM_NODE_FAILED, &Failed { failed: failed.clone() });
    }
    keeper_maintain(&ctx).await;
}

/// Finds the keeper through the pointer record at the owner of the
/// System Table key.
pub(super) async fn locate_keeper(ctx: &Ctx) -> Result<Address, DbError> {
    let me = ctx.me();
    if ctx.with(|st| st.is_keeper()) {
        return Ok(me);
    }
    if let Some(h) = ctx.with(|st| st.keeper_hint.clone()) {
        return Ok(h);
    }
    let cfg = ctx.cfg();
    let key = system_table_key(cfg.m);
    for _ in 0..8 {
        if let Ok(owner) = ring::lookup(ctx, key).await {
            let pointer = if owner.addr == me {
                ctx.with(|st| st.pointer.clone())
            } else {
                ctx.rpc::<PointerMsg, _>(&owner.addr, ST_PTR_GET, &Empty {}, cfg.rpc_timeout_ms).await.ok().and_then(|m| m.pointer)
            };
            if let Some(p) = pointer {
                if ctx.with(|st| st.failed.contains(&p.current_keeper)) && p.current_keeper != me {
                    ctx.sleep(cfg.ping_interval_ms).await;
                    continue;
                }
                ctx.with(|st| st.keeper_hint = Some(p.current_keeper.clone()));
                return Ok(p.current_keeper);
            }
        }
        ctx.sleep(cfg.ping_interval_ms).await;
    }
    Err(DbError::new(ErrorKind::BootstrapFailed, "could not locate the System Table"))
}

/// Sends a request to the keeper, relocating it when the hint is stale.
pub(super) async fn call<T: DeserializeOwned, B: Serialize>(ctx: &Ctx, msg_type: &str, body: &B) -> Result<T, DbError> {
    let timeout = ctx.cfg().rpc_timeout_ms;
    let mut last = DbError::new(ErrorKind::BootstrapFailed, "could not reach the System Table");
    for _ in 0..4 {
        let keeper = locate_keeper(ctx).await?;
        match ctx.rpc::<T, _>(&keeper, msg_type, body, timeout).await {
            Err(e) if matches!(e.kind, ErrorKind::NotKeeper | ErrorKind::Timeout) => {
                ctx.with(|st| st.keeper_hint = None);
                last = e;
                ctx.sleep(ctx.cfg().ping_interval_ms / 2 + 1).await;
            }
            r => return r,
        }
    }
    Err(last)
}

pub(super) async fn lookup_table(ctx: &Ctx, table: &str, use_cache: bool) -> Result<CatalogEntry, DbError> {
    if use_cache {
        // An entry naming a manager known to have failed is stale.
        if let Some(e) = ctx.with(|st| st.cache.get(table).filter(|e| !st.failed.contains(&e.tm_address)).cloned()) {
            return Ok(e);
        }
    }
    let r: LookupReply = call(ctx, ST_LOOKUP, &TableName { table: table.into() }).await?;
    ctx.with(|st| st.cache.insert(table.into(), r.entry.clone()));
    Ok(r.entry)
}

pub(super) fn invalidate(ctx: &Ctx, table: &str) {
    ctx.with(|st| st.cache.remove(table));
}

/// Hands the keeper role to `target` during a graceful leave.
pub(super) async fn hand_off(ctx: &Ctx, target: &Address) -> Result<(), DbError> {
    let Some(snapshot) = ctx.with(|st| st.keeper.as_ref().map(|k| k.st.clone())) else { return Ok(()) };
    let me = ctx.me();
    let timeout = ctx.cfg().rpc_timeout_ms;
    ctx.rpc::<Empty, _>(target, ST_HANDOFF, &CatalogSnapshot { keeper: me, snapshot }, timeout).await?;
    ctx.with(|st| {
        st.keeper = None;
        st.keeper_hint = Some(target.clone());
    });
    ctx.event("keeper_handed_off", json!({ "to": target.as_str() }));
    Ok(())
}

/// After a restart: if the pointer still names this instance as keeper,
/// resume the role from the persisted catalog.
pub(super) async fn resume_keeper_if_named(ctx: &Ctx) {
    if ctx.with(|st| st.is_keeper()) {
        return;
    }
    let me = ctx.me();
    let Some(snapshot) = ctx.with(|st| st.load_json::<SystemTableState>(SNAPSHOT_PATH)) else { return };
    ctx.with(|st| st.keeper_hint = None);
    if let Ok(k) = locate_keeper(ctx).await {
        if k == me {
            become_keeper(ctx, snapshot, "restart", &me).await;
        }
    }
}
