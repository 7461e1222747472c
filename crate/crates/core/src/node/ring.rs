//! Ring membership over messages: join, stabilization rounds, predecessor
//! pinging and iterative lookup.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde_json::json;

use super::msg::*;
use super::{catalog, coord, manager, Ctx};
use crate::error::{DbError, ErrorKind};
use crate::overlay::{Hop, NodeId, Peer, RingState};
use crate::systable::{system_table_key, PointerRecord, POINTER_PATH};
use crate::wire::{Address, Envelope};

const MAX_HOPS: usize = 256;
const PROBE_EVERY: u64 = 4;

pub(super) async fn boot(ctx: Ctx, bootstrap: Option<Address>) {
    let cfg = ctx.cfg();
    let me = ctx.me();
    match bootstrap {
        None => {
            ctx.with(|st| st.ring = Some(RingState::singleton(st.peer(&me), cfg.s, cfg.ping_timeout_count)));
            ctx.event("ring_formed", json!({}));
            catalog::create_or_resume(&ctx);
        }
        Some(b) => loop {
            ctx.with(|st| st.contacts.insert(b.clone()));
            let peer = ctx.with(|st| st.peer(&me));
            match lookup_from(&ctx, &b, peer.id).await {
                Ok(succ) if succ.addr != me => {
                    ctx.with(|st| st.ring = Some(RingState::joined(peer, succ.clone(), cfg.s, cfg.ping_timeout_count)));
                    ctx.event("ring_joined", json!({ "successor": succ.addr.as_str() }));
                    break;
                }
                Ok(_) => {
                    // The ring still remembers a previous incarnation of this
                    // address; wait for it to be evicted.
                    ctx.event("join_failed", json!({ "reason": "address still in ring" }));
                }
                Err(e) => ctx.event("join_failed", json!({ "reason": e.message })),
            }
            ctx.sleep(cfg.ping_interval_ms).await;
        },
    }
    ctx.with(|st| st.booted = true);
    ctx.spawn(stabilizer(ctx.clone()));
    ctx.spawn(catalog::maintenance(ctx.clone()));
    ctx.spawn(coord::publisher(ctx.clone()));
    ctx.spawn(manager::resume_roles(ctx.clone()));
}

async fn stabilizer(ctx: Ctx) {
    let interval = ctx.cfg().ping_interval_ms;
    // Fixed-rate rounds, so that detection time does not drift with the
    // latency of the stabilize call.
    let mut next = ctx.now() + interval;
    let mut round = 0u64;
    loop {
        ctx.sleep(next.saturating_sub(ctx.now())).await;
        next += interval;
        if ctx.with(|st| st.departed) {
            return;
        }
        ctx.spawn(ping_predecessor(ctx.clone()));
        stabilize_round(&ctx).await;
        round += 1;
        ctx.spawn(probe(ctx.clone(), round));
        // A round that overran skips the slots it missed.
        while next <= ctx.now() {
            next += interval;
        }
    }
}

async fn stabilize_round(ctx: &Ctx) {
    let interval = ctx.cfg().ping_interval_ms;
    let me = ctx.me();
    let succ = match ctx.with(|st| st.ring.as_ref().map(|r| r.successor().addr.clone())) {
        Some(s) => s,
        None => return,
    };
    if succ == me {
        ctx.with(|st| {
            let ring = st.ring.as_mut().expect("joined");
            let pred = ring.predecessor.clone();
            ring.stabilize(pred, Vec::new());
        });
    } else {
        match ctx.rpc::<GetPredReply, _>(&succ, GET_PRED, &Empty {}, interval).await {
            // Entries already suspected here are not re-learned from peers
            // whose own lists are stale. They are pinged instead; any answer
            // clears the suspicion and the next round accepts them.
            Ok(r) => {
                let suspects = ctx.with(|st| {
                    let suspects: Vec<Address> =
                        r.pred.iter().chain(&r.succs).map(|p| p.addr.clone()).filter(|a| st.failed.contains(a)).collect();
                    let pred = r.pred.filter(|p| !st.failed.contains(&p.addr));
                    let succs: Vec<Peer> = r.succs.into_iter().filter(|p| !st.failed.contains(&p.addr)).collect();
                    st.contacts.extend(succs.iter().map(|p| p.addr.clone()));
                    if let Some(ring) = st.ring.as_mut() {
                        ring.stabilize(pred, succs);
                    }
                    suspects
                });
                for a in suspects {
                    let ctx2 = ctx.clone();
                    ctx.spawn(async move {
                        let _ = ctx2.rpc::<Empty, _>(&a, PING, &Empty {}, interval).await;
                    });
                }
            }
            Err(_) => ctx.with(|st| {
                st.failed.insert(succ.clone());
                if let Some(ring) = st.ring.as_mut() {
                    ring.successor_failed(&succ);
                }
            }),
        }
    }
    let next = ctx.with(|st| st.ring.as_ref().map(|r| r.successor().addr.clone()));
    if let Some(next) = next.filter(|n| n != &me) {
        ctx.send(&next, NOTIFY, &Empty {});
    }
}

/// Looks up the key just past this node's id through a random known peer and
/// adopts the answer if it is closer than the current successor. A node cut
/// off from the ring (alone, no predecessor) probes every round; others every
/// `PROBE_EVERY` rounds, which merges rings that formed apart during churn.
async fn probe(ctx: Ctx, round: u64) {
    let me = ctx.me();
    let cfg = ctx.cfg();
    let pick = ctx.with(|st| {
        let ring = st.ring.as_ref()?;
        let cut_off = ring.is_alone() && ring.predecessor.is_none();
        if !cut_off && !round.is_multiple_of(PROBE_EVERY) {
            return None;
        }
        let candidates: Vec<Address> = st
            .contacts
            .iter()
            .filter(|a| **a != me && !st.failed.contains(*a) && !ring.successors.iter().any(|p| &p.addr == *a))
            .cloned()
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let i = st.rng.gen_range(0..candidates.len());
        Some((candidates[i].clone(), ring.me.id))
    });
    let Some((via, id)) = pick else { return };
    let mask = if cfg.m >= 64 { u64::MAX } else { (1u64 << cfg.m) - 1 };
    match lookup_from(&ctx, &via, NodeId(id.0.wrapping_add(1) & mask)).await {
        Ok(found) => {
            let adopted = ctx.with(|st| {
                !st.failed.contains(&found.addr) && st.ring.as_mut().is_some_and(|r| r.consider(found.clone()))
            });
            if adopted {
                ctx.event("ring_merged", json!({ "via": via.as_str(), "successor": found.addr.as_str() }));
            }
        }
        Err(_) => {
            ctx.with(|st| st.contacts.remove(&via));
        }
    }
}

async fn ping_predecessor(ctx: Ctx) {
    let interval = ctx.cfg().ping_interval_ms;
    let Some(pred) = ctx.with(|st| st.ring.as_ref().and_then(|r| r.predecessor.clone())) else { return };
    let answered = ctx.rpc::<Empty, _>(&pred.addr, PING, &Empty {}, interval).await.is_ok();
    let failed = ctx.with(|st| {
        let ring = st.ring.as_mut()?;
        if ring.predecessor.as_ref().map(|p| &p.addr) != Some(&pred.addr) {
            return None;
        }
        ring.ping_result(answered)
    });
    if let Some(f) = failed {
        upcall(&ctx, f.addr);
    }
}

/// The overlay reports a crashed predecessor to the database layer.
fn upcall(ctx: &Ctx, failed: Address) {
    let me = ctx.me();
    ctx.event("upcall", json!({ "failed": failed.as_str(), "detected_by": me.as_str(), "at": ctx.now() }));
    ctx.with(|st| {
        st.failed.insert(failed.clone());
    });
    ctx.spawn(catalog::on_failure(ctx.clone(), failed));
}

/// Iterative lookup starting at this node.
pub(super) async fn lookup(ctx: &Ctx, key: NodeId) -> Result<Peer, DbError> {
    let step = ctx.with(|st| st.ring.as_ref().map(|r| r.lookup_step(key)));
    match step {
        None => Err(DbError::new(ErrorKind::NotReady, "not joined")),
        Some(Hop::Done(p)) => Ok(p),
        Some(Hop::Next(p)) => lookup_from(ctx, &p.addr, key).await,
    }
}

/// Iterative lookup starting at a remote node.
pub(super) async fn lookup_from(ctx: &Ctx, start: &Address, key: NodeId) -> Result<Peer, DbError> {
    let timeout = ctx.cfg().rpc_timeout_ms;
    let mut at = start.clone();
    for _ in 0..MAX_HOPS {
        let r: FindSuccReply = ctx.rpc(&at, FIND_SUCC, &FindSucc { key: key.0 }, timeout).await?;
        ctx.with(|st| st.contacts.insert(r.node.addr.clone()));
        if r.done {
            return Ok(r.node);
        }
        if r.node.addr == at {
            return Ok(r.node);
        }
        at = r.node.addr;
    }
    Err(DbError::new(ErrorKind::Timeout, "lookup exceeded hop limit"))
}

pub(super) fn handle(ctx: &Ctx, env: Envelope) {
    match env.msg_type.as_str() {
        FIND_SUCC => {
            let r = env.decode_body::<FindSucc>().map_err(|e| DbError::new(ErrorKind::Internal, e)).and_then(|req| {
                ctx.with(|st| match st.ring.as_ref() {
                    None => Err(DbError::new(ErrorKind::NotReady, "not joined")),
                    Some(ring) => Ok(match ring.lookup_step(NodeId(req.key)) {
                        Hop::Done(p) => FindSuccReply { done: true, node: p },
                        Hop::Next(p) => FindSuccReply { done: false, node: p },
                    }),
                })
            });
            ctx.reply(&env, &r);
        }
        GET_PRED => {
            let r = ctx.with(|st| match st.ring.as_ref() {
                None => Err(DbError::new(ErrorKind::NotReady, "not joined")),
                Some(ring) => Ok(GetPredReply { pred: ring.predecessor.clone(), succs: ring.successors.clone() }),
            });
            ctx.reply(&env, &r);
        }
        PING => ctx.reply(&env, &super::empty_ok()),
        NOTIFY => notify(ctx, &env.from),
        XFER_META => {
            if let Ok(m) = env.decode_body::<PointerMsg>() {
                if let Some(p) = m.pointer {
                    store_pointer(ctx, p);
                }
            }
        }
        RING_LEAVE => {
            if let Ok(m) = env.decode_body::<RingLeave>() {
                ctx.with(|st| {
                    if let Some(ring) = st.ring.as_mut() {
                        ring.successor_left(&env.from, m.successors);
                        ring.predecessor_left(&env.from, m.predecessor);
                    }
                });
                ctx.event("ring_leave_seen", json!({ "left": env.from.as_str() }));
            }
        }
        _ => {}
    }
}

fn notify(ctx: &Ctx, from: &Address) {
    let key = system_table_key(ctx.cfg().m);
    let handoff = ctx.with(|st| {
        let peer = st.peer(from);
        let ring = st.ring.as_mut()?;
        if !ring.notify(peer) {
            return None;
        }
        // The pointer follows key ownership to the new predecessor.
        match (&st.pointer, ring.owns(key)) {
            (Some(p), false) => Some((ring.predecessor.clone()?.addr, p.clone())),
            _ => None,
        }
    });
    if let Some((to, pointer)) = handoff {
        ctx.send(&to, XFER_META, &PointerMsg { pointer: Some(pointer), replicate: false });
    }
}

/// Keeps the newer of the held and offered pointer records.
pub(super) fn store_pointer(ctx: &Ctx, p: PointerRecord) -> PointerRecord {
    ctx.with(|st| {
        let merged = match st.pointer.take() {
            Some(old) => old.newer(p),
            None => p,
        };
        st.pointer = Some(merged.clone());
        st.persist_json(POINTER_PATH, &merged);
        merged
    })
}

pub(super) fn successors(ctx: &Ctx) -> Vec<Address> {
    ctx.with(|st| st.successors())
}

pub(super) fn leave_ring(ctx: &Ctx) {
    let (succs, pred) = ctx.with(|st| {
        let ring = st.ring.as_ref();
        (
            ring.map(|r| r.successors.clone()).unwrap_or_default(),
            ring.and_then(|r| r.predecessor.clone()),
        )
    });
    let me = ctx.me();
    let body = RingLeave { successors: succs.clone(), predecessor: pred.clone() };
    let mut told: Vec<String> = Vec::new();
    for p in pred.iter().chain(succs.first()) {
        if p.addr != me && !told.iter().any(|t| t == p.addr.as_str()) {
            ctx.send(&p.addr, RING_LEAVE, &body);
            told.push(p.addr.as_str().into());
        }
    }
}
