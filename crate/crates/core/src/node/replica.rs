//! Data replica side of two-phase commit, copying and reads.

use alloc::format;

use serde_json::json;

use super::msg::*;
use super::{Ctx, Staged};
use crate::error::{DbError, ErrorKind};
use crate::storage::ReplicaStore;
use crate::wire::Envelope;

fn missing(table: &str) -> DbError {
    DbError::new(ErrorKind::ReplicaUnavailable, format!("no replica of {table} here"))
}

fn internal(e: impl core::fmt::Display) -> DbError {
    DbError::new(ErrorKind::Internal, e)
}

pub(super) fn handle(ctx: &Ctx, env: Envelope) {
    match env.msg_type.as_str() {
        TM_PREPARE => {
            let r = env.decode_body::<Prepare>().map_err(internal).map(|req| prepare(ctx, req));
            ctx.reply(&env, &r);
        }
        TM_COMMIT => {
            let r = env.decode_body::<TxnRef>().map_err(internal).and_then(|req| commit(ctx, &req));
            ctx.reply(&env, &r);
        }
        TM_ABORT => {
            if let Ok(req) = env.decode_body::<TxnRef>() {
                ctx.with(|st| {
                    if st.staged.get(&req.table).is_some_and(|s| s.txn == req.txn) {
                        st.staged.remove(&req.table);
                    }
                });
            }
        }
        TM_COPY_REQ => {
            let r = env.decode_body::<TableName>().map_err(internal).and_then(|req| {
                ctx.with(|st| {
                    let rep = st.replicas.get(&req.table).ok_or_else(|| missing(&req.table))?;
                    Ok(CopyData { schema: rep.schema.clone(), entries: rep.log.clone() })
                })
            });
            ctx.reply(&env, &r);
        }
        REPLICA_CREATE => {
            let r = env.decode_body::<CreateReplica>().map_err(internal).and_then(|req| {
                ctx.with(|st| {
                    let table = req.schema.name.clone();
                    let store = ReplicaStore::create(&mut *st.disk, req.schema)?;
                    st.staged.remove(&table);
                    st.replicas.insert(table, store);
                    Ok(Empty {})
                })
            });
            ctx.reply(&env, &r);
        }
        REPLICA_INSTALL => {
            let r = env.decode_body::<Install>().map_err(internal).and_then(|req| {
                ctx.with(|st| {
                    let table = req.schema.name.clone();
                    let store = ReplicaStore::install(&mut *st.disk, req.schema, &req.entries)?;
                    let applied = Applied { applied_seq: store.applied_seq, row_count: store.rows.len() as u64 };
                    st.staged.remove(&table);
                    st.replicas.insert(table, store);
                    Ok(applied)
                })
            });
            if let Ok(a) = &r {
                ctx.event("replica_installed", json!({ "from": env.from.as_str(), "applied_seq": a.applied_seq }));
            }
            ctx.reply(&env, &r);
        }
        REPLICA_DROP => {
            if let Ok(req) = env.decode_body::<TableName>() {
                ctx.with(|st| {
                    st.staged.remove(&req.table);
                    if st.replicas.remove(&req.table).is_some() {
                        let _ = ReplicaStore::destroy(&mut *st.disk, &req.table);
                    }
                });
            }
        }
        REPLICA_FETCH => {
            let r = env.decode_body::<Fetch>().map_err(internal).and_then(|req| {
                ctx.with(|st| {
                    let rep = st.replicas.get(&req.table).ok_or_else(|| missing(&req.table))?;
                    if rep.applied_seq < req.min_seq {
                        return Err(DbError::new(
                            ErrorKind::ReplicaUnavailable,
                            format!("replica of {} is at {} behind {}", req.table, rep.applied_seq, req.min_seq),
                        ));
                    }
                    Ok(FetchReply { schema: rep.schema.clone(), rows: rep.scan(None)? })
                })
            });
            ctx.reply(&env, &r);
        }
        REPLICA_STATUS => {
            let r = env.decode_body::<StatusReq>().map_err(internal).map(|req| {
                ctx.with(|st| {
                    if req.discard_staged {
                        st.staged.remove(&req.table);
                    }
                    match st.replicas.get(&req.table) {
                        Some(rep) => ReplicaStatus {
                            present: true,
                            applied_seq: rep.applied_seq,
                            row_count: rep.rows.len() as u64,
                        },
                        None => ReplicaStatus { present: false, applied_seq: 0, row_count: 0 },
                    }
                })
            });
            ctx.reply(&env, &r);
        }
        _ => {}
    }
}

/// Validates the entries against a scratch copy and stages them. Any
/// earlier staged transaction for the table is discarded: the manager only
/// prepares under an exclusive lock, so it can no longer commit.
fn prepare(ctx: &Ctx, req: Prepare) -> Vote {
    ctx.with(|st| {
        st.staged.remove(&req.table);
        let no = |applied_seq: u64, reason: DbError| Vote { yes: false, affected: 0, rows_after: 0, applied_seq, reason: Some(reason) };
        let Some(rep) = st.replicas.get(&req.table) else {
            return no(0, missing(&req.table));
        };
        let applied = rep.applied_seq;
        if let Some(first) = req.entries.first() {
            if first.seq != applied + 1 {
                let e = DbError::new(
                    ErrorKind::ReplicaUnavailable,
                    format!("replica of {} is at {applied}, prepare starts at {}", req.table, first.seq),
                );
                return no(applied, e);
            }
        }
        let mut scratch = rep.clone();
        let mut affected = 0u64;
        for e in &req.entries {
            match scratch.apply_in_memory(e) {
                Ok(n) => affected += n as u64,
                Err(err) => return no(applied, err.into()),
            }
        }
        let rows_after = scratch.rows.len() as u64;
        st.staged.insert(req.table.clone(), Staged { txn: req.txn, entries: req.entries });
        Vote { yes: true, affected, rows_after, applied_seq: applied, reason: None }
    })
}

fn commit(ctx: &Ctx, req: &TxnRef) -> Result<Applied, DbError> {
    ctx.with(|st| {
        let staged = match st.staged.get(&req.table) {
            Some(s) if s.txn == req.txn => st.staged.remove(&req.table),
            _ => None,
        };
        let st = &mut *st;
        let rep = st.replicas.get_mut(&req.table).ok_or_else(|| missing(&req.table))?;
        match staged {
            Some(s) => {
                for e in &s.entries {
                    rep.apply_committed(&mut *st.disk, e)?;
                }
            }
            // A repeated COMMIT for work already applied is acknowledged again.
            None if rep.log.last().is_some_and(|e| e.txn == req.txn) => {}
            None => {
                return Err(DbError::new(ErrorKind::ReplicaUnavailable, format!("nothing staged for {}", req.txn)));
            }
        }
        Ok(Applied { applied_seq: rep.applied_seq, row_count: rep.rows.len() as u64 })
    })
}
