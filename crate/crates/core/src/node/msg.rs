//! Message type tags and body layouts.

use alloc::string::String;
use alloc::vec::Vec;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{DbError, ErrorKind};
use crate::exec::{QueryPlan, ResultSet, TableInfo};
use crate::overlay::Peer;
use crate::storage::{LogEntry, Row, TableSchema};
use crate::systable::{CatalogEntry, PointerRecord, SystemTableState};
use crate::tablemgr::{LockMode, TableManagerState};
use crate::wire::{body_of, Address, Envelope};

pub const FIND_SUCC: &str = "FIND_SUCC";
pub const FIND_SUCC_REPLY: &str = "FIND_SUCC_REPLY";
pub const GET_PRED: &str = "GET_PRED";
pub const GET_PRED_REPLY: &str = "GET_PRED_REPLY";
pub const NOTIFY: &str = "NOTIFY";
pub const PING: &str = "PING";
pub const PONG: &str = "PONG";
pub const XFER_META: &str = "XFER_META";
pub const RING_LEAVE: &str = "RING_LEAVE";

pub const ST_REGISTER: &str = "ST_REGISTER";
pub const ST_UPDATE: &str = "ST_UPDATE";
pub const ST_UNREGISTER: &str = "ST_UNREGISTER";
pub const ST_LOOKUP: &str = "ST_LOOKUP";
pub const ST_LOOKUP_REPLY: &str = "ST_LOOKUP_REPLY";
pub const ST_LIST: &str = "ST_LIST";
pub const ST_SYNC: &str = "ST_SYNC";
pub const ST_PTR_GET: &str = "ST_PTR_GET";
pub const ST_PTR_REPLY: &str = "ST_PTR_REPLY";
pub const ST_PTR_PUT: &str = "ST_PTR_PUT";
pub const ST_RECOVER: &str = "ST_RECOVER";
pub const ST_NODE_FAILED: &str = "ST_NODE_FAILED";
pub const ST_HANDOFF: &str = "ST_HANDOFF";

pub const TM_LOCK: &str = "TM_LOCK";
pub const TM_LOCK_REPLY: &str = "TM_LOCK_REPLY";
pub const TM_RELEASE: &str = "TM_RELEASE";
pub const TM_UPDATE: &str = "TM_UPDATE";
pub const TM_PREPARE: &str = "TM_PREPARE";
pub const TM_VOTE: &str = "TM_VOTE";
pub const TM_COMMIT: &str = "TM_COMMIT";
pub const TM_ACK: &str = "TM_ACK";
pub const TM_ABORT: &str = "TM_ABORT";
pub const TM_COPY_REQ: &str = "TM_COPY_REQ";
pub const TM_COPY_DATA: &str = "TM_COPY_DATA";
pub const TM_META_SYNC: &str = "TM_META_SYNC";
pub const TM_META_DROP: &str = "TM_META_DROP";
pub const TM_RECOVER: &str = "TM_RECOVER";
pub const TM_NODE_FAILED: &str = "TM_NODE_FAILED";
pub const TM_HANDOFF: &str = "TM_HANDOFF";
pub const TM_REPLICA_LEAVE: &str = "TM_REPLICA_LEAVE";
pub const TM_REJOIN: &str = "TM_REJOIN";
pub const TM_DROP: &str = "TM_DROP";

pub const REPLICA_CREATE: &str = "REPLICA_CREATE";
pub const REPLICA_INSTALL: &str = "REPLICA_INSTALL";
pub const REPLICA_DROP: &str = "REPLICA_DROP";
pub const REPLICA_FETCH: &str = "REPLICA_FETCH";
pub const REPLICA_STATUS: &str = "REPLICA_STATUS";

pub const SQL_EXEC: &str = "SQL_EXEC";
pub const SQL_RESULT: &str = "SQL_RESULT";
pub const EXEC_QUERY: &str = "EXEC_QUERY";
pub const EXEC_RESULT: &str = "EXEC_RESULT";

pub const ADMIN_LEAVE: &str = "ADMIN_LEAVE";
pub const ADMIN_STATUS: &str = "ADMIN_STATUS";
pub const ADMIN_KILL: &str = "ADMIN_KILL";

/// Reply type for a request type.
pub fn reply_type(req: &str) -> String {
    match req {
        FIND_SUCC => FIND_SUCC_REPLY.into(),
        GET_PRED => GET_PRED_REPLY.into(),
        PING => PONG.into(),
        ST_LOOKUP => ST_LOOKUP_REPLY.into(),
        ST_PTR_GET => ST_PTR_REPLY.into(),
        TM_LOCK => TM_LOCK_REPLY.into(),
        TM_PREPARE => TM_VOTE.into(),
        TM_COMMIT => TM_ACK.into(),
        TM_COPY_REQ => TM_COPY_DATA.into(),
        SQL_EXEC => SQL_RESULT.into(),
        EXEC_QUERY => EXEC_RESULT.into(),
        other => alloc::format!("{other}_REPLY"),
    }
}

pub fn encode<T: Serialize>(msg: &T) -> Map<String, Value> {
    body_of(msg).expect("message bodies are JSON objects")
}

pub fn error_body(e: &DbError) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("error".into(), serde_json::to_value(e).expect("errors serialize"));
    m
}

pub fn result_body<T: Serialize>(r: &Result<T, DbError>) -> Map<String, Value> {
    match r {
        Ok(v) => encode(v),
        Err(e) => error_body(e),
    }
}

/// Decodes a reply, surfacing an embedded error or a malformed body.
pub fn decode_reply<T: DeserializeOwned>(env: &Envelope) -> Result<T, DbError> {
    if let Some(e) = env.body.get("error") {
        return Err(serde_json::from_value(e.clone())
            .unwrap_or_else(|_| DbError::new(ErrorKind::Internal, "malformed error reply")));
    }
    env.decode_body().map_err(|e| DbError::new(ErrorKind::Internal, e))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Empty {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindSucc {
    pub key: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindSuccReply {
    pub done: bool,
    pub node: Peer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GetPredReply {
    pub pred: Option<Peer>,
    pub succs: Vec<Peer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingLeave {
    pub successors: Vec<Peer>,
    pub predecessor: Option<Peer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointerMsg {
    pub pointer: Option<PointerRecord>,
    #[serde(default)]
    pub replicate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableName {
    pub table: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registration {
    pub table: String,
    pub tm: Address,
    pub meta: Vec<Address>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Version {
    pub version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LookupReply {
    pub entry: CatalogEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogSnapshot {
    pub keeper: Address,
    pub snapshot: SystemTableState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failed {
    pub failed: Address,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockReq {
    pub table: String,
    pub txn: String,
    pub mode: LockMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockGrant {
    pub info: TableInfo,
    pub commit_seq: u64,
    pub schema: TableSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Release {
    pub table: String,
    pub txn: String,
    #[serde(default)]
    pub routed: Option<Address>,
    #[serde(default)]
    pub elapsed_ms: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateReq {
    pub table: String,
    pub txn: String,
    pub stmts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateReply {
    pub affected: u64,
    pub commit_seq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prepare {
    pub table: String,
    pub txn: String,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vote {
    pub yes: bool,
    pub affected: u64,
    pub rows_after: u64,
    pub applied_seq: u64,
    #[serde(default)]
    pub reason: Option<DbError>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TxnRef {
    pub table: String,
    pub txn: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Applied {
    pub applied_seq: u64,
    pub row_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CopyData {
    pub schema: TableSchema,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Install {
    pub schema: TableSchema,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaSync {
    pub state: TableManagerState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recover {
    pub table: String,
    pub failed: Address,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicaLeave {
    pub table: String,
    pub addr: Address,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejoin {
    pub table: String,
    pub addr: Address,
    pub applied_seq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejoinReply {
    pub keep: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateReplica {
    pub schema: TableSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fetch {
    pub table: String,
    pub min_seq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchReply {
    pub schema: TableSchema,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusReq {
    pub table: String,
    #[serde(default)]
    pub discard_staged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicaStatus {
    pub present: bool,
    pub applied_seq: u64,
    pub row_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SqlExec {
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SqlResult {
    #[serde(default)]
    pub columns: Vec<String>,
    #[serde(default)]
    pub rows: Vec<Vec<crate::sql::Value>>,
    #[serde(default)]
    pub affected: Option<u64>,
    #[serde(default)]
    pub plan: Option<QueryPlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecQuery {
    pub query: String,
    pub plan: QueryPlan,
    pub min_seqs: alloc::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecResult {
    pub result: ResultSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Flag {
    pub value: bool,
}
