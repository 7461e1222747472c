//! Request/reply client for a running instance.

use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use h2o_core::error::{DbError, ErrorKind};
use h2o_core::node::msg::{self, SqlExec, SqlResult, ADMIN_KILL, ADMIN_LEAVE, ADMIN_STATUS, SQL_EXEC};
use h2o_core::node::NodeStatus;
use h2o_core::wire::{Address, Envelope};
use serde_json::{Map, Value};

use crate::net::{read_frame, write_frame};

pub const SQL_TIMEOUT: Duration = Duration::from_secs(60);
const ADMIN_TIMEOUT: Duration = Duration::from_secs(60);

static NEXT: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{0}")]
    Db(#[from] DbError),
    #[error("{0}")]
    Io(String),
}

impl ClientError {
    /// True for errors caused by the statement rather than the cluster.
    pub fn is_user_error(&self) -> bool {
        matches!(self, ClientError::Db(e) if e.kind.is_user_error())
    }
}

fn cluster_fault(message: String) -> ClientError {
    ClientError::Io(message)
}

/// Sends one request and waits for the matching reply.
pub fn request(node: &str, msg_type: &str, body: Map<String, Value>, timeout: Duration) -> Result<Envelope, ClientError> {
    let target = node
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| cluster_fault(format!("cannot resolve {node}")))?;
    let mut conn = TcpStream::connect_timeout(&target, Duration::from_secs(2))
        .map_err(|e| cluster_fault(format!("connecting to {node}: {e}")))?;
    conn.set_read_timeout(Some(timeout)).map_err(|e| cluster_fault(e.to_string()))?;
    let n = NEXT.fetch_add(1, Ordering::Relaxed);
    let me = Address::new(format!("client-{}-{n}", std::process::id()));
    let env = Envelope::new(msg_type, me, Address::new(node), n, body);
    write_frame(&mut conn, &env).map_err(|e| cluster_fault(format!("sending to {node}: {e}")))?;
    loop {
        match read_frame(&mut conn) {
            Ok(Some(reply)) if reply.reply_to() == Some(n) => return Ok(reply),
            Ok(Some(_)) => continue,
            Ok(None) => return Err(cluster_fault(format!("{node} closed the connection"))),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(DbError::new(ErrorKind::Timeout, format!("no answer from {node}")).into())
            }
            Err(e) => return Err(cluster_fault(format!("reading from {node}: {e}"))),
        }
    }
}

pub fn sql(node: &str, text: &str) -> Result<SqlResult, ClientError> {
    let env = request(node, SQL_EXEC, msg::encode(&SqlExec { text: text.into() }), SQL_TIMEOUT)?;
    Ok(msg::decode_reply(&env)?)
}

pub fn status(node: &str) -> Result<NodeStatus, ClientError> {
    let env = request(node, ADMIN_STATUS, Map::new(), ADMIN_TIMEOUT)?;
    Ok(msg::decode_reply(&env)?)
}

pub fn leave(node: &str) -> Result<(), ClientError> {
    let env = request(node, ADMIN_LEAVE, Map::new(), ADMIN_TIMEOUT)?;
    msg::decode_reply::<msg::Empty>(&env)?;
    Ok(())
}

pub fn kill(node: &str) -> Result<(), ClientError> {
    let env = request(node, ADMIN_KILL, Map::new(), ADMIN_TIMEOUT)?;
    msg::decode_reply::<msg::Empty>(&env)?;
    Ok(())
}
