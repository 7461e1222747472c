//! Errors that cross the wire between instances and reach clients.

use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    Syntax,
    Unsupported,
    Bind,
    NoSuchTable,
    TableExists,
    LockTimeout,
    ReplicaUnavailable,
    WrongManager,
    NotKeeper,
    StaleEpoch,
    TableUnavailable,
    ManagerLost,
    CatalogLost,
    BootstrapFailed,
    JoinFailed,
    LeaveRefused,
    Timeout,
    NotReady,
    Validation,
    Internal,
}

impl ErrorKind {
    /// Errors a coordinator may retry after backing off.
    pub fn is_retryable(self) -> bool {
        matches!(
            self,
            ErrorKind::LockTimeout
                | ErrorKind::ReplicaUnavailable
                | ErrorKind::WrongManager
                | ErrorKind::NotKeeper
                | ErrorKind::StaleEpoch
                | ErrorKind::Timeout
                | ErrorKind::NotReady
                | ErrorKind::TableUnavailable
                | ErrorKind::ManagerLost
        )
    }

    /// Errors caused by the statement itself rather than the cluster.
    pub fn is_user_error(self) -> bool {
        matches!(
            self,
            ErrorKind::Syntax
                | ErrorKind::Unsupported
                | ErrorKind::Bind
                | ErrorKind::NoSuchTable
                | ErrorKind::TableExists
                | ErrorKind::Validation
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind:?}: {message}")]
pub struct DbError {
    pub kind: ErrorKind,
    pub message: String,
}

impl DbError {
    pub fn new(kind: ErrorKind, message: impl ToString) -> Self {
        DbError { kind, message: message.to_string() }
    }
}

impl From<crate::sql::ParseError> for DbError {
    fn from(e: crate::sql::ParseError) -> Self {
        let kind = match e {
            crate::sql::ParseError::Syntax { .. } => ErrorKind::Syntax,
            crate::sql::ParseError::Unsupported { .. } => ErrorKind::Unsupported,
        };
        DbError::new(kind, e)
    }
}

impl From<crate::storage::StorageError> for DbError {
    fn from(e: crate::storage::StorageError) -> Self {
        let kind = match e {
            crate::storage::StorageError::Bind(_) => ErrorKind::Bind,
            _ => ErrorKind::Internal,
        };
        DbError::new(kind, e)
    }
}
