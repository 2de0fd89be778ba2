//! Error types shared across the shim.

use thiserror::Error;

use crate::storage::StorageError;

/// Errors surfaced by the transactional API and the node runtime.
#[derive(Debug, Error)]
pub enum AftError {
    /// The transaction is not known to this node (never started here,
    /// already terminated, or expired).
    #[error("unknown transaction {0}")]
    UnknownTxn(String),

    /// The transaction exists but is no longer accepting operations.
    #[error("transaction {0} is not running")]
    NotRunning(String),

    /// Versions of the key exist, but none can be returned without breaking
    /// read atomicity. The client should abort and retry.
    #[error("no readable version of key {0}")]
    NotReadable(String),

    /// The storage backend failed.
    #[error("storage: {0}")]
    Storage(#[from] StorageError),

    /// A key was rejected by the storage-key encoding.
    #[error("invalid key: {0}")]
    BadKey(String),

    /// The node has crashed (real or injected) and refuses all work.
    #[error("node is down")]
    NodeDown,

    /// A malformed or unexpected wire frame.
    #[error("protocol: {0}")]
    Protocol(String),

    /// Configuration could not be loaded or validated.
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AftError>;

impl AftError {
    /// Stable error code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            AftError::UnknownTxn(_) => "unknown_txn",
            AftError::NotRunning(_) => "not_running",
            AftError::NotReadable(_) => "not_readable",
            AftError::Storage(_) => "storage_error",
            AftError::BadKey(_) => "bad_key",
            AftError::NodeDown => "node_down",
            AftError::Protocol(_) => "protocol",
            AftError::Config(_) => "config",
        }
    }
}
