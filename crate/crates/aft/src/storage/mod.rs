//! Pluggable key-value backend abstraction.
//!
//! The shim asks exactly one thing of a backend: an acknowledged write is
//! durable. It never relies on read-after-write visibility across nodes,
//! multi-key atomicity, or transactional semantics — all of that is layered
//! on top via commit metadata. Two implementations ship here:
//!
//! * [`MemoryBackend`] — a `BTreeMap` behind a mutex, with deterministic
//!   fault-injection hooks and optional artificial latency for benchmarks.
//! * [`FileBackend`] — an append-only log with CRC-protected records,
//!   fsync-on-ack, and periodic compaction into sorted snapshot files.

mod file;
mod memory;

pub use file::FileBackend;
pub use memory::{BatchApply, MemoryBackend};

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// A fully rendered backend key, e.g. `data/k/000…012-ab…ab` or
/// `commit/000…012-ab…ab`. Construction goes through the encoders in
/// [`crate::model`]; the tuple field is public for tests and backends.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StorageKey(pub String);

impl StorageKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StorageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for StorageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&str> for StorageKey {
    fn from(s: &str) -> Self {
        StorageKey(s.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    /// Persistent state failed validation (bad CRC, impossible lengths).
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("key too large")]
    KeyTooLarge,
    /// Deterministic test fault; carries the operation it hit.
    #[error("injected fault during {0}")]
    Injected(&'static str),
}

/// The backend contract. Implementations must be safe for concurrent
/// callers; every acknowledged mutation must be durable (for whatever
/// durability the backend claims — the in-memory one claims process
/// lifetime only).
pub trait Backend: Send + Sync {
    /// Last acknowledged value for `sk`, or `None`.
    fn get(&self, sk: &StorageKey) -> Result<Option<Vec<u8>>, StorageError>;

    /// Persists every entry before acknowledging. An empty batch is a
    /// caller bug and errors. On failure nothing is promised for any entry
    /// — callers must treat the whole batch as unacknowledged.
    fn put_batch(&self, entries: &[(StorageKey, Vec<u8>)]) -> Result<(), StorageError>;

    /// Keys beginning with `prefix`, lexicographic (or reverse) order,
    /// truncated to `limit` entries when given.
    fn list_prefix(
        &self,
        prefix: &str,
        limit: Option<usize>,
        reverse: bool,
    ) -> Result<Vec<StorageKey>, StorageError>;

    /// Removes keys; deleting an absent key is a no-op.
    fn delete_batch(&self, sks: &[StorageKey]) -> Result<(), StorageError>;
}

/// Convenience for single-entry writes.
pub fn put_one(
    backend: &dyn Backend,
    sk: StorageKey,
    value: Vec<u8>,
) -> Result<(), StorageError> {
    backend.put_batch(&[(sk, value)])
}

/// Uniform per-operation delay range, milliseconds inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySpec {
    pub min_ms: u64,
    pub max_ms: u64,
}

/// Declarative backend selection, deserialized from node config or built
/// by the benchmark harness.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    InMemory {
        /// Per-operation delay, honored only when built in harness mode —
        /// production nodes never slow their backend down artificially.
        #[serde(default)]
        artificial_latency: Option<LatencySpec>,
    },
    DurableFile { root_path: PathBuf },
}

impl BackendConfig {
    pub fn in_memory() -> Self {
        BackendConfig::InMemory { artificial_latency: None }
    }

    /// Instantiates the backend. `harness_mode` gates artificial latency.
    pub fn build(&self, harness_mode: bool) -> Result<Arc<dyn Backend>, StorageError> {
        match self {
            BackendConfig::InMemory { artificial_latency } => {
                let mut b = MemoryBackend::new();
                if harness_mode {
                    if let Some(lat) = artificial_latency {
                        b = b.with_latency(*lat);
                    }
                }
                Ok(Arc::new(b))
            }
            BackendConfig::DurableFile { root_path } => {
                Ok(Arc::new(FileBackend::open(root_path)?))
            }
        }
    }
}
