//! Per-transaction atomic write buffer.
//!
//! Uncommitted updates never touch the visible keyspace: they live in
//! memory here, and if a transaction's update set outgrows
//! `spill_threshold`, the overflow is written to *provisional* storage keys
//! — rendered with the sentinel timestamp 0 and the transaction's UUID —
//! which no index ever points at, so no other transaction can read them.
//! Commit later copies spilled bytes to their final versioned locations;
//! abort (or a crash plus the orphan sweep) deletes them.
//!
//! The buffer also backs read-your-writes: a transaction reading a key it
//! wrote gets its own buffered value before any commit metadata is
//! consulted.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{AftError, Result};
use crate::model::{self, PendingTxnHandle, TransactionId, PROVISIONAL_TS};
use crate::storage::{Backend, StorageKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnStatus {
    Running,
    Committing,
    Committed,
    Aborted,
}

/// One entry of a drained write set: either bytes still in memory or a
/// pointer to the provisional key the bytes were spilled to.
#[derive(Clone, Debug, PartialEq)]
pub enum DrainedValue {
    Inline(Vec<u8>),
    Spilled(StorageKey),
}

/// Write-side state of one transaction. Owned by its session; the session
/// lock serializes all access, so no interior synchronization here.
pub struct BufferedTxn {
    pub handle: PendingTxnHandle,
    status: TxnStatus,
    /// Latest in-memory value per key; a later put overwrites.
    updates: BTreeMap<String, Vec<u8>>,
    /// Keys whose latest-at-spill-time value sits at a provisional
    /// storage key. A post-spill put moves the key back to `updates`,
    /// which then wins at drain time.
    spilled: BTreeMap<String, StorageKey>,
    bytes_buffered: usize,
    spill_threshold: usize,
}

impl BufferedTxn {
    pub fn new(handle: PendingTxnHandle, spill_threshold: usize) -> Self {
        BufferedTxn {
            handle,
            status: TxnStatus::Running,
            updates: BTreeMap::new(),
            spilled: BTreeMap::new(),
            bytes_buffered: 0,
            spill_threshold,
        }
    }

    pub fn status(&self) -> TxnStatus {
        self.status
    }

    pub fn bytes_buffered(&self) -> usize {
        self.bytes_buffered
    }

    /// Buffers `value` as the transaction's latest write of `key`,
    /// spilling to storage if the buffer crosses its threshold.
    pub fn put(&mut self, key: &str, value: Vec<u8>, backend: &dyn Backend) -> Result<()> {
        self.require_running()?;
        model::validate_user_key(key)?;
        let new_bytes = key.len() + value.len();
        if let Some(old) = self.updates.insert(key.to_string(), value) {
            self.bytes_buffered -= key.len() + old.len();
        }
        self.bytes_buffered += new_bytes;
        if self.bytes_buffered >= self.spill_threshold {
            self.spill(backend)?;
        }
        Ok(())
    }

    /// The transaction's own latest write of `key`, if any — in-memory
    /// value first, then spilled bytes fetched back from storage. Never
    /// consults commit metadata.
    pub fn read_own_write(&self, key: &str, backend: &dyn Backend) -> Result<Option<Vec<u8>>> {
        if let Some(v) = self.updates.get(key) {
            return Ok(Some(v.clone()));
        }
        if let Some(sk) = self.spilled.get(key) {
            let bytes = backend.get(sk)?.ok_or_else(|| {
                AftError::Storage(crate::storage::StorageError::Corrupt(format!(
                    "spilled value missing at {sk}"
                )))
            })?;
            return Ok(Some(bytes));
        }
        Ok(None)
    }

    /// Writes all in-memory updates to provisional storage keys and drops
    /// them from memory. On backend failure nothing changes: the data is
    /// still buffered and the transaction still running.
    pub fn spill(&mut self, backend: &dyn Backend) -> Result<()> {
        self.require_running()?;
        if self.updates.is_empty() {
            return Err(AftError::Protocol("spill of empty buffer".into()));
        }
        let provisional_tid = TransactionId::new(PROVISIONAL_TS, self.handle.uuid);
        let mut batch = Vec::with_capacity(self.updates.len());
        for (key, value) in &self.updates {
            batch.push((model::encode_data_key(key, &provisional_tid)?, value.clone()));
        }
        backend.put_batch(&batch)?;
        // Re-spilling a key lands on the same provisional location (the
        // rendering depends only on key and uuid), so the fresh value
        // simply replaces the stale one.
        for (key, _) in std::mem::take(&mut self.updates) {
            let sk = model::encode_data_key(&key, &provisional_tid)?;
            self.spilled.insert(key, sk);
        }
        self.bytes_buffered = 0;
        Ok(())
    }

    /// Snapshot of the complete write set for the commit step, one entry
    /// per key with the in-memory value winning over an earlier spill.
    /// Moves the transaction to `Committing`; the buffer itself is kept
    /// intact so a failed commit attempt can be retried.
    pub fn drain_for_commit(&mut self) -> Result<Vec<(String, DrainedValue)>> {
        self.require_running()?;
        self.status = TxnStatus::Committing;
        let mut out: BTreeMap<String, DrainedValue> = self
            .spilled
            .iter()
            .map(|(k, sk)| (k.clone(), DrainedValue::Spilled(sk.clone())))
            .collect();
        for (k, v) in &self.updates {
            out.insert(k.clone(), DrainedValue::Inline(v.clone()));
        }
        Ok(out.into_iter().collect())
    }

    /// Rolls a failed commit attempt back to `Running` so the client can
    /// retry with the same identity.
    pub fn reopen_after_failed_commit(&mut self) {
        debug_assert_eq!(self.status, TxnStatus::Committing);
        self.status = TxnStatus::Running;
    }

    pub fn mark_committed(&mut self) {
        self.status = TxnStatus::Committed;
    }

    /// Every key this transaction has written, buffered or spilled.
    pub fn keys_written(&self) -> BTreeSet<String> {
        self.updates.keys().chain(self.spilled.keys()).cloned().collect()
    }

    /// Provisional storage keys currently holding this transaction's
    /// spilled bytes; commit and abort both end by deleting these.
    pub fn provisional_keys(&self) -> Vec<StorageKey> {
        self.spilled.values().cloned().collect()
    }

    /// Aborts the buffer: frees in-memory updates and hands back the
    /// provisional keys for asynchronous deletion. Idempotent — a second
    /// discard returns nothing and changes nothing.
    pub fn discard(&mut self) -> Vec<StorageKey> {
        if self.status == TxnStatus::Aborted {
            return Vec::new();
        }
        self.status = TxnStatus::Aborted;
        self.updates.clear();
        self.bytes_buffered = 0;
        std::mem::take(&mut self.spilled).into_values().collect()
    }

    fn require_running(&self) -> Result<()> {
        if self.status != TxnStatus::Running {
            return Err(AftError::NotRunning(self.handle.uuid.to_string()));
        }
        Ok(())
    }
}
