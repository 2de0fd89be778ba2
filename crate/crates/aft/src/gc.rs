//! Garbage collection and fault recovery.
//!
//! Three cooperating mechanisms keep the version store from growing
//! without bound while never deleting anything a reader could still need:
//!
//! * **Local sweep** (per node): drop index metadata for transactions that
//!   are superseded locally and have no running reader pinning them. This
//!   frees memory only — the bytes in storage stay.
//! * **Global rounds** (coordinator): propose superseded transactions to
//!   every node; only when *all* nodes confirm they dropped a
//!   transaction's metadata are its data keys and commit record deleted
//!   from storage. No node can route a read to metadata it deleted, so the
//!   bytes are unreachable before they are removed.
//! * **Fault scan** (coordinator): the recovery path for commits whose
//!   broadcast was lost with a crashed node. The scan walks the commit
//!   namespace in storage, re-broadcasts anything the coordinator has not
//!   seen, and always runs before GC proposals so recovery wins the race
//!   with deletion.
//!
//! The coordinator also ages out *orphaned provisional keys* — spill
//! leftovers of transactions that died before commit or abort.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{self, CommitRecord, TransactionId, PROVISIONAL_TS};
use crate::replication::{is_superseded, CommitBatch};
use crate::storage::{Backend, StorageKey};
use crate::txn::TxnManager;

/// One GC proposal: transactions the coordinator believes every node can
/// forget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcCandidateSet {
    pub round: u64,
    pub tids: Vec<TransactionId>,
}

/// A node's answer: the subset of proposed transactions it has (now)
/// deleted locally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcAck {
    pub node: String,
    pub round: u64,
    pub deleted: Vec<TransactionId>,
}

/// Sweeps this node's commit index, oldest transactions first: anything
/// superseded and unread gets its metadata dropped and its cached values
/// evicted. Returns what was removed.
pub fn local_gc_sweep(mgr: &TxnManager) -> Vec<TransactionId> {
    let mut idx = mgr.index().write().unwrap();
    let candidates: Vec<TransactionId> = idx
        .iter_oldest_first()
        .filter(|rec| is_superseded(rec, &idx) && !mgr.registry().has_readers(&rec.tid))
        .map(|rec| rec.tid)
        .collect();
    let mut removed = Vec::with_capacity(candidates.len());
    for tid in candidates {
        if let Some(rec) = idx.remove(tid) {
            for key in &rec.writeset {
                mgr.cache().evict(key, &tid);
            }
            removed.push(tid);
        }
    }
    removed
}

/// Node-side handling of a GC proposal. For each candidate: already
/// deleted → confirm; present and droppable under the local-sweep rules →
/// drop now and confirm; never heard of it → tombstone it (a later
/// broadcast must not resurrect what the cluster is deleting) and confirm.
/// Candidates still needed locally are left out of the ack, which blocks
/// their global deletion this round.
///
/// One exception to the tombstone rule: an unknown candidate whose uuid
/// has an open session here is a commit in flight on this very node — the
/// record is durable (the coordinator's scan found it) but the committing
/// thread hasn't indexed it yet. Tombstoning it would leave this node
/// unable to serve a transaction it is about to acknowledge, so the ack is
/// withheld instead and the round retries after the commit finishes.
pub fn handle_gc_candidates(mgr: &TxnManager, node: &str, set: &GcCandidateSet) -> GcAck {
    // Snapshot before locking the index: the sessions map must never be
    // taken while the index lock is held.
    let in_flight: Vec<bool> = set.tids.iter().map(|t| mgr.session_open(&t.uuid)).collect();
    let mut idx = mgr.index().write().unwrap();
    let mut deleted = Vec::new();
    for (&tid, &open) in set.tids.iter().zip(&in_flight) {
        if idx.is_locally_deleted(&tid) {
            deleted.push(tid);
            continue;
        }
        match idx.record(&tid) {
            Some(rec) => {
                if is_superseded(rec, &idx) && !mgr.registry().has_readers(&tid) {
                    let rec = idx.remove(tid).expect("present record removes");
                    for key in &rec.writeset {
                        mgr.cache().evict(key, &tid);
                    }
                    deleted.push(tid);
                }
            }
            None if open => {}
            None => {
                idx.mark_locally_deleted(tid);
                deleted.push(tid);
            }
        }
    }
    GcAck { node: node.to_string(), round: set.round, deleted }
}

struct PendingRound {
    round: u64,
    proposed: BTreeSet<TransactionId>,
    acks: BTreeMap<String, BTreeSet<TransactionId>>,
}

/// The fault manager and global garbage collector, one per cluster.
///
/// It holds the *unpruned* commit ledger: every record any node ever
/// committed (received via the nodes' coordinator-copy broadcasts or
/// recovered by scanning storage). The ledger is authoritative for
/// supersedence at cluster scope and is intentionally stateless across
/// restarts — a fresh coordinator rebuilds it by scanning.
#[derive(Default)]
pub struct Coordinator {
    ledger: BTreeMap<TransactionId, CommitRecord>,
    /// Newest ledger version per key; gives O(log n) supersedence checks.
    newest_per_key: BTreeMap<String, TransactionId>,
    /// Deleted from storage; nothing may bring these back.
    globally_deleted: BTreeSet<TransactionId>,
    next_round: u64,
    pending: Option<PendingRound>,
    /// When each provisional spill key was first noticed, for aging.
    provisional_seen_ms: BTreeMap<StorageKey, u64>,
}

impl Coordinator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds a node's (unpruned) broadcast batch into the ledger.
    pub fn ingest(&mut self, batch: &CommitBatch) {
        for rec in &batch.records {
            self.ingest_record(rec.clone());
        }
    }

    pub fn ingest_record(&mut self, rec: CommitRecord) -> bool {
        if self.globally_deleted.contains(&rec.tid) || self.ledger.contains_key(&rec.tid) {
            return false;
        }
        for key in &rec.writeset {
            let newest = self.newest_per_key.entry(key.clone()).or_insert(rec.tid);
            if rec.tid > *newest {
                *newest = rec.tid;
            }
        }
        self.ledger.insert(rec.tid, rec);
        true
    }

    /// Scans the commit namespace for records the coordinator has never
    /// seen — commits whose broadcast died with their node — ingests them,
    /// and returns them for re-broadcast to every node. Safe to run any
    /// time; a restarted coordinator starts from an empty ledger and
    /// simply rediscovers everything.
    pub fn fault_scan(&mut self, backend: &dyn Backend) -> Result<Vec<CommitRecord>> {
        let keys = backend.list_prefix(model::commit_prefix(), None, false)?;
        let mut recovered = Vec::new();
        for sk in keys {
            let tid = model::decode_commit_key(&sk)?;
            if self.ledger.contains_key(&tid) || self.globally_deleted.contains(&tid) {
                continue;
            }
            // Deleted between list and get: a completed GC round got here
            // first, which is fine.
            let Some(bytes) = backend.get(&sk)? else { continue };
            let rec = CommitRecord::from_bytes(&bytes)?;
            self.ingest_record(rec.clone());
            recovered.push(rec);
        }
        Ok(recovered)
    }

    /// True when every key `rec` wrote has a strictly newer version
    /// somewhere in the cluster.
    pub fn superseded_in_ledger(&self, rec: &CommitRecord) -> bool {
        rec.writeset
            .iter()
            .all(|k| self.newest_per_key.get(k).is_some_and(|newest| *newest > rec.tid))
    }

    /// Opens a GC round over the oldest superseded ledger entries, or
    /// `None` when a round is already in flight or nothing qualifies.
    /// `exclude` holds records recovered by the most recent fault scan:
    /// freshly recovered commits get one full broadcast cycle before they
    /// can be considered for deletion.
    pub fn propose_round(
        &mut self,
        exclude: &BTreeSet<TransactionId>,
        max_candidates: usize,
    ) -> Option<GcCandidateSet> {
        if self.pending.is_some() {
            return None;
        }
        let tids: Vec<TransactionId> = self
            .ledger
            .values()
            .filter(|rec| !exclude.contains(&rec.tid) && self.superseded_in_ledger(rec))
            .take(max_candidates)
            .map(|rec| rec.tid)
            .collect();
        if tids.is_empty() {
            return None;
        }
        self.next_round += 1;
        let round = self.next_round;
        self.pending = Some(PendingRound {
            round,
            proposed: tids.iter().copied().collect(),
            acks: BTreeMap::new(),
        });
        Some(GcCandidateSet { round, tids })
    }

    /// Records one node's ack for the in-flight round. Stale or unknown
    /// rounds are ignored; claims about tids that were never proposed are
    /// dropped.
    pub fn record_ack(&mut self, ack: GcAck) {
        let Some(pending) = self.pending.as_mut() else { return };
        if ack.round != pending.round {
            return;
        }
        let confirmed: BTreeSet<TransactionId> = ack
            .deleted
            .into_iter()
            .filter(|tid| pending.proposed.contains(tid))
            .collect();
        pending.acks.insert(ack.node, confirmed);
    }

    /// Closes the in-flight round: transactions confirmed by **every**
    /// expected node leave the ledger and are returned for storage
    /// deletion. Anything unconfirmed stays and will be re-proposed later.
    pub fn complete_round(&mut self, expected_nodes: &[String]) -> Vec<CommitRecord> {
        let Some(pending) = self.pending.take() else { return Vec::new() };
        let mut deletable = Vec::new();
        'tid: for tid in pending.proposed {
            for node in expected_nodes {
                match pending.acks.get(node) {
                    Some(confirmed) if confirmed.contains(&tid) => {}
                    _ => continue 'tid,
                }
            }
            if let Some(rec) = self.ledger.remove(&tid) {
                self.globally_deleted.insert(tid);
                deletable.push(rec);
            }
        }
        deletable
    }

    /// Ages provisional spill keys: anything first seen longer than
    /// `orphan_age_ms` ago belongs to a transaction that crashed (live
    /// sessions expire far sooner) or already finished (whose committed
    /// bytes were copied to final locations), so its bytes are garbage.
    /// Returns the keys it deleted.
    pub fn orphan_sweep(
        &mut self,
        backend: &dyn Backend,
        now_ms: u64,
        orphan_age_ms: u64,
    ) -> Result<Vec<StorageKey>> {
        let keys = backend.list_prefix(model::data_prefix(), None, false)?;
        let mut live = BTreeSet::new();
        let mut doomed = Vec::new();
        for sk in keys {
            let Ok((_, tid)) = model::decode_data_key(&sk) else { continue };
            if tid.ts != PROVISIONAL_TS {
                continue;
            }
            live.insert(sk.clone());
            let first_seen = *self.provisional_seen_ms.entry(sk.clone()).or_insert(now_ms);
            if now_ms.saturating_sub(first_seen) > orphan_age_ms {
                doomed.push(sk);
            }
        }
        // Forget keys their owners already deleted.
        self.provisional_seen_ms.retain(|sk, _| live.contains(sk));
        if !doomed.is_empty() {
            backend.delete_batch(&doomed)?;
            for sk in &doomed {
                self.provisional_seen_ms.remove(sk);
            }
        }
        Ok(doomed)
    }

    pub fn ledger_len(&self) -> usize {
        self.ledger.len()
    }

    pub fn globally_deleted_len(&self) -> usize {
        self.globally_deleted.len()
    }

    pub fn round_in_flight(&self) -> bool {
        self.pending.is_some()
    }
}

/// Expands commit records into every storage key they own: one data key
/// per written key plus the commit record itself.
pub fn deletion_keys(records: &[CommitRecord]) -> Vec<StorageKey> {
    let mut keys = Vec::new();
    for rec in records {
        for key in &rec.writeset {
            if let Ok(sk) = model::encode_data_key(key, &rec.tid) {
                keys.push(sk);
            }
        }
        keys.push(model::encode_commit_key(&rec.tid));
    }
    keys
}

/// Deletes keys in bounded batches; the unit of work for deletion workers.
pub fn run_deletions(backend: &dyn Backend, keys: &[StorageKey]) -> Result<usize> {
    for chunk in keys.chunks(64) {
        backend.delete_batch(chunk)?;
    }
    Ok(keys.len())
}
