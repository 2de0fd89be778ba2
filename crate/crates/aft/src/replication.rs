//! Commit-set multicast between nodes.
//!
//! Nodes never coordinate on the critical path; instead each node
//! periodically broadcasts the commit records it produced since the last
//! tick. Two refinements keep the traffic and the receivers' indexes small:
//!
//! * *Pruning*: a record all of whose keys already have newer local
//!   versions (it is **superseded**) is dropped from the peer broadcast —
//!   peers could never serve a read from it. The coordinator copy is never
//!   pruned, because the fault manager must see everything.
//! * *Merge filtering*: receivers likewise skip superseded or
//!   already-deleted records instead of indexing them.
//!
//! Supersedence only grows over time (key version sets only gain newer
//! entries until GC removes the record itself), which is what makes both
//! ends of this protocol safe.

use serde::{Deserialize, Serialize};

use crate::model::CommitRecord;
use crate::txn::CommitIndex;

/// True when every key `rec` wrote already has a strictly newer version in
/// `index` — no read routed through `index` can ever need `rec` again.
/// Works both for records present in the index and for candidates being
/// considered for merge.
pub fn is_superseded(rec: &CommitRecord, index: &CommitIndex) -> bool {
    rec.writeset
        .iter()
        .all(|key| index.newest_of(key).map_or(false, |newest| newest > rec.tid))
}

/// One multicast payload: the records a node committed since its previous
/// broadcast, stamped with a per-origin sequence number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitBatch {
    pub origin: String,
    pub seq: u64,
    pub records: Vec<CommitRecord>,
}

/// Per-node broadcast state: the origin id and a monotone sequence.
pub struct Broadcaster {
    origin: String,
    seq: std::sync::atomic::AtomicU64,
}

/// A broadcast tick's output: the pruned batch for peers and the complete
/// batch for the fault manager, sharing one sequence number.
pub struct BroadcastPair {
    pub peers: CommitBatch,
    pub coordinator: CommitBatch,
}

impl Broadcaster {
    pub fn new(origin: impl Into<String>) -> Self {
        Broadcaster { origin: origin.into(), seq: std::sync::atomic::AtomicU64::new(0) }
    }

    /// Packages `fresh` (this tick's newly committed records) into the two
    /// outgoing batches. An empty tick still advances the sequence — the
    /// empty batch doubles as a heartbeat. With `prune` off the peer batch
    /// is the full set (used to measure what pruning saves).
    pub fn collect(
        &self,
        fresh: Vec<CommitRecord>,
        index: &CommitIndex,
        prune: bool,
    ) -> BroadcastPair {
        let seq = self.seq.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        let pruned: Vec<CommitRecord> = if prune {
            fresh.iter().filter(|r| !is_superseded(r, index)).cloned().collect()
        } else {
            fresh.clone()
        };
        BroadcastPair {
            peers: CommitBatch { origin: self.origin.clone(), seq, records: pruned },
            coordinator: CommitBatch { origin: self.origin.clone(), seq, records: fresh },
        }
    }
}

/// Folds a received batch into the local index. Skips records the index
/// already deleted or that are superseded locally; returns how many were
/// actually merged. Replayed batches merge to zero — every check is
/// idempotent.
pub fn merge_remote(batch: &CommitBatch, index: &mut CommitIndex) -> usize {
    batch
        .records
        .iter()
        .filter(|rec| index.record_committed((*rec).clone()))
        .count()
}
