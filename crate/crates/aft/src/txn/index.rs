//! The commit-set cache: every commit record this node knows about, plus a
//! per-key version index derived from the records' write sets.
//!
//! The index is the read path's source of truth — a version exists for
//! readers exactly when its transaction's record is here. Tombstones
//! (`locally_deleted`) remember what this node's GC already dropped so a
//! late-arriving broadcast cannot resurrect it.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{CommitRecord, TransactionId, TxnUuid};
use crate::replication::is_superseded;

#[derive(Default)]
pub struct CommitIndex {
    records: BTreeMap<TransactionId, CommitRecord>,
    /// uuid → committed tid, the idempotence table: a commit retry with a
    /// known uuid gets the original tid back instead of committing twice.
    by_uuid: BTreeMap<TxnUuid, TransactionId>,
    /// key → ascending tids of every indexed version of that key.
    versions: BTreeMap<String, Vec<TransactionId>>,
    /// tids whose metadata this node has garbage-collected; they must not
    /// be re-merged.
    locally_deleted: BTreeSet<TransactionId>,
}

impl CommitIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Idempotently indexes `rec`, making its versions visible to readers.
    /// Returns false (and changes nothing) when the record is already
    /// present, was deleted here before, or is superseded by what is
    /// already indexed — merging it would only resurrect stale state.
    pub fn record_committed(&mut self, rec: CommitRecord) -> bool {
        if self.records.contains_key(&rec.tid) || self.locally_deleted.contains(&rec.tid) {
            return false;
        }
        if is_superseded(&rec, self) {
            return false;
        }
        self.insert(rec);
        true
    }

    /// Indexes this node's own fresh commit. Unlike remote merges, an own
    /// commit is never pruned on arrival: the record is already durable and
    /// the client gets an acknowledgment, so this node must be able to
    /// serve it — even when concurrent broadcasts delivered newer versions
    /// of every key it wrote before the committing thread got here.
    pub fn record_own_commit(&mut self, rec: CommitRecord) -> bool {
        if self.records.contains_key(&rec.tid) || self.locally_deleted.contains(&rec.tid) {
            return false;
        }
        self.insert(rec);
        true
    }

    fn insert(&mut self, rec: CommitRecord) {
        debug_assert!(
            !self.by_uuid.contains_key(&rec.tid.uuid),
            "two commit records share uuid {}",
            rec.tid.uuid
        );
        for key in &rec.writeset {
            let list = self.versions.entry(key.clone()).or_default();
            // Commits almost always arrive newest-last; fall back to a
            // sorted insert for out-of-order merges.
            match list.last() {
                Some(last) if *last > rec.tid => {
                    if let Err(pos) = list.binary_search(&rec.tid) {
                        list.insert(pos, rec.tid);
                    }
                }
                Some(last) if *last == rec.tid => {}
                _ => list.push(rec.tid),
            }
        }
        self.by_uuid.insert(rec.tid.uuid, rec.tid);
        self.records.insert(rec.tid, rec);
    }

    /// Drops `tid` from the index and remembers it as locally deleted.
    /// Returns the record so callers can evict derived state (data cache).
    pub fn remove(&mut self, tid: TransactionId) -> Option<CommitRecord> {
        let rec = self.records.remove(&tid)?;
        for key in &rec.writeset {
            if let Some(list) = self.versions.get_mut(key) {
                if let Ok(pos) = list.binary_search(&tid) {
                    list.remove(pos);
                }
                if list.is_empty() {
                    self.versions.remove(key);
                }
            }
        }
        self.by_uuid.remove(&tid.uuid);
        self.locally_deleted.insert(tid);
        Some(rec)
    }

    /// Marks a tid this node never indexed as deleted anyway, so a future
    /// broadcast of it is ignored. Used when acknowledging GC proposals
    /// for unknown transactions.
    pub fn mark_locally_deleted(&mut self, tid: TransactionId) {
        debug_assert!(!self.records.contains_key(&tid));
        self.locally_deleted.insert(tid);
    }

    pub fn contains(&self, tid: &TransactionId) -> bool {
        self.records.contains_key(tid)
    }

    pub fn is_locally_deleted(&self, tid: &TransactionId) -> bool {
        self.locally_deleted.contains(tid)
    }

    pub fn record(&self, tid: &TransactionId) -> Option<&CommitRecord> {
        self.records.get(tid)
    }

    pub fn tid_for_uuid(&self, uuid: &TxnUuid) -> Option<TransactionId> {
        self.by_uuid.get(uuid).copied()
    }

    /// Ascending tids of the indexed versions of `key` (empty slice if
    /// none).
    pub fn versions_of(&self, key: &str) -> &[TransactionId] {
        self.versions.get(key).map_or(&[], |v| v.as_slice())
    }

    pub fn newest_of(&self, key: &str) -> Option<TransactionId> {
        self.versions.get(key).and_then(|v| v.last()).copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &CommitRecord> {
        self.records.values()
    }

    /// All indexed records as a history slice; the harness oracle takes
    /// this shape.
    pub fn snapshot_records(&self) -> Vec<CommitRecord> {
        self.records.values().cloned().collect()
    }

    /// Cross-checks the records map against the version index; test hook.
    pub fn check_consistency(&self) -> Result<(), String> {
        for (tid, rec) in &self.records {
            for key in &rec.writeset {
                let list = self
                    .versions
                    .get(key)
                    .ok_or_else(|| format!("versions missing key {key}"))?;
                if list.binary_search(tid).is_err() {
                    return Err(format!("versions[{key}] missing {tid}"));
                }
            }
            if self.by_uuid.get(&tid.uuid) != Some(tid) {
                return Err(format!("by_uuid missing {tid}"));
            }
        }
        for (key, list) in &self.versions {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("versions[{key}] not strictly ascending"));
            }
            for tid in list {
                let rec = self
                    .records
                    .get(tid)
                    .ok_or_else(|| format!("versions[{key}] has unindexed {tid}"))?;
                if !rec.writeset.contains(key) {
                    return Err(format!("versions[{key}] lists {tid} which never wrote it"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TxnUuid;

    fn tid(ts: u64) -> TransactionId {
        TransactionId::new(ts, TxnUuid([ts as u8; 16]))
    }

    fn rec(ts: u64, keys: &[&str]) -> CommitRecord {
        CommitRecord::new(tid(ts), keys.iter().map(|k| k.to_string()).collect())
    }

    #[test]
    fn insert_is_idempotent() {
        let mut idx = CommitIndex::new();
        assert!(idx.record_committed(rec(7, &["k", "l"])));
        assert!(!idx.record_committed(rec(7, &["k", "l"])));
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.versions_of("k"), &[tid(7)]);
        assert_eq!(idx.versions_of("l"), &[tid(7)]);
        idx.check_consistency().unwrap();
    }

    #[test]
    fn out_of_order_merge_keeps_versions_sorted() {
        let mut idx = CommitIndex::new();
        // Newest arrives first (remote merge), then an older record of a
        // different key set that is not superseded.
        assert!(idx.record_committed(rec(9, &["k"])));
        assert!(idx.record_committed(rec(3, &["k", "l"])));
        assert_eq!(idx.versions_of("k"), &[tid(3), tid(9)]);
        idx.check_consistency().unwrap();
    }

    #[test]
    fn superseded_merge_is_skipped() {
        let mut idx = CommitIndex::new();
        assert!(idx.record_committed(rec(9, &["k", "l"])));
        // Everything rec(3) wrote already has a newer version; merging it
        // could only serve stale reads.
        assert!(!idx.record_committed(rec(3, &["k"])));
        assert_eq!(idx.len(), 1);
        idx.check_consistency().unwrap();
    }

    #[test]
    fn own_commit_is_indexed_even_when_already_superseded() {
        // A broadcast can deliver a newer version of every written key
        // before the committing thread reaches its own index; the node
        // still has to serve what it acknowledged.
        let mut idx = CommitIndex::new();
        assert!(idx.record_committed(rec(9, &["k"])));
        assert!(idx.record_own_commit(rec(3, &["k"])));
        assert_eq!(idx.versions_of("k"), &[tid(3), tid(9)]);
        // Tombstones still win: GC'd means gone.
        idx.remove(tid(3));
        assert!(!idx.record_own_commit(rec(3, &["k"])));
        idx.check_consistency().unwrap();
    }

    #[test]
    fn removal_tombstones_against_resurrection() {
        let mut idx = CommitIndex::new();
        idx.record_committed(rec(5, &["k"]));
        let removed = idx.remove(tid(5)).unwrap();
        assert_eq!(removed.writeset.len(), 1);
        assert!(idx.versions_of("k").is_empty());
        assert!(idx.is_locally_deleted(&tid(5)));
        assert!(!idx.record_committed(rec(5, &["k"])), "tombstone blocks re-merge");
        idx.check_consistency().unwrap();
    }

    #[test]
    fn uuid_lookup_tracks_insert_and_remove() {
        let mut idx = CommitIndex::new();
        let r = rec(5, &["k"]);
        let uuid = r.tid.uuid;
        idx.record_committed(r);
        assert_eq!(idx.tid_for_uuid(&uuid), Some(tid(5)));
        idx.remove(tid(5));
        assert_eq!(idx.tid_for_uuid(&uuid), None);
    }
}
