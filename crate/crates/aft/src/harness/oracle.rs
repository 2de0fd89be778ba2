//! Brute-force reference for read atomicity.
//!
//! The production read path ([`crate::txn`]) scans candidates newest-first
//! with an early-out; this module restates the correctness condition
//! directly and exhaustively, with no shortcuts, so the two can be checked
//! against each other by differential fuzzing. Keep this file boring: its
//! value is that it is obviously a transcription of the definition.
//!
//! A read set is *atomic* when no observed version can prove another
//! observation stale: for every version `k_i` in the set and every key `l`
//! cowritten by `k_i`'s transaction, if the set also observed some `l_j`,
//! then `j ≥ i`. Observing `l_j` with `j < i` means the reader saw
//! transaction `i`'s write to `k` but missed its write to `l` — a
//! fractured read.

use std::collections::BTreeMap;

use crate::model::{CommitRecord, TransactionId};

/// What a reader observed for one key: the writing transaction and that
/// transaction's full write set.
pub type Observation = (TransactionId, std::collections::BTreeSet<String>);

/// Map of key → observation; the read set under test.
pub type ReadSetView = BTreeMap<String, Observation>;

/// Exhaustive atomicity check over every (observation, cowritten key) pair.
pub fn is_atomic_readset(reads: &ReadSetView) -> bool {
    first_violation(reads).is_none()
}

/// Like [`is_atomic_readset`] but names the offending pair: returns
/// `(key observed too old, key whose observation proves it stale)`.
pub fn first_violation(reads: &ReadSetView) -> Option<(String, String)> {
    for (k, (tid_i, cowritten)) in reads {
        for l in cowritten {
            if let Some((tid_j, _)) = reads.get(l) {
                if tid_j < tid_i {
                    return Some((l.clone(), k.clone()));
                }
            }
        }
    }
    None
}

/// Reference read: enumerate every committed version of `key` in `history`,
/// keep those whose addition leaves the read set atomic, return the newest
/// survivor. `None` covers both "no version exists" and "every version
/// conflicts"; callers that care can inspect `history` themselves.
pub fn oracle_atomic_read(
    key: &str,
    reads: &ReadSetView,
    history: &[CommitRecord],
) -> Option<TransactionId> {
    let mut best: Option<TransactionId> = None;
    for rec in history {
        if !rec.writeset.contains(key) {
            continue;
        }
        let mut trial = reads.clone();
        trial.insert(key.to_string(), (rec.tid, rec.writeset.clone()));
        if is_atomic_readset(&trial) && best.map_or(true, |b| rec.tid > b) {
            best = Some(rec.tid);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TxnUuid;
    use std::collections::BTreeSet;

    fn tid(ts: u64) -> TransactionId {
        TransactionId::new(ts, TxnUuid([ts as u8; 16]))
    }

    fn rec(ts: u64, keys: &[&str]) -> CommitRecord {
        CommitRecord::new(tid(ts), keys.iter().map(|k| k.to_string()).collect())
    }

    fn obs(ts: u64, keys: &[&str]) -> Observation {
        (tid(ts), keys.iter().map(|k| k.to_string()).collect::<BTreeSet<_>>())
    }

    /// Two committed transactions: T1 wrote {l}, T2 wrote {k, l}.
    fn two_txn_history() -> Vec<CommitRecord> {
        vec![rec(1, &["l"]), rec(2, &["k", "l"])]
    }

    #[test]
    fn fresh_read_takes_newest_version() {
        let h = two_txn_history();
        assert_eq!(oracle_atomic_read("k", &ReadSetView::new(), &h), Some(tid(2)));
    }

    #[test]
    fn cowritten_read_must_be_at_least_as_new() {
        // Having observed k from T2, a read of l may not return T1's older
        // version — T2 also wrote l.
        let h = two_txn_history();
        let reads: ReadSetView = [("k".to_string(), obs(2, &["k", "l"]))].into();
        assert_eq!(oracle_atomic_read("l", &reads, &h), Some(tid(2)));
    }

    #[test]
    fn conflicting_candidate_yields_absent() {
        // Having observed l from T1, the only version of k (T2's) would
        // prove that observation stale, so no version of k is readable.
        let h = two_txn_history();
        let reads: ReadSetView = [("l".to_string(), obs(1, &["l"]))].into();
        assert_eq!(oracle_atomic_read("k", &reads, &h), None);
    }

    #[test]
    fn never_written_key_is_absent() {
        let h = two_txn_history();
        assert_eq!(oracle_atomic_read("x", &ReadSetView::new(), &h), None);
        assert_eq!(oracle_atomic_read("x", &ReadSetView::new(), &[]), None);
    }

    #[test]
    fn violation_is_pinpointed() {
        // Read l from T1 but k from T2 which also wrote l: fractured.
        let reads: ReadSetView = [
            ("l".to_string(), obs(1, &["l"])),
            ("k".to_string(), obs(2, &["k", "l"])),
        ]
        .into();
        assert!(!is_atomic_readset(&reads));
        assert_eq!(first_violation(&reads), Some(("l".to_string(), "k".to_string())));
    }

    #[test]
    fn empty_and_singleton_readsets_are_atomic() {
        assert!(is_atomic_readset(&ReadSetView::new()));
        let reads: ReadSetView = [("k".to_string(), obs(2, &["k", "l"]))].into();
        assert!(is_atomic_readset(&reads));
    }

    #[test]
    fn ties_at_equal_tid_are_allowed() {
        // Observing both keys of one transaction is the atomic case par
        // excellence; j ≥ i holds with equality.
        let reads: ReadSetView = [
            ("k".to_string(), obs(2, &["k", "l"])),
            ("l".to_string(), obs(2, &["k", "l"])),
        ]
        .into();
        assert!(is_atomic_readset(&reads));
    }
}
