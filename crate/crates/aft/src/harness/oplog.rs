//! The operation log a workload run leaves behind, and the anomaly counts
//! it is judged by.
//!
//! Counting is per transaction, not per operation: a transaction with
//! three fractured reads is one fractured transaction. Only committed
//! transactions are judged — an aborted attempt never returned data to
//! anyone.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{AftError, Result};
use crate::harness::oracle::{is_atomic_readset, ReadSetView};
use crate::model::{TransactionId, TxnUuid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub client: usize,
    pub txn: TxnUuid,
    pub hop: usize,
    pub kind: OpKind,
    pub key: String,
    /// For reads: the committed version observed, with its cowritten set.
    /// `None` for NULL reads and for reads served by the transaction's
    /// own buffer.
    pub observed: Option<(TransactionId, BTreeSet<String>)>,
    /// The read was answered by this transaction's own pending write.
    pub own_write: bool,
    /// For direct-to-storage writes: the version id the write created.
    /// Buffered writes have no id until commit.
    pub written: Option<TransactionId>,
}

/// How one transaction attempt ended. Every uuid that appears in the
/// record stream must have exactly one outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TxnOutcome {
    pub client: usize,
    pub txn: TxnUuid,
    pub committed: bool,
    pub tid: Option<TransactionId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpLog {
    pub records: Vec<OpRecord>,
    pub outcomes: Vec<TxnOutcome>,
}

impl OpLog {
    /// Joins per-client shards. Records stay in per-client order, which is
    /// the only order anomaly counting needs — a transaction never spans
    /// clients.
    pub fn merge(shards: impl IntoIterator<Item = OpLog>) -> OpLog {
        let mut out = OpLog::default();
        for shard in shards {
            out.records.extend(shard.records);
            out.outcomes.extend(shard.outcomes);
        }
        out
    }

    pub fn committed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.committed).count()
    }
}

/// Counts anomalous transactions: reads-your-writes violations and
/// fractured reads.
///
/// A transaction is RYW-anomalous when a read of a key it previously
/// wrote is answered by anything other than its own latest write. It is
/// FR-anomalous when two reads of one key observe different committed
/// versions (repeatable read), or when the set of observed versions
/// breaks the cowritten-newness condition — some observed version's
/// writer also wrote a key this transaction observed older.
///
/// Reads after a self-write of the same key belong to the RYW check only;
/// NULL reads observe no version and are outside the readset.
pub fn count_anomalies(log: &OpLog) -> Result<(usize, usize)> {
    let mut outcomes: BTreeMap<TxnUuid, &TxnOutcome> = BTreeMap::new();
    for o in &log.outcomes {
        if outcomes.insert(o.txn, o).is_some() {
            return Err(AftError::Protocol(format!(
                "malformed op log: duplicate outcome for {}",
                o.txn
            )));
        }
    }

    let mut ops_by_txn: BTreeMap<TxnUuid, Vec<&OpRecord>> = BTreeMap::new();
    for rec in &log.records {
        if !outcomes.contains_key(&rec.txn) {
            return Err(AftError::Protocol(format!(
                "malformed op log: record for {} has no outcome",
                rec.txn
            )));
        }
        ops_by_txn.entry(rec.txn).or_default().push(rec);
    }

    let mut ryw = 0usize;
    let mut fr = 0usize;
    for (uuid, outcome) in &outcomes {
        if !outcome.committed {
            continue;
        }
        let ops = ops_by_txn.get(uuid).map(Vec::as_slice).unwrap_or(&[]);
        let (txn_ryw, txn_fr) = judge_txn(ops)?;
        ryw += txn_ryw as usize;
        fr += txn_fr as usize;
    }
    Ok((ryw, fr))
}

fn judge_txn(ops: &[&OpRecord]) -> Result<(bool, bool)> {
    let mut ryw = false;
    let mut fr = false;
    // Latest self-written version per key; None means "buffered, id
    // pending" and only an own-buffer read can satisfy it.
    let mut self_written: BTreeMap<&str, Option<TransactionId>> = BTreeMap::new();
    let mut view: ReadSetView = ReadSetView::new();
    let mut last_hop = 0usize;

    for op in ops {
        if op.hop < last_hop {
            return Err(AftError::Protocol(
                "malformed op log: hops out of order".into(),
            ));
        }
        last_hop = op.hop;
        match op.kind {
            OpKind::Write => {
                self_written.insert(&op.key, op.written);
            }
            OpKind::Read => {
                if let Some(expected) = self_written.get(op.key.as_str()) {
                    let satisfied = op.own_write
                        || matches!(
                            (&op.observed, expected),
                            (Some((tid, _)), Some(exp)) if tid == exp
                        );
                    if !satisfied {
                        ryw = true;
                    }
                } else if !op.own_write {
                    if let Some((tid, cowritten)) = &op.observed {
                        match view.get(&op.key) {
                            Some((seen, _)) if seen != tid => fr = true,
                            Some(_) => {}
                            None => {
                                view.insert(op.key.clone(), (*tid, cowritten.clone()));
                            }
                        }
                    }
                }
            }
        }
    }
    if !is_atomic_readset(&view) {
        fr = true;
    }
    Ok((ryw, fr))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uuid(n: u8) -> TxnUuid {
        TxnUuid([n; 16])
    }

    fn tid(ts: u64, n: u8) -> TransactionId {
        TransactionId::new(ts, uuid(n))
    }

    fn cowrote(keys: &[&str]) -> BTreeSet<String> {
        keys.iter().map(|k| k.to_string()).collect()
    }

    fn read(txn: u8, hop: usize, key: &str, obs: Option<(TransactionId, BTreeSet<String>)>) -> OpRecord {
        OpRecord {
            client: 0,
            txn: uuid(txn),
            hop,
            kind: OpKind::Read,
            key: key.into(),
            observed: obs,
            own_write: false,
            written: None,
        }
    }

    fn own_read(txn: u8, hop: usize, key: &str) -> OpRecord {
        OpRecord {
            own_write: true,
            ..read(txn, hop, key, None)
        }
    }

    fn write(txn: u8, hop: usize, key: &str, written: Option<TransactionId>) -> OpRecord {
        OpRecord {
            client: 0,
            txn: uuid(txn),
            hop,
            kind: OpKind::Write,
            key: key.into(),
            observed: None,
            own_write: false,
            written,
        }
    }

    fn committed(txn: u8) -> TxnOutcome {
        TxnOutcome {
            client: 0,
            txn: uuid(txn),
            committed: true,
            tid: Some(tid(99, txn)),
        }
    }

    #[test]
    fn clean_log_counts_zero() {
        let log = OpLog {
            records: vec![
                read(1, 0, "k", Some((tid(3, 7), cowrote(&["k"])))),
                write(1, 0, "l", None),
                own_read(1, 1, "l"),
                read(1, 1, "k", Some((tid(3, 7), cowrote(&["k"])))),
            ],
            outcomes: vec![committed(1)],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (0, 0));
    }

    #[test]
    fn foreign_answer_to_own_key_is_ryw() {
        // The transaction wrote l, then its read of l came back with
        // someone else's version.
        let log = OpLog {
            records: vec![
                write(1, 0, "l", None),
                read(1, 1, "l", Some((tid(5, 9), cowrote(&["l"])))),
            ],
            outcomes: vec![committed(1)],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (1, 0));
    }

    #[test]
    fn null_answer_to_own_key_is_ryw() {
        let log = OpLog {
            records: vec![write(1, 0, "l", None), read(1, 1, "l", None)],
            outcomes: vec![committed(1)],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (1, 0));
    }

    #[test]
    fn direct_write_satisfied_by_version_id() {
        // Direct-to-storage mode: the read observes the exact version the
        // transaction wrote, identified by id rather than a buffer flag.
        let mine = tid(8, 1);
        let log = OpLog {
            records: vec![
                write(1, 0, "l", Some(mine)),
                read(1, 1, "l", Some((mine, cowrote(&["l"])))),
            ],
            outcomes: vec![committed(1)],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (0, 0));
    }

    #[test]
    fn fractured_pair_is_fr() {
        // T7 wrote {k, l} at ts 5; we saw its k but an older l.
        let log = OpLog {
            records: vec![
                read(1, 0, "k", Some((tid(5, 7), cowrote(&["k", "l"])))),
                read(1, 1, "l", Some((tid(2, 3), cowrote(&["l"])))),
            ],
            outcomes: vec![committed(1)],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (0, 1));
    }

    #[test]
    fn unrepeatable_read_is_fr() {
        let log = OpLog {
            records: vec![
                read(1, 0, "k", Some((tid(2, 3), cowrote(&["k"])))),
                read(1, 1, "k", Some((tid(5, 7), cowrote(&["k"])))),
            ],
            outcomes: vec![committed(1)],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (0, 1));
    }

    #[test]
    fn counts_transactions_not_operations() {
        // One transaction with two fractured observations is one FR.
        let log = OpLog {
            records: vec![
                read(1, 0, "k", Some((tid(5, 7), cowrote(&["k", "l", "m"])))),
                read(1, 1, "l", Some((tid(2, 3), cowrote(&["l"])))),
                read(1, 1, "m", Some((tid(1, 2), cowrote(&["m"])))),
            ],
            outcomes: vec![committed(1)],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (0, 1));
    }

    #[test]
    fn aborted_attempts_are_not_judged() {
        let log = OpLog {
            records: vec![
                read(1, 0, "k", Some((tid(5, 7), cowrote(&["k", "l"])))),
                read(1, 1, "l", Some((tid(2, 3), cowrote(&["l"])))),
            ],
            outcomes: vec![TxnOutcome {
                client: 0,
                txn: uuid(1),
                committed: false,
                tid: None,
            }],
        };
        assert_eq!(count_anomalies(&log).unwrap(), (0, 0));
    }

    #[test]
    fn record_without_outcome_is_malformed() {
        let log = OpLog {
            records: vec![write(1, 0, "k", None)],
            outcomes: vec![],
        };
        assert!(count_anomalies(&log).is_err());
    }

    #[test]
    fn merge_preserves_shard_order() {
        let a = OpLog {
            records: vec![write(1, 0, "k", None)],
            outcomes: vec![committed(1)],
        };
        let b = OpLog {
            records: vec![write(2, 0, "k", None)],
            outcomes: vec![committed(2)],
        };
        let merged = OpLog::merge([a, b]);
        assert_eq!(merged.records.len(), 2);
        assert_eq!(merged.committed(), 2);
        assert_eq!(count_anomalies(&merged).unwrap(), (0, 0));
    }
}
