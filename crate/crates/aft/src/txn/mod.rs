//! Transaction manager: sessions, the atomic read algorithm, and the
//! write-ordered commit protocol.
//!
//! # Visibility rule
//!
//! A transaction's versions become readable only after its commit record
//! is durable *and* indexed. The commit path therefore orders its writes:
//! data versions first, then the commit record, and only then the index
//! insert that makes the versions reachable. A crash between any two steps
//! leaves either a fully invisible or a fully recoverable transaction —
//! never a partial one.
//!
//! # Read rule
//!
//! Reads go through three layers, strongest claim first: the transaction's
//! own writes (read-your-writes), the transaction's previous reads
//! (repeatable read), and finally [`atomic_read`] against the commit
//! index, which picks the newest version of the key that cannot prove any
//! earlier observation in this transaction stale.
//!
//! # Identity and retries
//!
//! A transaction's UUID is chosen at start and survives client retries.
//! Commit is idempotent per UUID: once a commit record with a UUID exists,
//! re-committing returns the original transaction ID instead of writing
//! anything, which is what makes retry-after-timeout safe (exactly-once
//! visibility, at-least-once attempts).

mod cache;
mod index;

pub use cache::DataCache;
pub use index::CommitIndex;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::buffer::{BufferedTxn, DrainedValue};
use crate::error::{AftError, Result};
use crate::harness::oracle::{self, ReadSetView};
use crate::model::{
    self, Clock, CommitRecord, PendingTxnHandle, TransactionId, TxnUuid,
};
use crate::replication::CommitBatch;
use crate::storage::{put_one, Backend, StorageError, StorageKey};

/// Tuning knobs; defaults suit production, tests shrink them.
#[derive(Clone, Debug)]
pub struct TxnOptions {
    /// Buffered bytes per transaction before updates spill to storage.
    pub spill_threshold: usize,
    /// Idle time after which a session is aborted.
    pub txn_timeout_ms: u64,
    /// Newest commit records loaded when warming an empty index.
    pub bootstrap_limit: usize,
    /// Data cache capacity.
    pub cache_bytes: usize,
}

impl Default for TxnOptions {
    fn default() -> Self {
        TxnOptions {
            spill_threshold: 4 << 20,
            txn_timeout_ms: 60_000,
            bootstrap_limit: 10_000,
            cache_bytes: 64 << 20,
        }
    }
}

/// Which running transactions have read from which committed transaction.
/// Local GC must not drop a record while somebody's read set references
/// it — the reader's later reads still need the record's cowritten set,
/// and its values must stay fetchable.
#[derive(Default)]
pub struct ReadRegistry {
    inner: Mutex<std::collections::BTreeMap<TransactionId, BTreeSet<TxnUuid>>>,
}

impl ReadRegistry {
    fn register(&self, source: TransactionId, reader: TxnUuid) {
        self.inner.lock().unwrap().entry(source).or_default().insert(reader);
    }

    fn release<I: IntoIterator<Item = TransactionId>>(&self, reader: TxnUuid, sources: I) {
        let mut map = self.inner.lock().unwrap();
        for source in sources {
            if let Some(readers) = map.get_mut(&source) {
                readers.remove(&reader);
                if readers.is_empty() {
                    map.remove(&source);
                }
            }
        }
    }

    pub fn has_readers(&self, source: &TransactionId) -> bool {
        self.inner.lock().unwrap().contains_key(source)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What one `get` observed; the wire layer and the benchmark log both want
/// the metadata, not just the bytes.
#[derive(Debug, Clone)]
pub struct ReadResult {
    pub value: Option<Vec<u8>>,
    /// Which committed version was read, with its cowritten set. `None`
    /// for own-write reads and for NULL reads.
    pub observed: Option<(TransactionId, BTreeSet<String>)>,
    /// True when the value came from this transaction's own buffer.
    pub from_own_write: bool,
}

struct Session {
    buffer: BufferedTxn,
    reads: ReadSetView,
    last_active_ms: u64,
}

/// One node's transaction engine. All methods are safe under concurrent
/// callers; operations within one transaction are serialized by its
/// session lock.
pub struct TxnManager {
    backend: Arc<dyn Backend>,
    clock: Clock,
    opts: TxnOptions,
    index: RwLock<CommitIndex>,
    sessions: Mutex<HashMap<TxnUuid, Arc<Mutex<Session>>>>,
    registry: ReadRegistry,
    cache: DataCache,
    /// Commits awaiting the next broadcast tick.
    outbound: Mutex<VecDeque<CommitRecord>>,
    /// Provisional spill keys awaiting asynchronous deletion.
    doomed: Mutex<Vec<StorageKey>>,
    /// Highest commit timestamp issued here, so one node's own commits
    /// are strictly ordered even if its clock stalls.
    last_issued: Mutex<u64>,
}

fn wall_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).expect("clock before epoch").as_millis()
        as u64
}

impl TxnManager {
    pub fn new(backend: Arc<dyn Backend>, clock: Clock, opts: TxnOptions) -> Self {
        let cache = DataCache::new(opts.cache_bytes);
        TxnManager {
            backend,
            clock,
            opts,
            index: RwLock::new(CommitIndex::new()),
            sessions: Mutex::new(HashMap::new()),
            registry: ReadRegistry::default(),
            cache,
            outbound: Mutex::new(VecDeque::new()),
            doomed: Mutex::new(Vec::new()),
            last_issued: Mutex::new(0),
        }
    }

    /// System clock, default options; the common production construction.
    pub fn with_defaults(backend: Arc<dyn Backend>) -> Self {
        Self::new(backend, Clock::system(), TxnOptions::default())
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn options(&self) -> &TxnOptions {
        &self.opts
    }

    /// Begins a transaction under a fresh identity.
    pub fn start(&self) -> PendingTxnHandle {
        self.start_with(TxnUuid::random())
    }

    /// Begins (or restarts) a transaction under a caller-chosen identity.
    /// If a session with this UUID is still open — a client retrying after
    /// a timeout, say — its staged state is discarded first: the client
    /// redoes the whole transaction, and commit-time idempotence keys off
    /// the UUID.
    pub fn start_with(&self, uuid: TxnUuid) -> PendingTxnHandle {
        if let Some(prior) = self.sessions.lock().unwrap().remove(&uuid) {
            self.dismantle(&prior, uuid);
        }
        let now = wall_ms();
        let handle = PendingTxnHandle { uuid, start_time: now };
        let session = Session {
            buffer: BufferedTxn::new(handle, self.opts.spill_threshold),
            reads: ReadSetView::new(),
            last_active_ms: now,
        };
        self.sessions.lock().unwrap().insert(uuid, Arc::new(Mutex::new(session)));
        handle
    }

    /// Stages `value` as the transaction's write of `key`.
    pub fn put(&self, uuid: TxnUuid, key: &str, value: Vec<u8>) -> Result<()> {
        let session = self.session(uuid)?;
        let mut sess = session.lock().unwrap();
        sess.last_active_ms = wall_ms();
        sess.buffer.put(key, value, &*self.backend)
    }

    /// Reads `key` in the transaction's context. `Ok` with a `None` value
    /// means the key has no version at all (a NULL read); a key whose
    /// versions all conflict with this transaction's prior reads surfaces
    /// as [`AftError::NotReadable`] instead — the client should abort and
    /// retry rather than see a fractured state.
    pub fn get(&self, uuid: TxnUuid, key: &str) -> Result<ReadResult> {
        model::validate_user_key(key)?;
        let session = self.session(uuid)?;
        let mut sess = session.lock().unwrap();
        sess.last_active_ms = wall_ms();

        // 1) Own writes win over everything, including this transaction's
        //    earlier reads of the same key.
        if let Some(value) = sess.buffer.read_own_write(key, &*self.backend)? {
            return Ok(ReadResult { value: Some(value), observed: None, from_own_write: true });
        }

        // 2) Already read and not rewritten since: return the same version.
        if let Some((tid, cowritten)) = sess.reads.get(key).cloned() {
            let value = self.fetch_version(key, &tid)?;
            return Ok(ReadResult {
                value: Some(value),
                observed: Some((tid, cowritten)),
                from_own_write: false,
            });
        }

        // 3) Pick a version that keeps the read set atomic. The registry
        //    entry is taken under the index lock so GC cannot drop the
        //    chosen record between selection and registration.
        let (choice, any_version) = {
            let idx = self.index.read().unwrap();
            let choice = atomic_read(key, &sess.reads, &idx).map(|tid| {
                self.registry.register(tid, uuid);
                let cowritten = idx
                    .record(&tid)
                    .expect("atomic_read returns indexed tids")
                    .writeset
                    .clone();
                (tid, cowritten)
            });
            (choice, !idx.versions_of(key).is_empty())
        };

        match choice {
            Some((tid, cowritten)) => {
                sess.reads.insert(key.to_string(), (tid, cowritten.clone()));
                let value = self.fetch_version(key, &tid)?;
                Ok(ReadResult {
                    value: Some(value),
                    observed: Some((tid, cowritten)),
                    from_own_write: false,
                })
            }
            None if any_version => Err(AftError::NotReadable(key.to_string())),
            None => Ok(ReadResult { value: None, observed: None, from_own_write: false }),
        }
    }

    /// Commits the transaction: persist every staged version under the new
    /// transaction ID, persist the commit record, and only then make the
    /// versions visible. Returns the committed ID.
    ///
    /// On a storage error nothing is visible and the session stays open;
    /// the client can retry this call. If this UUID already committed
    /// (here or recovered elsewhere), the original ID is returned and
    /// nothing is written again.
    pub fn commit(&self, uuid: TxnUuid) -> Result<TransactionId> {
        if let Some(tid) = self.index.read().unwrap().tid_for_uuid(&uuid) {
            if let Some(session) = self.sessions.lock().unwrap().remove(&uuid) {
                self.dismantle(&session, uuid);
            }
            return Ok(tid);
        }

        let session = self.session(uuid)?;
        let mut sess = session.lock().unwrap();
        let drained = sess.buffer.drain_for_commit()?;
        debug_assert!(
            oracle::is_atomic_readset(&sess.reads),
            "read set fractured at commit: {:?}",
            oracle::first_violation(&sess.reads)
        );

        if drained.is_empty() {
            // Read-only: nothing to persist, no commit record, ack now.
            let tid = self.issue_tid(uuid);
            drop(sess);
            self.sessions.lock().unwrap().remove(&uuid);
            self.dismantle(&session, uuid);
            return Ok(tid);
        }

        let tid = self.issue_tid(uuid);
        let persisted = self.persist_commit(&tid, &drained);
        let values = match persisted {
            Ok(values) => values,
            Err(e) => {
                sess.buffer.reopen_after_failed_commit();
                return Err(e);
            }
        };

        // The transaction is now durable and recoverable; everything past
        // this point is local bookkeeping that cannot fail.
        sess.buffer.mark_committed();
        let record = CommitRecord::new(
            tid,
            drained.iter().map(|(k, _)| k.clone()).collect(),
        );
        {
            let mut idx = self.index.write().unwrap();
            let inserted = idx.record_own_commit(record.clone());
            debug_assert!(inserted, "fresh commit {tid} must index");
        }
        self.outbound.lock().unwrap().push_back(record);
        for (key, value) in values {
            self.cache.insert(&key, tid, value);
        }

        drop(sess);
        self.sessions.lock().unwrap().remove(&uuid);
        self.dismantle(&session, uuid);
        Ok(tid)
    }

    /// Aborts and forgets the transaction. Idempotent; aborting an unknown
    /// or already-finished transaction is a no-op ack.
    pub fn abort(&self, uuid: TxnUuid) -> Result<()> {
        if let Some(session) = self.sessions.lock().unwrap().remove(&uuid) {
            self.dismantle(&session, uuid);
        }
        Ok(())
    }

    /// Aborts sessions idle past the timeout; returns who was reaped.
    /// `now_ms` is injectable for tests, defaulting to the wall clock.
    pub fn expire_stale_sessions(&self, now_ms: Option<u64>) -> Vec<TxnUuid> {
        let now = now_ms.unwrap_or_else(wall_ms);
        let snapshot: Vec<(TxnUuid, Arc<Mutex<Session>>)> = self
            .sessions
            .lock()
            .unwrap()
            .iter()
            .map(|(u, s)| (*u, s.clone()))
            .collect();
        let mut reaped = Vec::new();
        for (uuid, session) in snapshot {
            let stale = {
                let sess = session.lock().unwrap();
                now.saturating_sub(sess.last_active_ms) > self.opts.txn_timeout_ms
            };
            if stale {
                let _ = self.abort(uuid);
                reaped.push(uuid);
            }
        }
        reaped
    }

    /// Indexes a commit record produced elsewhere (broadcast, fault
    /// recovery, bootstrap). Returns whether it was actually merged.
    pub fn record_committed(&self, rec: CommitRecord) -> bool {
        self.index.write().unwrap().record_committed(rec)
    }

    /// Merges a peer's broadcast batch; returns how many records were new.
    pub fn merge_batch(&self, batch: &CommitBatch) -> usize {
        let mut idx = self.index.write().unwrap();
        crate::replication::merge_remote(batch, &mut idx)
    }

    /// Warms an empty index from storage: newest commit records first, up
    /// to the configured limit. Returns how many records were indexed.
    /// A node that cannot bootstrap must not serve.
    pub fn bootstrap(&self) -> Result<usize> {
        debug_assert!(self.sessions.lock().unwrap().is_empty());
        let keys = self.backend.list_prefix(
            model::commit_prefix(),
            Some(self.opts.bootstrap_limit),
            true,
        )?;
        let mut indexed = 0;
        for sk in keys {
            // A record listed a moment ago may have been garbage-collected
            // since; skipping it is correct, failing would be wrong.
            let Some(bytes) = self.backend.get(&sk)? else { continue };
            let rec = CommitRecord::from_bytes(&bytes)?;
            if self.index.write().unwrap().record_committed(rec) {
                indexed += 1;
            }
        }
        Ok(indexed)
    }

    /// Whether `uuid` has ever committed: index first, then a scan of the
    /// commit namespace in storage. The scan is what makes client-driven
    /// retry after a node crash exactly-once — the record is written
    /// before any acknowledgment, so if a record for this uuid exists the
    /// original attempt won and the retry must adopt its id instead of
    /// committing a second time.
    pub fn find_commit_by_uuid(&self, uuid: &TxnUuid) -> Result<Option<TransactionId>> {
        if let Some(tid) = self.index.read().unwrap().tid_for_uuid(uuid) {
            return Ok(Some(tid));
        }
        let suffix = format!("-{uuid}");
        for sk in self.backend.list_prefix(model::commit_prefix(), None, false)? {
            if sk.as_str().ends_with(&suffix) {
                return Ok(Some(model::decode_commit_key(&sk)?));
            }
        }
        Ok(None)
    }

    /// Commit records accumulated since the last call; the replication
    /// tick drains this.
    pub fn drain_outbound(&self) -> Vec<CommitRecord> {
        self.outbound.lock().unwrap().drain(..).collect()
    }

    /// Provisional keys whose transactions finished; the GC deletion
    /// worker drains this.
    pub fn drain_doomed(&self) -> Vec<StorageKey> {
        std::mem::take(&mut self.doomed.lock().unwrap())
    }

    pub fn live_records(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Whether a transaction with this uuid is currently open here. The
    /// GC candidate handler uses it to spot commits that are already
    /// durable but not yet indexed by their own node.
    pub fn session_open(&self, uuid: &TxnUuid) -> bool {
        self.sessions.lock().unwrap().contains_key(uuid)
    }

    /// Shared view of the commit index, for GC sweeps and test assertions.
    pub fn index(&self) -> &RwLock<CommitIndex> {
        &self.index
    }

    pub fn registry(&self) -> &ReadRegistry {
        &self.registry
    }

    pub(crate) fn cache(&self) -> &DataCache {
        &self.cache
    }

    pub(crate) fn doom(&self, keys: Vec<StorageKey>) {
        if !keys.is_empty() {
            self.doomed.lock().unwrap().extend(keys);
        }
    }

    /// Assigns a commit timestamp: the clock reading, bumped past the last
    /// timestamp this node issued so local commit order is strict.
    fn issue_tid(&self, uuid: TxnUuid) -> TransactionId {
        let mut last = self.last_issued.lock().unwrap();
        let ts = self.clock.now().max(*last + 1);
        *last = ts;
        TransactionId::new(ts, uuid)
    }

    /// Steps 1–2 of the durable part of commit: write every version under
    /// its final key (copying spilled bytes back in), then the commit
    /// record. Returns the (key, value) pairs for cache warming.
    fn persist_commit(
        &self,
        tid: &TransactionId,
        drained: &[(String, DrainedValue)],
    ) -> Result<Vec<(String, Vec<u8>)>> {
        let mut values = Vec::with_capacity(drained.len());
        for (key, dv) in drained {
            let bytes = match dv {
                DrainedValue::Inline(v) => v.clone(),
                DrainedValue::Spilled(sk) => self.backend.get(sk)?.ok_or_else(|| {
                    AftError::Storage(StorageError::Corrupt(format!(
                        "spilled bytes missing at {sk}"
                    )))
                })?,
            };
            values.push((key.clone(), bytes));
        }
        let batch: Vec<(StorageKey, Vec<u8>)> = values
            .iter()
            .map(|(key, bytes)| Ok((model::encode_data_key(key, tid)?, bytes.clone())))
            .collect::<Result<_>>()?;
        self.backend.put_batch(&batch)?;

        let record = CommitRecord::new(*tid, values.iter().map(|(k, _)| k.clone()).collect());
        put_one(&*self.backend, model::encode_commit_key(tid), record.to_bytes())?;
        Ok(values)
    }

    /// Fetches the bytes of a committed version, preferring the cache. An
    /// indexed version whose bytes are gone is storage damage (or a GC
    /// protocol violation) and surfaces as an error, never as a silent
    /// NULL.
    fn fetch_version(&self, key: &str, tid: &TransactionId) -> Result<Vec<u8>> {
        if let Some(v) = self.cache.get(key, tid) {
            return Ok(v);
        }
        let sk = model::encode_data_key(key, tid)?;
        let bytes = self.backend.get(&sk)?.ok_or_else(|| {
            AftError::Storage(StorageError::Corrupt(format!(
                "indexed version {tid} of {key:?} has no bytes"
            )))
        })?;
        self.cache.insert(key, *tid, bytes.clone());
        Ok(bytes)
    }

    /// Final teardown shared by abort, expiry, and post-commit cleanup:
    /// discard staged writes (queueing spilled keys for deletion) and
    /// release read pins.
    fn dismantle(&self, session: &Arc<Mutex<Session>>, uuid: TxnUuid) {
        let mut sess = session.lock().unwrap();
        let doomed = sess.buffer.discard();
        self.doom(doomed);
        let sources: Vec<TransactionId> = sess.reads.values().map(|(t, _)| *t).collect();
        self.registry.release(uuid, sources);
        sess.reads.clear();
    }

    fn session(&self, uuid: TxnUuid) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(&uuid)
            .cloned()
            .ok_or_else(|| AftError::UnknownTxn(uuid.to_string()))
    }
}

/// Picks the newest version of `key` the transaction may read without
/// fracturing its read set, or `None` when no version qualifies (which
/// covers both "no version exists" and "every version conflicts").
///
/// Callers resolve keys already in `reads` via the read set itself
/// (repeatable read); this function assumes `key` is not among them.
///
/// The scan starts from a lower bound — the newest prior observation whose
/// transaction also wrote `key` must not be proven stale, so nothing below
/// its ID can qualify — and walks candidates newest-first, rejecting any
/// whose write set would prove one of our observations stale. Because the
/// read set is atomic coming in, the scan cannot walk past the lower bound
/// record itself: that candidate is never rejected.
pub fn atomic_read(
    key: &str,
    reads: &ReadSetView,
    index: &CommitIndex,
) -> Option<TransactionId> {
    debug_assert!(!reads.contains_key(key), "already-read keys use the read set");
    let lower: Option<TransactionId> = reads
        .values()
        .filter(|(_, cowritten)| cowritten.contains(key))
        .map(|(tid, _)| *tid)
        .max();

    let versions = index.versions_of(key);
    for candidate in versions.iter().rev() {
        if let Some(low) = lower {
            if *candidate < low {
                break;
            }
        }
        let record = index.record(candidate).expect("version index consistent");
        let fractures = record.writeset.iter().any(|cowritten_key| {
            reads
                .get(cowritten_key)
                .is_some_and(|(observed, _)| observed < candidate)
        });
        if !fractures {
            return Some(*candidate);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::MemoryBackend;

    fn manager() -> (Arc<MemoryBackend>, TxnManager) {
        let backend = Arc::new(MemoryBackend::new());
        let mgr = TxnManager::new(
            backend.clone() as Arc<dyn Backend>,
            Clock::logical(),
            TxnOptions { spill_threshold: usize::MAX, ..Default::default() },
        );
        (backend, mgr)
    }

    fn commit_kv(mgr: &TxnManager, pairs: &[(&str, &[u8])]) -> TransactionId {
        let h = mgr.start();
        for (k, v) in pairs {
            mgr.put(h.uuid, k, v.to_vec()).unwrap();
        }
        mgr.commit(h.uuid).unwrap()
    }

    /// The two-transaction setup used throughout: T1 wrote {l}, then
    /// T2 wrote {k, l}.
    fn seed_two_txns(mgr: &TxnManager) -> (TransactionId, TransactionId) {
        let t1 = commit_kv(mgr, &[("l", b"l1")]);
        let t2 = commit_kv(mgr, &[("k", b"k2"), ("l", b"l2")]);
        assert!(t1 < t2);
        (t1, t2)
    }

    #[test]
    fn fresh_reader_sees_newest_atomic_pair() {
        let (_b, mgr) = manager();
        let (_t1, t2) = seed_two_txns(&mgr);
        let r = mgr.start();
        let k = mgr.get(r.uuid, "k").unwrap();
        assert_eq!(k.value.as_deref(), Some(b"k2".as_ref()));
        assert_eq!(k.observed.as_ref().unwrap().0, t2);
        let l = mgr.get(r.uuid, "l").unwrap();
        assert_eq!(l.value.as_deref(), Some(b"l2".as_ref()));
        assert_eq!(l.observed.as_ref().unwrap().0, t2);
    }

    #[test]
    fn reader_pinned_to_old_version_gets_not_readable() {
        let (_b, mgr) = manager();
        let t1 = commit_kv(&mgr, &[("l", b"l1")]);
        // Reader observes l from T1 before T2 exists…
        let r = mgr.start();
        let l = mgr.get(r.uuid, "l").unwrap();
        assert_eq!(l.observed.as_ref().unwrap().0, t1);
        // …then T2 commits {k, l}. The only version of k was cowritten
        // with a newer l than we saw, so no version of k is readable.
        commit_kv(&mgr, &[("k", b"k2"), ("l", b"l2")]);
        match mgr.get(r.uuid, "k") {
            Err(AftError::NotReadable(key)) => assert_eq!(key, "k"),
            other => panic!("expected NotReadable, got {other:?}"),
        }
        // The read set is untouched; the transaction can go on or abort.
        let again = mgr.get(r.uuid, "l").unwrap();
        assert_eq!(again.observed.unwrap().0, t1);
    }

    #[test]
    fn cowritten_read_is_pulled_up_to_newer_version() {
        let (_b, mgr) = manager();
        let (_t1, t2) = seed_two_txns(&mgr);
        let r = mgr.start();
        // Read k first (T2's), then l: T1's l would fracture, so we must
        // see T2's l even though T1's is also indexed.
        mgr.get(r.uuid, "k").unwrap();
        let l = mgr.get(r.uuid, "l").unwrap();
        assert_eq!(l.observed.unwrap().0, t2);
        assert_eq!(l.value.as_deref(), Some(b"l2".as_ref()));
    }

    #[test]
    fn never_written_key_reads_null() {
        let (_b, mgr) = manager();
        seed_two_txns(&mgr);
        let r = mgr.start();
        let x = mgr.get(r.uuid, "x").unwrap();
        assert_eq!(x.value, None);
        assert!(x.observed.is_none());
    }

    #[test]
    fn own_writes_shadow_committed_state() {
        let (_b, mgr) = manager();
        seed_two_txns(&mgr);
        let r = mgr.start();
        mgr.put(r.uuid, "k", b"mine".to_vec()).unwrap();
        let k = mgr.get(r.uuid, "k").unwrap();
        assert!(k.from_own_write);
        assert_eq!(k.value.as_deref(), Some(b"mine".as_ref()));
    }

    #[test]
    fn repeatable_read_survives_newer_commits() {
        let (_b, mgr) = manager();
        let (_t1, t2) = seed_two_txns(&mgr);
        let r = mgr.start();
        let first = mgr.get(r.uuid, "k").unwrap();
        assert_eq!(first.observed.as_ref().unwrap().0, t2);
        // A newer version of k lands mid-transaction.
        commit_kv(&mgr, &[("k", b"k3")]);
        let second = mgr.get(r.uuid, "k").unwrap();
        assert_eq!(second.observed.unwrap().0, t2, "same version both reads");
        assert_eq!(second.value.as_deref(), Some(b"k2".as_ref()));
    }

    #[test]
    fn commit_makes_writes_visible_to_new_transactions() {
        let (_b, mgr) = manager();
        let tid = commit_kv(&mgr, &[("k", b"v")]);
        let r = mgr.start();
        let k = mgr.get(r.uuid, "k").unwrap();
        assert_eq!(k.value.as_deref(), Some(b"v".as_ref()));
        assert_eq!(k.observed.unwrap().0, tid);
    }

    #[test]
    fn read_only_commit_persists_nothing() {
        let (backend, mgr) = manager();
        seed_two_txns(&mgr);
        let before = backend.list_prefix("commit/", None, false).unwrap().len();
        let r = mgr.start();
        mgr.get(r.uuid, "k").unwrap();
        let tid = mgr.commit(r.uuid).unwrap();
        assert_eq!(tid.uuid, r.uuid);
        let after = backend.list_prefix("commit/", None, false).unwrap().len();
        assert_eq!(before, after, "read-only commit writes no record");
    }

    #[test]
    fn abort_leaves_no_trace_and_is_idempotent() {
        let (backend, mgr) = manager();
        let h = mgr.start();
        mgr.put(h.uuid, "k", b"v".to_vec()).unwrap();
        mgr.abort(h.uuid).unwrap();
        mgr.abort(h.uuid).unwrap(); // double abort acks
        assert!(backend.list_prefix("data/", None, false).unwrap().is_empty());
        assert!(matches!(
            mgr.get(h.uuid, "k"),
            Err(AftError::UnknownTxn(_))
        ));
    }

    #[test]
    fn commit_retries_are_exactly_once() {
        let (backend, mgr) = manager();
        let h = mgr.start();
        mgr.put(h.uuid, "k", b"v".to_vec()).unwrap();
        let tid = mgr.commit(h.uuid).unwrap();
        // Client never saw the ack and retries: same uuid, same answer.
        assert_eq!(mgr.commit(h.uuid).unwrap(), tid);
        // Even a full restart of the logical transaction dedupes.
        mgr.start_with(h.uuid);
        assert_eq!(mgr.commit(h.uuid).unwrap(), tid);
        assert_eq!(backend.list_prefix("commit/", None, false).unwrap().len(), 1);
    }

    #[test]
    fn failed_data_write_leaves_nothing_visible_and_retry_succeeds() {
        let (backend, mgr) = manager();
        commit_kv(&mgr, &[("k", b"old")]);
        let h = mgr.start();
        mgr.put(h.uuid, "k", b"new".to_vec()).unwrap();
        backend.fail_after(1); // the data batch write fails
        assert!(mgr.commit(h.uuid).is_err());

        // Nothing changed for readers.
        let r = mgr.start();
        assert_eq!(mgr.get(r.uuid, "k").unwrap().value.as_deref(), Some(b"old".as_ref()));
        mgr.abort(r.uuid).unwrap();

        // Same session retries and succeeds exactly once.
        let tid = mgr.commit(h.uuid).unwrap();
        assert_eq!(tid.uuid, h.uuid);
        let r = mgr.start();
        assert_eq!(mgr.get(r.uuid, "k").unwrap().value.as_deref(), Some(b"new".as_ref()));
        assert_eq!(backend.list_prefix("commit/", None, false).unwrap().len(), 2);
    }

    #[test]
    fn failed_record_write_keeps_versions_invisible() {
        let (backend, mgr) = manager();
        let h = mgr.start();
        mgr.put(h.uuid, "k", b"v".to_vec()).unwrap();
        backend.fail_after(2); // data batch succeeds, record write fails
        assert!(mgr.commit(h.uuid).is_err());

        // The data bytes are in storage but no reader can reach them.
        assert_eq!(backend.list_prefix("data/k/", None, false).unwrap().len(), 1);
        let r = mgr.start();
        assert_eq!(mgr.get(r.uuid, "k").unwrap().value, None);
        mgr.abort(r.uuid).unwrap();

        // Retry commits; exactly one commit record exists for the uuid,
        // and readers see exactly the retried version set.
        let tid = mgr.commit(h.uuid).unwrap();
        assert_eq!(backend.list_prefix("commit/", None, false).unwrap().len(), 1);
        let r = mgr.start();
        let read = mgr.get(r.uuid, "k").unwrap();
        assert_eq!(read.observed.unwrap().0, tid);
    }

    #[test]
    fn sessions_expire_only_past_timeout() {
        let (_b, mgr) = manager();
        let h = mgr.start();
        let timeout = mgr.options().txn_timeout_ms;
        let now = wall_ms();
        assert!(mgr.expire_stale_sessions(Some(now + timeout - 1)).is_empty());
        let reaped = mgr.expire_stale_sessions(Some(now + 2 * timeout));
        assert_eq!(reaped, vec![h.uuid]);
        assert!(matches!(mgr.get(h.uuid, "k"), Err(AftError::UnknownTxn(_))));
    }

    #[test]
    fn expiry_releases_read_pins() {
        let (_b, mgr) = manager();
        let tid = commit_kv(&mgr, &[("k", b"v")]);
        let h = mgr.start();
        mgr.get(h.uuid, "k").unwrap();
        assert!(mgr.registry().has_readers(&tid));
        mgr.expire_stale_sessions(Some(wall_ms() + 10 * mgr.options().txn_timeout_ms));
        assert!(!mgr.registry().has_readers(&tid));
    }

    #[test]
    fn bootstrap_warms_index_from_storage() {
        let backend = Arc::new(MemoryBackend::new());
        let writer = TxnManager::new(
            backend.clone() as Arc<dyn Backend>,
            Clock::logical(),
            TxnOptions::default(),
        );
        let t1 = commit_kv(&writer, &[("a", b"1")]);
        let _t2 = commit_kv(&writer, &[("b", b"2")]);
        let t3 = commit_kv(&writer, &[("a", b"3"), ("c", b"4")]);

        let cold = TxnManager::new(
            backend.clone() as Arc<dyn Backend>,
            Clock::logical(),
            TxnOptions::default(),
        );
        let n = cold.bootstrap().unwrap();
        // t1 is fully superseded by t3 (its only key has a newer version)
        // once t3 is indexed first — newest-first warming skips it.
        assert_eq!(n, 2);
        assert!(!cold.index().read().unwrap().contains(&t1));
        let r = cold.start();
        let a = cold.get(r.uuid, "a").unwrap();
        assert_eq!(a.observed.unwrap().0, t3);
        assert_eq!(a.value.as_deref(), Some(b"3".as_ref()));
    }

    #[test]
    fn bootstrap_of_empty_storage_serves_null_reads() {
        let (_b, mgr) = manager();
        assert_eq!(mgr.bootstrap().unwrap(), 0);
        let r = mgr.start();
        assert_eq!(mgr.get(r.uuid, "k").unwrap().value, None);
    }

    #[test]
    fn indexed_version_with_missing_bytes_is_an_error_not_a_null() {
        let (backend, mgr) = manager();
        let tid = commit_kv(&mgr, &[("k", b"v")]);
        // Simulate a partial backend: the record survives, the bytes
        // don't. A cold node still indexes the record at bootstrap…
        backend
            .delete_batch(&[model::encode_data_key("k", &tid).unwrap()])
            .unwrap();
        let cold = TxnManager::new(
            backend.clone() as Arc<dyn Backend>,
            Clock::logical(),
            TxnOptions::default(),
        );
        assert_eq!(cold.bootstrap().unwrap(), 1);
        // …and a read of the damaged key is an error, never a silent NULL.
        let r = cold.start();
        assert!(matches!(cold.get(r.uuid, "k"), Err(AftError::Storage(_))));
    }

    #[test]
    fn distinct_uuids_across_many_starts() {
        let (_b, mgr) = manager();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let h = mgr.start();
            assert!(seen.insert(h.uuid));
            mgr.abort(h.uuid).unwrap();
        }
    }

    #[test]
    fn commit_timestamps_strictly_increase_per_node() {
        let (_b, mgr) = manager();
        let mut last = None;
        for i in 0..50 {
            let tid = commit_kv(&mgr, &[(format!("k{i}").as_str(), b"v")]);
            if let Some(prev) = last {
                assert!(tid > prev);
            }
            last = Some(tid);
        }
    }

    #[test]
    fn spilled_transaction_commits_to_final_locations() {
        let backend = Arc::new(MemoryBackend::new());
        let mgr = TxnManager::new(
            backend.clone() as Arc<dyn Backend>,
            Clock::logical(),
            TxnOptions { spill_threshold: 16, ..Default::default() },
        );
        let h = mgr.start();
        mgr.put(h.uuid, "big", vec![9; 64]).unwrap(); // forces a spill
        mgr.put(h.uuid, "small", b"s".to_vec()).unwrap();
        let tid = mgr.commit(h.uuid).unwrap();

        let r = mgr.start();
        assert_eq!(mgr.get(r.uuid, "big").unwrap().value, Some(vec![9; 64]));
        assert_eq!(mgr.get(r.uuid, "small").unwrap().value.as_deref(), Some(b"s".as_ref()));

        // Final locations exist; the provisional key is queued for deletion.
        let final_key = model::encode_data_key("big", &tid).unwrap();
        assert!(backend.get(&final_key).unwrap().is_some());
        let doomed = mgr.drain_doomed();
        assert_eq!(doomed.len(), 1);
        assert!(doomed[0].as_str().contains("/00000000000000000000-"));
    }

    #[test]
    fn outbound_queue_sees_each_commit_once() {
        let (_b, mgr) = manager();
        let t1 = commit_kv(&mgr, &[("a", b"1")]);
        let t2 = commit_kv(&mgr, &[("b", b"2")]);
        let drained = mgr.drain_outbound();
        assert_eq!(
            drained.iter().map(|r| r.tid).collect::<Vec<_>>(),
            vec![t1, t2]
        );
        assert!(mgr.drain_outbound().is_empty());
    }

    #[test]
    fn differential_fuzz_against_oracle() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let keys: Vec<String> = (0..8).map(|i| format!("k{i}")).collect();

        for _case in 0..1000 {
            // Random committed history over ≤8 keys, ≤50 transactions,
            // indexed in commit order.
            let mut index = CommitIndex::new();
            let mut history: Vec<CommitRecord> = Vec::new();
            let txns = rng.gen_range(1..=50);
            for ts in 1..=txns {
                let mut writeset = BTreeSet::new();
                let width = rng.gen_range(1..=3.min(keys.len()));
                for key in keys.choose_multiple(&mut rng, width) {
                    writeset.insert(key.clone());
                }
                let rec = CommitRecord::new(
                    TransactionId::new(ts as u64, TxnUuid(rng.gen())),
                    writeset,
                );
                assert!(index.record_committed(rec.clone()));
                history.push(rec);
            }

            // Grow an atomic read set the way a real transaction would:
            // each read happens at some moment (a history prefix) and
            // must keep the set atomic; the oracle picks the version.
            let mut reads = ReadSetView::new();
            let mut cut = rng.gen_range(0..=history.len());
            let read_count = rng.gen_range(0..=4);
            for key in keys.choose_multiple(&mut rng, read_count) {
                cut = rng.gen_range(cut..=history.len());
                if let Some(tid) =
                    oracle::oracle_atomic_read(key, &reads, &history[..cut])
                {
                    let cowritten = index.record(&tid).unwrap().writeset.clone();
                    reads.insert(key.clone(), (tid, cowritten));
                }
            }

            // Differential check on a key outside the read set.
            let candidates: Vec<&String> =
                keys.iter().filter(|k| !reads.contains_key(*k)).collect();
            if let Some(&key) = candidates.as_slice().choose(&mut rng) {
                let fast = atomic_read(key, &reads, &index);
                let slow = oracle::oracle_atomic_read(key, &reads, &history);
                assert_eq!(fast, slow, "key {key} reads {reads:?}");
            }
        }
    }
}
