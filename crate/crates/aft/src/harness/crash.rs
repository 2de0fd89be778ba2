//! Deterministic crash-point injection.
//!
//! A node crash is modeled at the storage boundary: from the moment of
//! death the node's storage handle fails every operation, the harness
//! stops routing to it, and its in-memory state is dropped. What
//! distinguishes the crash points is exactly which writes of the commit
//! protocol landed before death, so the injector triggers on the
//! namespace of the keys being written — data versions, provisional
//! spills, or the commit record itself.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{AftError, Result};
use crate::harness::cluster::LocalCluster;
use crate::harness::workload::encode_payload;
use crate::model::{self, TransactionId, TxnUuid, PROVISIONAL_TS};
use crate::storage::{Backend, StorageError, StorageKey};
use crate::txn::TxnManager;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashPoint {
    /// Die after the data versions are durable but before the commit
    /// record is written: the transaction must be invisible everywhere
    /// and a same-uuid retry must commit exactly once.
    AfterDataWrite,
    /// Die right after the commit record is durable, before the node
    /// acknowledges, indexes, or broadcasts: the transaction committed,
    /// and recovery must surface it.
    AfterCommitRecord,
    /// Die after acknowledging the client but before the multicast tick:
    /// only the fault manager's storage scan can tell the other nodes.
    AfterAckBeforeBroadcast,
    /// Die right after a write buffer spills to provisional keys: nothing
    /// commits, and the orphaned keys must eventually be swept.
    DuringSpill,
    /// One of the four, chosen by the trial's seed.
    Random,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 4] = [
        CrashPoint::AfterDataWrite,
        CrashPoint::AfterCommitRecord,
        CrashPoint::AfterAckBeforeBroadcast,
        CrashPoint::DuringSpill,
    ];

    fn resolve(self, rng: &mut impl Rng) -> CrashPoint {
        match self {
            CrashPoint::Random => Self::ALL[rng.gen_range(0..Self::ALL.len())],
            fixed => fixed,
        }
    }
}

/// One planned crash: which node dies, where in the protocol, and after
/// how many unremarkable warmup transactions.
#[derive(Clone, Copy, Debug)]
pub struct CrashPlan {
    pub target: usize,
    pub point: CrashPoint,
    pub trigger_txn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Armed {
    Idle,
    /// Reject the next commit-record write and die: the record never
    /// reaches storage.
    FailCommitRecordPut,
    /// Let the next commit-record write land, then die.
    DieAfterCommitRecordPut,
    /// Let the next provisional-key write land, then die.
    DieAfterSpillPut,
}

/// A per-node storage handle that can be killed. Non-target nodes talk to
/// the shared store directly; the target's operations flow through this.
pub struct CrashingBackend {
    inner: Arc<dyn Backend>,
    armed: Mutex<Armed>,
    dead: AtomicBool,
}

impl CrashingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        CrashingBackend {
            inner,
            armed: Mutex::new(Armed::Idle),
            dead: AtomicBool::new(false),
        }
    }

    pub fn arm_fail_commit_record(&self) {
        *self.armed.lock().unwrap() = Armed::FailCommitRecordPut;
    }

    pub fn arm_die_after_commit_record(&self) {
        *self.armed.lock().unwrap() = Armed::DieAfterCommitRecordPut;
    }

    pub fn arm_die_after_spill(&self) {
        *self.armed.lock().unwrap() = Armed::DieAfterSpillPut;
    }

    pub fn is_dead(&self) -> bool {
        self.dead.load(Ordering::SeqCst)
    }

    /// Kills the handle directly — for crashes not triggered by a write,
    /// e.g. a node taken down right after acknowledging a commit.
    pub fn kill(&self) {
        self.die();
    }

    /// The process-restart reset: a fresh node process gets a working
    /// storage handle again.
    pub fn revive(&self) {
        *self.armed.lock().unwrap() = Armed::Idle;
        self.dead.store(false, Ordering::SeqCst);
    }

    fn die(&self) {
        self.dead.store(true, Ordering::SeqCst);
    }

    fn check_alive(&self) -> std::result::Result<(), StorageError> {
        if self.is_dead() {
            Err(StorageError::Injected("node is dead"))
        } else {
            Ok(())
        }
    }
}

fn is_commit_record_batch(entries: &[(StorageKey, Vec<u8>)]) -> bool {
    entries
        .iter()
        .any(|(sk, _)| sk.as_str().starts_with(model::commit_prefix()))
}

fn is_spill_batch(entries: &[(StorageKey, Vec<u8>)]) -> bool {
    entries.iter().any(|(sk, _)| {
        matches!(model::decode_data_key(sk), Ok((_, tid)) if tid.ts == PROVISIONAL_TS)
    })
}

impl Backend for CrashingBackend {
    fn get(&self, sk: &StorageKey) -> std::result::Result<Option<Vec<u8>>, StorageError> {
        self.check_alive()?;
        self.inner.get(sk)
    }

    fn put_batch(
        &self,
        entries: &[(StorageKey, Vec<u8>)],
    ) -> std::result::Result<(), StorageError> {
        self.check_alive()?;
        let armed = *self.armed.lock().unwrap();
        match armed {
            Armed::FailCommitRecordPut if is_commit_record_batch(entries) => {
                self.die();
                Err(StorageError::Injected("crash before commit record"))
            }
            Armed::DieAfterCommitRecordPut if is_commit_record_batch(entries) => {
                let result = self.inner.put_batch(entries);
                self.die();
                result
            }
            Armed::DieAfterSpillPut if is_spill_batch(entries) => {
                let result = self.inner.put_batch(entries);
                self.die();
                result
            }
            _ => self.inner.put_batch(entries),
        }
    }

    fn list_prefix(
        &self,
        prefix: &str,
        limit: Option<usize>,
        reverse: bool,
    ) -> std::result::Result<Vec<StorageKey>, StorageError> {
        self.check_alive()?;
        self.inner.list_prefix(prefix, limit, reverse)
    }

    fn delete_batch(&self, sks: &[StorageKey]) -> std::result::Result<(), StorageError> {
        self.check_alive()?;
        self.inner.delete_batch(sks)
    }
}

/// What one crash trial established. Each flag checks one recovery
/// guarantee; a report with `fired == false` is inconclusive (the crash
/// point was never reached) and proves nothing.
#[derive(Clone, Debug)]
pub struct CrashReport {
    pub point: CrashPoint,
    pub fired: bool,
    pub uuid: TxnUuid,
    /// The id under which the write set is expected to be visible, if any.
    pub committed_tid: Option<TransactionId>,
    /// On every surviving node, both keys were visible at `committed_tid`
    /// — or neither was visible at all.
    pub all_or_nothing: bool,
    /// Storage holds exactly as many commit records for the uuid as
    /// expected: one if committed, zero if not.
    pub record_count_ok: bool,
    /// `DuringSpill` only: the orphaned provisional keys were present
    /// after the crash and gone after aging out.
    pub orphans_swept: Option<bool>,
}

/// Runs `plan` against a fresh workload on `cluster`: warmup commits, the
/// doomed transaction on the target node, the client's documented retry
/// protocol, recovery ticks, then verification reads on every survivor.
///
/// The cluster must have been built with crash wrappers, and with a
/// multicast interval under the harness's control (the driver ticks
/// explicitly; an eager broadcast would race the crash).
pub fn inject_crash(cluster: &LocalCluster, plan: &CrashPlan, seed: u64) -> Result<CrashReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let point = plan.point.resolve(&mut rng);
    let crash = cluster
        .crash_handle(plan.target)
        .ok_or_else(|| AftError::Config("cluster built without crash wrappers".into()))?;

    // Warmup traffic, flushed so the doomed transaction's record is the
    // only one the broadcast never carried.
    for t in 0..plan.trigger_txn {
        let (_, mgr) = cluster
            .pick_live(t)
            .ok_or_else(|| AftError::Config("no live nodes".into()))?;
        let uuid = TxnUuid::from_bytes(rng.gen());
        mgr.start_with(uuid);
        let key = format!("warm{t:04}");
        mgr.put(uuid, &key, encode_payload(uuid, &key, 0, 16))?;
        mgr.commit(uuid)?;
    }
    cluster.tick_multicast();

    let target_mgr = cluster
        .mgr(plan.target)
        .ok_or_else(|| AftError::Config("target node is not live".into()))?;
    let uuid = TxnUuid::from_bytes(rng.gen());
    let key_a = format!("crash{seed:08x}a");
    let key_b = format!("crash{seed:08x}b");

    let mut committed_tid = None;
    let mut orphans_swept = None;

    match point {
        CrashPoint::AfterDataWrite => {
            write_pair(&target_mgr, uuid, &key_a, &key_b, 16)?;
            crash.arm_fail_commit_record();
            let err = target_mgr.commit(uuid);
            if err.is_ok() || !crash.is_dead() {
                return Ok(inconclusive(point, uuid));
            }
            cluster.kill(plan.target);
            // Client retry: no record in storage, so re-execute under the
            // same identity on a survivor.
            let (_, survivor) = cluster.pick_live(plan.target + 1).unwrap();
            if survivor.find_commit_by_uuid(&uuid)?.is_some() {
                return Err(AftError::Protocol(
                    "commit record present after rejected write".into(),
                ));
            }
            survivor.start_with(uuid);
            write_pair(&survivor, uuid, &key_a, &key_b, 16)?;
            committed_tid = Some(survivor.commit(uuid)?);
            cluster.tick_multicast();
        }
        CrashPoint::AfterCommitRecord => {
            write_pair(&target_mgr, uuid, &key_a, &key_b, 16)?;
            crash.arm_die_after_commit_record();
            let tid = target_mgr.commit(uuid)?;
            if !crash.is_dead() {
                return Ok(inconclusive(point, uuid));
            }
            cluster.kill(plan.target);
            // Client retry: the record is in storage, so the original
            // attempt won; adopt its id instead of committing again.
            let (_, survivor) = cluster.pick_live(plan.target + 1).unwrap();
            let adopted = survivor
                .find_commit_by_uuid(&uuid)?
                .ok_or_else(|| AftError::Protocol("durable record not found".into()))?;
            if adopted != tid {
                return Err(AftError::Protocol("retry adopted a different id".into()));
            }
            committed_tid = Some(adopted);
            // Visibility comes from the fault manager, not the dead node.
            cluster.tick_fault()?;
            cluster.tick_fault()?;
        }
        CrashPoint::AfterAckBeforeBroadcast => {
            write_pair(&target_mgr, uuid, &key_a, &key_b, 16)?;
            committed_tid = Some(target_mgr.commit(uuid)?);
            cluster.kill(plan.target);
            cluster.tick_fault()?;
            cluster.tick_fault()?;
        }
        CrashPoint::DuringSpill => {
            let threshold = cluster.txn_options().spill_threshold;
            target_mgr.start_with(uuid);
            target_mgr.put(uuid, &key_a, encode_payload(uuid, &key_a, 0, 16))?;
            crash.arm_die_after_spill();
            target_mgr.put(uuid, &key_b, encode_payload(uuid, &key_b, 0, threshold))?;
            if !crash.is_dead() {
                return Ok(inconclusive(point, uuid));
            }
            // The client's next step fails; the transaction is abandoned.
            if target_mgr.commit(uuid).is_ok() {
                return Err(AftError::Protocol("commit survived a dead backend".into()));
            }
            cluster.kill(plan.target);
            orphans_swept = Some(verify_orphan_sweep(cluster, uuid)?);
        }
        CrashPoint::Random => unreachable!("resolved above"),
    }

    let all_or_nothing = verify_all_or_nothing(cluster, &key_a, &key_b, uuid, committed_tid)?;
    let expected_records = usize::from(committed_tid.is_some());
    let record_count_ok = count_records_for(cluster.backend().as_ref(), uuid)? == expected_records;

    Ok(CrashReport {
        point,
        fired: true,
        uuid,
        committed_tid,
        all_or_nothing,
        record_count_ok,
        orphans_swept,
    })
}

fn inconclusive(point: CrashPoint, uuid: TxnUuid) -> CrashReport {
    CrashReport {
        point,
        fired: false,
        uuid,
        committed_tid: None,
        all_or_nothing: false,
        record_count_ok: false,
        orphans_swept: None,
    }
}

fn write_pair(
    mgr: &TxnManager,
    uuid: TxnUuid,
    key_a: &str,
    key_b: &str,
    size: usize,
) -> Result<()> {
    mgr.start_with(uuid);
    mgr.put(uuid, key_a, encode_payload(uuid, key_a, 0, size))?;
    mgr.put(uuid, key_b, encode_payload(uuid, key_b, 1, size))?;
    Ok(())
}

/// Both keys visible at exactly `expected` on every survivor, or —
/// when nothing committed — neither key shows any version from `uuid`.
fn verify_all_or_nothing(
    cluster: &LocalCluster,
    key_a: &str,
    key_b: &str,
    uuid: TxnUuid,
    expected: Option<TransactionId>,
) -> Result<bool> {
    for i in cluster.live_indices() {
        let mgr = cluster.mgr(i).expect("live node");
        let probe = TxnUuid::random();
        mgr.start_with(probe);
        let a = mgr.get(probe, key_a);
        let b = mgr.get(probe, key_b);
        mgr.abort(probe)?;
        let (Ok(a), Ok(b)) = (a, b) else { return Ok(false) };
        let ok = match expected {
            Some(tid) => {
                observed_tid(&a) == Some(tid) && observed_tid(&b) == Some(tid)
            }
            None => {
                observed_tid(&a).map(|t| t.uuid) != Some(uuid)
                    && observed_tid(&b).map(|t| t.uuid) != Some(uuid)
            }
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

fn observed_tid(read: &crate::txn::ReadResult) -> Option<TransactionId> {
    read.observed.as_ref().map(|(tid, _)| *tid)
}

fn count_records_for(backend: &dyn Backend, uuid: TxnUuid) -> Result<usize> {
    let suffix = format!("-{uuid}");
    let keys = backend.list_prefix(model::commit_prefix(), None, false)?;
    Ok(keys.iter().filter(|sk| sk.as_str().ends_with(&suffix)).count())
}

/// Provisional keys from `uuid` must exist right after the crash, and be
/// gone once the orphan sweep has seen them age past the threshold.
fn verify_orphan_sweep(cluster: &LocalCluster, uuid: TxnUuid) -> Result<bool> {
    let orphans = provisional_keys_for(cluster.backend().as_ref(), uuid)?;
    if orphans.is_empty() {
        return Ok(false);
    }
    let age = 60_000;
    cluster.orphan_sweep(1_000, age)?; // records first-seen
    if provisional_keys_for(cluster.backend().as_ref(), uuid)?.is_empty() {
        return Ok(false); // swept too eagerly — that would be a bug
    }
    cluster.orphan_sweep(1_000 + age + 1, age)?; // past the threshold
    Ok(provisional_keys_for(cluster.backend().as_ref(), uuid)?.is_empty())
}

fn provisional_keys_for(backend: &dyn Backend, uuid: TxnUuid) -> Result<Vec<StorageKey>> {
    let keys = backend.list_prefix(model::data_prefix(), None, false)?;
    let mut out = Vec::new();
    for sk in keys {
        if let Ok((_, tid)) = model::decode_data_key(&sk) {
            if tid.ts == PROVISIONAL_TS && tid.uuid == uuid {
                out.push(sk);
            }
        }
    }
    Ok(out)
}

/// Convenience for assertion sites: which keys `uuid` is expected to have
/// written in [`inject_crash`]'s doomed transaction.
pub fn doomed_writeset(seed: u64) -> BTreeSet<String> {
    [format!("crash{seed:08x}a"), format!("crash{seed:08x}b")]
        .into_iter()
        .collect()
}
