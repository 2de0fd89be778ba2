//! An in-process cluster: several transaction managers over one shared
//! store, plus a coordinator, all driven by explicit ticks.
//!
//! The point of running everything in one process is control. Broadcast,
//! fault scan, and garbage collection happen exactly when the driver says
//! so, the shared logical clock makes commit timestamps a deterministic
//! function of operation order, and a node "crash" is dropping its
//! manager (sessions, index, unsent broadcasts all die) while the shared
//! store keeps whatever had already been written. The TCP servers reuse
//! the same building blocks; nothing here is a second implementation of
//! the protocol.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::gc::{deletion_keys, handle_gc_candidates, local_gc_sweep, run_deletions, Coordinator};
use crate::harness::crash::CrashingBackend;
use crate::model::{Clock, CommitRecord, TransactionId, TxnUuid};
use crate::replication::Broadcaster;
use crate::storage::{Backend, MemoryBackend};
use crate::txn::{TxnManager, TxnOptions};

pub struct ClusterOptions {
    pub nodes: usize,
    /// Broadcast pruned batches to peers (the production setting). Off,
    /// peers get the full record set — the control arm for showing that
    /// pruning changes nothing observable.
    pub prune: bool,
    pub txn: TxnOptions,
    /// Give each node a killable storage handle. Costs one indirection
    /// per operation, so it is opt-in.
    pub crash_wrappers: bool,
    pub max_gc_candidates: usize,
    /// Share an existing store (a reopened durable one, say) instead of a
    /// fresh in-memory one.
    pub backend: Option<Arc<dyn Backend>>,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            nodes: 3,
            prune: true,
            txn: TxnOptions::default(),
            crash_wrappers: false,
            max_gc_candidates: 256,
            backend: None,
        }
    }
}

struct ClusterNode {
    id: String,
    broadcaster: Broadcaster,
    /// What this node's manager reads and writes through — the shared
    /// store, possibly behind a crash wrapper.
    backend: Arc<dyn Backend>,
    crash: Option<Arc<CrashingBackend>>,
    slot: Mutex<Option<Arc<TxnManager>>>,
}

struct CoordCell {
    coord: Coordinator,
    /// Transactions the latest fault scan recovered; the next GC round
    /// must skip them. One mutex for both, so recovery and exclusion are
    /// indivisible.
    exclude: BTreeSet<TransactionId>,
}

pub struct LocalCluster {
    shared: Arc<dyn Backend>,
    nodes: Vec<ClusterNode>,
    coord: Mutex<CoordCell>,
    clock: Arc<AtomicU64>,
    txn: TxnOptions,
    prune: bool,
    max_gc_candidates: usize,
}

impl LocalCluster {
    pub fn build(opts: ClusterOptions) -> Result<Arc<LocalCluster>> {
        assert!(opts.nodes > 0, "a cluster needs at least one node");
        let shared: Arc<dyn Backend> =
            opts.backend.unwrap_or_else(|| Arc::new(MemoryBackend::new()));
        let clock = Arc::new(AtomicU64::new(0));
        let mut nodes = Vec::with_capacity(opts.nodes);
        for i in 0..opts.nodes {
            let id = format!("n{i}");
            let (backend, crash): (Arc<dyn Backend>, _) = if opts.crash_wrappers {
                let wrapper = Arc::new(CrashingBackend::new(shared.clone()));
                (wrapper.clone(), Some(wrapper))
            } else {
                (shared.clone(), None)
            };
            let mgr = Arc::new(TxnManager::new(
                backend.clone(),
                Clock::SharedLogical(clock.clone()),
                opts.txn.clone(),
            ));
            mgr.bootstrap()?;
            nodes.push(ClusterNode {
                id,
                broadcaster: Broadcaster::new(format!("n{i}")),
                backend,
                crash,
                slot: Mutex::new(Some(mgr)),
            });
        }
        // Over pre-existing storage (a reopened durable store), resume the
        // logical clock past everything bootstrap indexed so restart never
        // regresses timestamps.
        for node in &nodes {
            let slot = node.slot.lock().unwrap();
            if let Some(mgr) = slot.as_ref() {
                if let Some(rec) = mgr.index().read().unwrap().iter_oldest_first().last() {
                    clock.fetch_max(rec.tid.ts, Ordering::SeqCst);
                }
            }
        }
        Ok(Arc::new(LocalCluster {
            shared,
            nodes,
            coord: Mutex::new(CoordCell { coord: Coordinator::new(), exclude: BTreeSet::new() }),
            clock,
            txn: opts.txn,
            prune: opts.prune,
            max_gc_candidates: opts.max_gc_candidates,
        }))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_id(&self, i: usize) -> &str {
        &self.nodes[i].id
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.shared
    }

    pub fn txn_options(&self) -> &TxnOptions {
        &self.txn
    }

    /// Next shared-clock timestamp; what a manager on this cluster would
    /// stamp its next commit with. Direct-write experiments draw from the
    /// same sequence so their versions interleave honestly.
    pub fn next_ts(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// The node's manager, or `None` if it has been killed.
    pub fn mgr(&self, i: usize) -> Option<Arc<TxnManager>> {
        self.nodes[i].slot.lock().unwrap().clone()
    }

    pub fn crash_handle(&self, i: usize) -> Option<Arc<CrashingBackend>> {
        self.nodes[i].crash.clone()
    }

    pub fn live_indices(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.mgr(i).is_some()).collect()
    }

    /// First live node at or after `start` (mod node count), with its
    /// manager. `None` when everything is down.
    pub fn pick_live(&self, start: usize) -> Option<(usize, Arc<TxnManager>)> {
        let n = self.nodes.len();
        (0..n).map(|off| (start + off) % n).find_map(|i| self.mgr(i).map(|m| (i, m)))
    }

    /// Kills node `i`: its storage handle starts failing and its manager
    /// — sessions, commit index, unsent broadcast queue — is dropped.
    /// Whatever already reached the shared store stays.
    pub fn kill(&self, i: usize) {
        if let Some(crash) = &self.nodes[i].crash {
            crash.kill();
        }
        *self.nodes[i].slot.lock().unwrap() = None;
    }

    /// Brings node `i` back as a fresh process would come back: working
    /// storage, empty state, index rebuilt from the store. Returns how
    /// many commit records the bootstrap recovered.
    pub fn restart(&self, i: usize) -> Result<usize> {
        let node = &self.nodes[i];
        if let Some(crash) = &node.crash {
            crash.revive();
        }
        let mgr = Arc::new(TxnManager::new(
            node.backend.clone(),
            Clock::SharedLogical(self.clock.clone()),
            self.txn.clone(),
        ));
        let recovered = mgr.bootstrap()?;
        *node.slot.lock().unwrap() = Some(mgr);
        Ok(recovered)
    }

    /// One broadcast round: every live node drains its freshly committed
    /// records, sends the pruned (or full) batch to every other live
    /// node, and the complete batch to the coordinator. Dead nodes
    /// neither send nor receive — their queued records are simply gone,
    /// which is the failure mode the fault scan exists for.
    pub fn tick_multicast(&self) {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(mgr) = self.mgr(i) else { continue };
            let fresh = mgr.drain_outbound();
            let pair = {
                let idx = mgr.index().read().unwrap();
                node.broadcaster.collect(fresh, &idx, self.prune)
            };
            for (j, _) in self.nodes.iter().enumerate() {
                if j == i {
                    continue;
                }
                if let Some(peer) = self.mgr(j) {
                    peer.merge_batch(&pair.peers);
                }
            }
            self.coord.lock().unwrap().coord.ingest(&pair.coordinator);
        }
    }

    /// One fault-manager round: scan the shared store for commit records
    /// the coordinator has never seen, shield them from the next GC
    /// round, and hand them to every live node. Returns what was
    /// recovered.
    pub fn tick_fault(&self) -> Result<Vec<CommitRecord>> {
        let recovered = {
            let mut cell = self.coord.lock().unwrap();
            let recovered = cell.coord.fault_scan(self.shared.as_ref())?;
            cell.exclude.extend(recovered.iter().map(|rec| rec.tid));
            recovered
        };
        for i in self.live_indices() {
            if let Some(mgr) = self.mgr(i) {
                for rec in &recovered {
                    mgr.record_committed(rec.clone());
                }
            }
        }
        Ok(recovered)
    }

    /// One garbage-collection round: per-node metadata sweeps, then the
    /// coordinator's propose/ack/complete cycle, then storage deletion.
    /// Returns the records whose bytes were reclaimed. Nodes that are
    /// down cannot ack, so their candidates stay — deletion never
    /// outruns a node that might still serve the version.
    pub fn tick_gc(&self) -> Result<Vec<CommitRecord>> {
        for i in self.live_indices() {
            if let Some(mgr) = self.mgr(i) {
                mgr.expire_stale_sessions(None);
                local_gc_sweep(&mgr);
                let doomed = mgr.drain_doomed();
                if !doomed.is_empty() {
                    run_deletions(self.shared.as_ref(), &doomed)?;
                }
            }
        }

        let proposal = {
            let mut cell = self.coord.lock().unwrap();
            let exclude = std::mem::take(&mut cell.exclude);
            cell.coord.propose_round(&exclude, self.max_gc_candidates)
        };
        let Some(set) = proposal else { return Ok(Vec::new()) };

        for i in self.live_indices() {
            if let Some(mgr) = self.mgr(i) {
                let ack = handle_gc_candidates(&mgr, &self.nodes[i].id, &set);
                self.coord.lock().unwrap().coord.record_ack(ack);
            }
        }

        let expected: Vec<String> = self.nodes.iter().map(|n| n.id.clone()).collect();
        let deleted = self.coord.lock().unwrap().coord.complete_round(&expected);
        if !deleted.is_empty() {
            run_deletions(self.shared.as_ref(), &deletion_keys(&deleted))?;
        }
        Ok(deleted)
    }

    /// Ages out provisional spill keys; `now_ms` is the driver's to
    /// invent, which is what makes the sweep testable.
    pub fn orphan_sweep(&self, now_ms: u64, orphan_age_ms: u64) -> Result<usize> {
        let mut cell = self.coord.lock().unwrap();
        Ok(cell.coord.orphan_sweep(self.shared.as_ref(), now_ms, orphan_age_ms)?.len())
    }

    pub fn coordinator_ledger_len(&self) -> usize {
        self.coord.lock().unwrap().coord.ledger_len()
    }

    /// Reads every key on every live node, each in its own one-shot
    /// transaction, and reports which version answered. Two replay runs
    /// agree exactly when their sweeps are equal.
    pub fn read_sweep(&self, keys: &[String]) -> Result<Vec<SweepEntry>> {
        let mut out = Vec::new();
        for i in self.live_indices() {
            let Some(mgr) = self.mgr(i) else { continue };
            for key in keys {
                let probe = TxnUuid::random();
                mgr.start_with(probe);
                let read = mgr.get(probe, key)?;
                mgr.abort(probe)?;
                out.push(SweepEntry {
                    node: self.nodes[i].id.clone(),
                    key: key.clone(),
                    tid: read.observed.as_ref().map(|(tid, _)| *tid),
                });
            }
        }
        Ok(out)
    }

    /// Background ticking for wall-clock runs: multicast always, GC and
    /// fault scans when given. The guard stops and joins on drop.
    pub fn spawn_ticker(
        self: &Arc<Self>,
        multicast_ms: u64,
        gc_ms: Option<u64>,
        fault_ms: Option<u64>,
    ) -> TickerGuard {
        let stop = Arc::new(AtomicBool::new(false));
        let cluster = self.clone();
        let flag = stop.clone();
        let thread = thread::spawn(move || {
            let start = Instant::now();
            let mut done_multicast = 0u64;
            let mut done_gc = 0u64;
            let mut done_fault = 0u64;
            while !flag.load(Ordering::SeqCst) {
                let elapsed = start.elapsed().as_millis() as u64;
                if elapsed / multicast_ms > done_multicast {
                    done_multicast = elapsed / multicast_ms;
                    cluster.tick_multicast();
                }
                if let Some(ms) = fault_ms {
                    if elapsed / ms > done_fault {
                        done_fault = elapsed / ms;
                        if let Err(err) = cluster.tick_fault() {
                            log::warn!("fault tick failed: {err}");
                        }
                    }
                }
                if let Some(ms) = gc_ms {
                    if elapsed / ms > done_gc {
                        done_gc = elapsed / ms;
                        if let Err(err) = cluster.tick_gc() {
                            log::warn!("gc tick failed: {err}");
                        }
                    }
                }
                thread::sleep(Duration::from_millis(1));
            }
        });
        TickerGuard { stop, thread: Some(thread) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepEntry {
    pub node: String,
    pub key: String,
    pub tid: Option<TransactionId>,
}

pub struct TickerGuard {
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Drop for TickerGuard {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn commit_on(cluster: &LocalCluster, node: usize, key: &str, val: &[u8]) -> TransactionId {
        let mgr = cluster.mgr(node).expect("node is live");
        let h = mgr.start();
        mgr.put(h.uuid, key, val.to_vec()).unwrap();
        mgr.commit(h.uuid).unwrap()
    }

    #[test]
    fn multicast_makes_remote_commits_visible() {
        let cluster = LocalCluster::build(ClusterOptions::default()).unwrap();
        let tid = commit_on(&cluster, 0, "shared", b"hello");

        // Before the tick, node 2 has never heard of the write.
        let mgr2 = cluster.mgr(2).unwrap();
        let probe = mgr2.start();
        assert!(mgr2.get(probe.uuid, "shared").unwrap().value.is_none());
        mgr2.abort(probe.uuid).unwrap();

        cluster.tick_multicast();
        let probe = mgr2.start();
        let read = mgr2.get(probe.uuid, "shared").unwrap();
        assert_eq!(read.value.as_deref(), Some(&b"hello"[..]));
        assert_eq!(read.observed.unwrap().0, tid);
        mgr2.abort(probe.uuid).unwrap();
    }

    #[test]
    fn killed_node_loses_unsent_broadcasts_and_fault_scan_recovers_them() {
        let cluster = LocalCluster::build(ClusterOptions::default()).unwrap();
        let tid = commit_on(&cluster, 0, "orphaned", b"v");
        cluster.kill(0);
        assert_eq!(cluster.live_indices(), vec![1, 2]);

        // The broadcast died with the node; survivors see nothing.
        cluster.tick_multicast();
        let mgr1 = cluster.mgr(1).unwrap();
        let probe = mgr1.start();
        assert!(mgr1.get(probe.uuid, "orphaned").unwrap().value.is_none());
        mgr1.abort(probe.uuid).unwrap();

        // The record is in shared storage, so the scan finds it.
        let recovered = cluster.tick_fault().unwrap();
        assert_eq!(recovered.len(), 1);
        assert_eq!(recovered[0].tid, tid);
        let probe = mgr1.start();
        assert_eq!(mgr1.get(probe.uuid, "orphaned").unwrap().value.as_deref(), Some(&b"v"[..]));
        mgr1.abort(probe.uuid).unwrap();

        // Idempotent: a second scan recovers nothing new.
        assert!(cluster.tick_fault().unwrap().is_empty());
    }

    #[test]
    fn restart_rebuilds_the_index_from_storage() {
        let cluster = LocalCluster::build(ClusterOptions {
            crash_wrappers: true,
            ..ClusterOptions::default()
        })
        .unwrap();
        commit_on(&cluster, 0, "durable", b"kept");
        cluster.kill(0);
        assert!(cluster.crash_handle(0).unwrap().is_dead());

        let recovered = cluster.restart(0).unwrap();
        assert_eq!(recovered, 1);
        let mgr = cluster.mgr(0).unwrap();
        let probe = mgr.start();
        assert_eq!(mgr.get(probe.uuid, "durable").unwrap().value.as_deref(), Some(&b"kept"[..]));
        mgr.abort(probe.uuid).unwrap();
    }

    #[test]
    fn gc_reclaims_superseded_versions_once_everyone_acks() {
        let cluster = LocalCluster::build(ClusterOptions::default()).unwrap();
        let old = commit_on(&cluster, 0, "hot", b"v1");
        cluster.tick_multicast();
        let new = commit_on(&cluster, 1, "hot", b"v2");
        cluster.tick_multicast();

        let deleted = cluster.tick_gc().unwrap();
        assert_eq!(deleted.len(), 1);
        assert_eq!(deleted[0].tid, old);

        // The superseded version's bytes are gone from the shared store…
        let leftover = cluster
            .backend()
            .list_prefix(crate::model::data_prefix(), None, false)
            .unwrap();
        assert_eq!(leftover.len(), 1, "only the live version remains: {leftover:?}");

        // …and every node still serves the newest one.
        for entry in cluster.read_sweep(&["hot".into()]).unwrap() {
            assert_eq!(entry.tid, Some(new), "stale answer on {}", entry.node);
        }
    }

    #[test]
    fn fresh_recoveries_are_shielded_from_the_next_gc_round() {
        let cluster = LocalCluster::build(ClusterOptions::default()).unwrap();
        let old = commit_on(&cluster, 0, "contested", b"v1");
        cluster.tick_multicast();
        commit_on(&cluster, 1, "contested", b"v2");
        cluster.tick_multicast();
        // A third write whose broadcast never happens: only the fault
        // scan knows. It supersedes everything, so without the shield the
        // round right after recovery could try to reap `old` while nodes
        // still lack the superseding record… the scan's exclusion defers
        // candidates it just recovered instead.
        commit_on(&cluster, 2, "contested", b"v3");
        cluster.kill(2);
        let recovered = cluster.tick_fault().unwrap();
        assert_eq!(recovered.len(), 1);

        // The recovered commit is excluded; older superseded ones are fair
        // game — but node 2 is dead and cannot ack, so nothing completes.
        assert!(cluster.tick_gc().unwrap().is_empty());
        assert!(cluster.restart(2).is_ok());
        let deleted = cluster.tick_gc().unwrap();
        assert!(deleted.iter().any(|rec| rec.tid == old));
    }

    #[test]
    fn read_sweep_is_identical_across_prune_settings() {
        // Replay equality needs every nondeterminism source pinned: the
        // shared logical clock handles timestamps, a seeded uuid sequence
        // handles identities.
        let run = |prune: bool| {
            let cluster = LocalCluster::build(ClusterOptions {
                prune,
                ..ClusterOptions::default()
            })
            .unwrap();
            let mut next_uuid = 0u8;
            for round in 0..4u8 {
                for node in 0..3 {
                    next_uuid += 1;
                    let uuid = TxnUuid([next_uuid; 16]);
                    let mgr = cluster.mgr(node).unwrap();
                    mgr.start_with(uuid);
                    mgr.put(uuid, &format!("k{node}"), vec![round]).unwrap();
                    mgr.commit(uuid).unwrap();
                }
                cluster.tick_multicast();
            }
            let keys: Vec<String> = (0..3).map(|n| format!("k{n}")).collect();
            cluster.read_sweep(&keys).unwrap()
        };
        assert_eq!(run(true), run(false));
    }
}
