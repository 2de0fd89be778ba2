//! Workload generation and the two execution modes under measurement:
//! through the shim, or writing versioned records straight to storage
//! with no commit protocol at all.
//!
//! Both modes run the identical plan — same clients, same keys, same
//! hop structure, drawn from the same seed — and leave behind the same
//! kind of operation log, so the anomaly counter is the only judge and
//! the comparison is apples to apples.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use crate::error::{AftError, Result};
use crate::harness::bypass::{bypass_read, bypass_write};
use crate::harness::cluster::LocalCluster;
use crate::harness::oplog::{OpKind, OpLog, OpRecord, TxnOutcome};
use crate::model::{TransactionId, TxnUuid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Multi-hop transactions through the transaction managers.
    Shim,
    /// The same plan written as bare versioned records: no buffering, no
    /// commit records, each write visible the instant it lands.
    Bypass,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub clients: usize,
    pub txns_per_client: usize,
    /// Hops per transaction: a hop is one function in the chain, doing
    /// its reads then its writes before passing the baton.
    pub hops: usize,
    pub reads_per_hop: usize,
    pub writes_per_hop: usize,
    pub keyspace: usize,
    /// Zipf exponent for key popularity; 0 means uniform.
    pub zipf: f64,
    pub value_size: usize,
    pub mode: Mode,
    /// Attempts per transaction before giving up (aborted-and-retried
    /// reads are the shim's documented response to not-yet-joined
    /// sibling writes).
    pub retry_limit: usize,
    /// Record every operation in the log. Anomaly counting needs this;
    /// long steady-state measurement runs turn it off so the log doesn't
    /// dwarf the workload. Outcomes and metrics are kept either way.
    pub log_ops: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            clients: 10,
            txns_per_client: 1_000,
            hops: 2,
            reads_per_hop: 2,
            writes_per_hop: 1,
            keyspace: 1_000,
            zipf: 1.0,
            value_size: 64,
            mode: Mode::Shim,
            retry_limit: 5,
            log_ops: true,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(AftError::Config(format!("workload: {what}")));
        if self.clients == 0 {
            return bad("clients must be > 0");
        }
        if self.hops == 0 {
            return bad("hops must be > 0");
        }
        if self.keyspace == 0 {
            return bad("keyspace must be > 0");
        }
        if self.reads_per_hop + self.writes_per_hop == 0 {
            return bad("a hop must read or write something");
        }
        if !(self.zipf >= 0.0) {
            return bad("zipf must be >= 0");
        }
        if self.retry_limit == 0 {
            return bad("retry_limit must be > 0");
        }
        Ok(())
    }
}

/// Draws keys with Zipf-distributed popularity (rank 1 hottest), or
/// uniformly when the exponent is 0.
pub struct KeySampler {
    dist: Option<Zipf<f64>>,
    keyspace: usize,
}

impl KeySampler {
    pub fn new(keyspace: usize, exponent: f64) -> Result<Self> {
        let dist = if exponent > 0.0 {
            Some(
                Zipf::new(keyspace as u64, exponent)
                    .map_err(|e| AftError::Config(format!("zipf: {e}")))?,
            )
        } else {
            None
        };
        Ok(KeySampler { dist, keyspace })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> String {
        let rank = match &self.dist {
            Some(dist) => dist.sample(rng) as usize - 1,
            None => rng.gen_range(0..self.keyspace),
        };
        format!("k{rank:05}")
    }
}

/// One transaction, fully planned before execution: the bypass arm needs
/// the complete write set up front (its versions carry the metadata a
/// commit record would), and retries re-run the same plan.
#[derive(Clone, Debug)]
pub struct TxnPlan {
    pub hops: Vec<HopPlan>,
    pub writeset: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct HopPlan {
    pub reads: Vec<String>,
    pub writes: Vec<String>,
}

pub fn plan_txn(spec: &WorkloadSpec, sampler: &KeySampler, rng: &mut impl Rng) -> TxnPlan {
    let mut hops = Vec::with_capacity(spec.hops);
    let mut writeset = BTreeSet::new();
    for _ in 0..spec.hops {
        let reads = (0..spec.reads_per_hop).map(|_| sampler.sample(rng)).collect();
        let mut writes: Vec<String> = Vec::with_capacity(spec.writes_per_hop);
        for _ in 0..spec.writes_per_hop {
            // Distinct keys within one transaction: a second write to the
            // same key would just overwrite the first in the buffer.
            loop {
                let key = sampler.sample(rng);
                if !writeset.contains(&key) {
                    writeset.insert(key.clone());
                    writes.push(key);
                    break;
                }
            }
        }
        hops.push(HopPlan { reads, writes });
    }
    TxnPlan { hops, writeset }
}

/// Self-describing payload: who wrote it, for which key, on which hop.
/// A read that returns bytes naming a different key is a wrong-value
/// read — storage handed back something that was never written there.
pub fn encode_payload(uuid: TxnUuid, key: &str, hop: usize, size: usize) -> Vec<u8> {
    let mut bytes = format!("{uuid}|{key}|{hop}|").into_bytes();
    if bytes.len() < size {
        bytes.resize(size, b'x');
    }
    bytes
}

pub fn payload_matches(bytes: &[u8], key: &str) -> bool {
    let Ok(text) = std::str::from_utf8(bytes) else { return false };
    text.split('|').nth(1) == Some(key)
}

/// The stronger check: the bytes must name the key they were read from
/// AND the transaction the read claims produced them. A version deleted
/// underfoot (a GC bug) would come back absent, stale, or as some other
/// transaction's bytes — all of which fail here.
pub fn payload_consistent(bytes: &[u8], key: &str, writer: Option<TxnUuid>) -> bool {
    let Ok(text) = std::str::from_utf8(bytes) else { return false };
    let mut fields = text.split('|');
    let (Some(u), Some(k)) = (fields.next(), fields.next()) else { return false };
    k == key && writer.map_or(true, |w| u == w.to_string())
}

/// Applies `payload_consistent` to one shim read: own-write reads must
/// carry our own uuid, observed reads the observed version's. Reads that
/// returned nothing are vacuously fine.
fn shim_read_consistent(read: &crate::txn::ReadResult, key: &str, own: TxnUuid) -> bool {
    let Some(bytes) = &read.value else { return true };
    let writer = if read.from_own_write {
        Some(own)
    } else {
        read.observed.as_ref().map(|(tid, _)| tid.uuid)
    };
    payload_consistent(bytes, key, writer)
}

#[derive(Clone, Debug, Default)]
pub struct RunMetrics {
    pub committed: usize,
    pub failed: usize,
    pub retries: usize,
    /// Reads whose bytes don't belong to the version the read claims to
    /// have observed (see `payload_consistent`). Always 0 unless storage
    /// or GC handed back something it shouldn't have.
    pub wrong_values: usize,
    pub wall_ms: u64,
    /// Commit-to-commit latency of each successful transaction.
    pub latencies_ms: Vec<f64>,
}

impl RunMetrics {
    pub fn throughput_tps(&self) -> f64 {
        if self.wall_ms == 0 {
            return 0.0;
        }
        self.committed as f64 / (self.wall_ms as f64 / 1_000.0)
    }

    pub fn p50_ms(&self) -> f64 {
        percentile(&self.latencies_ms, 0.50)
    }

    pub fn p99_ms(&self) -> f64 {
        percentile(&self.latencies_ms, 0.99)
    }

    fn absorb(&mut self, other: RunMetrics) {
        self.committed += other.committed;
        self.failed += other.failed;
        self.retries += other.retries;
        self.wrong_values += other.wrong_values;
        self.latencies_ms.extend(other.latencies_ms);
    }
}

fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}

pub struct RunOutput {
    pub log: OpLog,
    pub metrics: RunMetrics,
}

/// Runs the workload with real concurrency: one thread per client, all
/// against the same cluster. The caller supplies whatever background
/// ticking the run needs (broadcast at least — shim clients starve
/// without it).
pub fn run_workload(cluster: &Arc<LocalCluster>, spec: &WorkloadSpec, seed: u64) -> Result<RunOutput> {
    run_threaded(cluster, spec, seed, None)
}

/// Same concurrent driver, but wall-clock bound: every client keeps
/// issuing transactions until the deadline passes, and `txns_per_client`
/// is ignored. For steady-state measurements (GC on vs off, plateau
/// checks) where "how long" matters and "how many" doesn't.
pub fn run_workload_timed(
    cluster: &Arc<LocalCluster>,
    spec: &WorkloadSpec,
    seed: u64,
    wall: Duration,
) -> Result<RunOutput> {
    run_threaded(cluster, spec, seed, Some(Instant::now() + wall))
}

fn run_threaded(
    cluster: &Arc<LocalCluster>,
    spec: &WorkloadSpec,
    seed: u64,
    deadline: Option<Instant>,
) -> Result<RunOutput> {
    spec.validate()?;
    let started = Instant::now();
    let shards: Vec<Result<(OpLog, RunMetrics)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..spec.clients)
            .map(|client| {
                let cluster = Arc::clone(cluster);
                scope.spawn(move || run_client(&cluster, spec, seed, client, deadline))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
    });

    let mut log_shards = Vec::with_capacity(shards.len());
    let mut metrics = RunMetrics::default();
    for shard in shards {
        let (log, m) = shard?;
        log_shards.push(log);
        metrics.absorb(m);
    }
    metrics.wall_ms = started.elapsed().as_millis() as u64;
    Ok(RunOutput { log: OpLog::merge(log_shards), metrics })
}

fn client_rng(seed: u64, client: usize) -> ChaCha8Rng {
    // splitmix64 scramble so adjacent client ids land far apart.
    let mut z = seed ^ (client as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn run_client(
    cluster: &LocalCluster,
    spec: &WorkloadSpec,
    seed: u64,
    client: usize,
    deadline: Option<Instant>,
) -> Result<(OpLog, RunMetrics)> {
    let mut rng = client_rng(seed, client);
    let sampler = KeySampler::new(spec.keyspace, spec.zipf)?;
    let mut log = OpLog::default();
    let mut metrics = RunMetrics::default();

    let mut t = 0;
    loop {
        match deadline {
            Some(d) => {
                if Instant::now() >= d {
                    break;
                }
            }
            None => {
                if t == spec.txns_per_client {
                    break;
                }
            }
        }
        let plan = plan_txn(spec, &sampler, &mut rng);
        match spec.mode {
            Mode::Bypass => {
                let started = Instant::now();
                run_bypass_txn(cluster, spec, client, &plan, &mut rng, &mut log, &mut metrics)?;
                metrics.committed += 1;
                metrics.latencies_ms.push(started.elapsed().as_secs_f64() * 1_000.0);
            }
            Mode::Shim => {
                let mut landed = false;
                for attempt in 0..spec.retry_limit {
                    let started = Instant::now();
                    let uuid = TxnUuid::from_bytes(rng.gen());
                    match run_shim_attempt(
                        cluster,
                        spec,
                        client,
                        &plan,
                        uuid,
                        client + t + attempt,
                        &mut log,
                        &mut metrics,
                    )? {
                        Some(_tid) => {
                            metrics.committed += 1;
                            metrics.latencies_ms.push(started.elapsed().as_secs_f64() * 1_000.0);
                            landed = true;
                            break;
                        }
                        None => metrics.retries += 1,
                    }
                }
                if !landed {
                    metrics.failed += 1;
                }
            }
        }
        t += 1;
    }
    Ok((log, metrics))
}

/// One shim attempt under `uuid`. `Ok(Some(tid))` committed; `Ok(None)`
/// aborted on a retryable read (sibling versions not joined yet — the
/// protocol's NULL answer) and the caller should retry under a fresh
/// identity. The attempt's operations and outcome are logged either way.
fn run_shim_attempt(
    cluster: &LocalCluster,
    spec: &WorkloadSpec,
    client: usize,
    plan: &TxnPlan,
    uuid: TxnUuid,
    node_hint: usize,
    log: &mut OpLog,
    metrics: &mut RunMetrics,
) -> Result<Option<TransactionId>> {
    let Some((_, mgr)) = cluster.pick_live(node_hint) else {
        return Err(AftError::Config("no live nodes".into()));
    };
    mgr.start_with(uuid);

    let fail = |log: &mut OpLog| {
        let _ = mgr.abort(uuid);
        log.outcomes.push(TxnOutcome { client, txn: uuid, committed: false, tid: None });
        Ok(None)
    };

    for (hop, hop_plan) in plan.hops.iter().enumerate() {
        for key in &hop_plan.reads {
            match mgr.get(uuid, key) {
                Ok(read) => {
                    if !shim_read_consistent(&read, key, uuid) {
                        metrics.wrong_values += 1;
                    }
                    if spec.log_ops {
                        log.records.push(OpRecord {
                            client,
                            txn: uuid,
                            hop,
                            kind: OpKind::Read,
                            key: key.clone(),
                            observed: read.observed.clone(),
                            own_write: read.from_own_write,
                            written: None,
                        })
                    }
                }
                Err(AftError::NotReadable(_)) => return fail(log),
                Err(other) => return Err(other),
            }
        }
        for key in &hop_plan.writes {
            mgr.put(uuid, key, encode_payload(uuid, key, hop, spec.value_size))?;
            if spec.log_ops {
                log.records.push(OpRecord {
                    client,
                    txn: uuid,
                    hop,
                    kind: OpKind::Write,
                    key: key.clone(),
                    observed: None,
                    own_write: false,
                    written: None,
                });
            }
        }
    }

    match mgr.commit(uuid) {
        Ok(tid) => {
            log.outcomes.push(TxnOutcome { client, txn: uuid, committed: true, tid: Some(tid) });
            Ok(Some(tid))
        }
        Err(AftError::NotReadable(_)) => fail(log),
        Err(other) => Err(other),
    }
}

/// The same plan executed as raw versioned writes: every write is
/// immediately visible on its own, which is precisely the behavior under
/// indictment.
fn run_bypass_txn(
    cluster: &LocalCluster,
    spec: &WorkloadSpec,
    client: usize,
    plan: &TxnPlan,
    rng: &mut impl Rng,
    log: &mut OpLog,
    metrics: &mut RunMetrics,
) -> Result<()> {
    let uuid = TxnUuid::from_bytes(rng.gen());
    let backend = cluster.backend().as_ref();
    let mut self_written: BTreeMap<&str, TransactionId> = BTreeMap::new();
    let mut last_tid = None;

    for (hop, hop_plan) in plan.hops.iter().enumerate() {
        for key in &hop_plan.reads {
            let (observed, own) = match bypass_read(backend, key)? {
                Some((tid, value)) => {
                    if !payload_consistent(&value.payload, key, Some(tid.uuid)) {
                        metrics.wrong_values += 1;
                    }
                    let own = self_written.get(key.as_str()) == Some(&tid);
                    (Some((tid, value.cowritten)), own)
                }
                None => (None, false),
            };
            if spec.log_ops {
                log.records.push(OpRecord {
                    client,
                    txn: uuid,
                    hop,
                    kind: OpKind::Read,
                    key: key.clone(),
                    observed,
                    own_write: own,
                    written: None,
                });
            }
        }
        for key in &hop_plan.writes {
            let ts = cluster.next_ts();
            let tid = bypass_write(
                backend,
                ts,
                uuid,
                key,
                &plan.writeset,
                encode_payload(uuid, key, hop, spec.value_size),
            )?;
            self_written.insert(key, tid);
            last_tid = Some(tid);
            if spec.log_ops {
                log.records.push(OpRecord {
                    client,
                    txn: uuid,
                    hop,
                    kind: OpKind::Write,
                    key: key.clone(),
                    observed: None,
                    own_write: false,
                    written: Some(tid),
                });
            }
        }
    }
    log.outcomes.push(TxnOutcome { client, txn: uuid, committed: true, tid: last_tid });
    Ok(())
}

/// When the single-threaded driver runs cluster maintenance, counted in
/// rounds (one round = every client advances one hop). 0 disables a tick.
#[derive(Clone, Copy, Debug)]
pub struct TickSchedule {
    pub multicast_every: usize,
    pub fault_every: usize,
    pub gc_every: usize,
}

impl Default for TickSchedule {
    fn default() -> Self {
        TickSchedule { multicast_every: 1, fault_every: 0, gc_every: 0 }
    }
}

/// Runs the workload on one thread, interleaving clients at hop
/// granularity in a fixed round-robin. With the cluster on a shared
/// logical clock, two runs from one seed produce identical version
/// histories — the replay-equality experiments need exactly that.
pub fn run_workload_deterministic(
    cluster: &LocalCluster,
    spec: &WorkloadSpec,
    seed: u64,
    ticks: &TickSchedule,
) -> Result<RunOutput> {
    spec.validate()?;
    let started = Instant::now();
    let sampler = KeySampler::new(spec.keyspace, spec.zipf)?;
    let mut clients: Vec<ClientState> = (0..spec.clients)
        .map(|c| ClientState::new(c, client_rng(seed, c)))
        .collect();

    let mut log = OpLog::default();
    let mut metrics = RunMetrics::default();
    let mut round = 0usize;
    loop {
        let mut anyone_active = false;
        for state in &mut clients {
            if state.step(cluster, spec, &sampler, &mut log, &mut metrics)? {
                anyone_active = true;
            }
        }
        if !anyone_active {
            break;
        }
        round += 1;
        if ticks.multicast_every > 0 && round % ticks.multicast_every == 0 {
            cluster.tick_multicast();
        }
        if ticks.fault_every > 0 && round % ticks.fault_every == 0 {
            cluster.tick_fault()?;
        }
        if ticks.gc_every > 0 && round % ticks.gc_every == 0 {
            cluster.tick_gc()?;
        }
    }
    metrics.wall_ms = started.elapsed().as_millis() as u64;
    Ok(RunOutput { log, metrics })
}

/// Per-client progress for the round-robin driver: which transaction,
/// which attempt, which hop, plus the open session when one exists.
struct ClientState {
    client: usize,
    rng: ChaCha8Rng,
    txn_idx: usize,
    attempt: usize,
    plan: Option<TxnPlan>,
    uuid: TxnUuid,
    node_hint: usize,
    hop: usize,
    self_written: BTreeMap<String, TransactionId>,
    last_tid: Option<TransactionId>,
}

impl ClientState {
    fn new(client: usize, rng: ChaCha8Rng) -> Self {
        ClientState {
            client,
            rng,
            txn_idx: 0,
            attempt: 0,
            plan: None,
            uuid: TxnUuid([0; 16]),
            node_hint: 0,
            hop: 0,
            self_written: BTreeMap::new(),
            last_tid: None,
        }
    }

    /// Advances one hop (opening and closing transactions as needed).
    /// Returns false once this client has finished all its transactions.
    fn step(
        &mut self,
        cluster: &LocalCluster,
        spec: &WorkloadSpec,
        sampler: &KeySampler,
        log: &mut OpLog,
        metrics: &mut RunMetrics,
    ) -> Result<bool> {
        if self.plan.is_none() {
            if self.txn_idx == spec.txns_per_client {
                return Ok(false);
            }
            self.plan = Some(plan_txn(spec, sampler, &mut self.rng));
            self.begin_attempt(cluster, spec)?;
        }

        let plan = self.plan.clone().expect("plan exists");
        let hop = self.hop;
        let outcome = match spec.mode {
            Mode::Shim => self.shim_hop(cluster, spec, &plan, hop, log, metrics)?,
            Mode::Bypass => {
                self.bypass_hop(cluster, spec, &plan, hop, log, metrics)?;
                HopOutcome::Advanced
            }
        };

        match outcome {
            HopOutcome::Advanced => {
                self.hop += 1;
                if self.hop == plan.hops.len() {
                    self.finish_attempt(cluster, spec, log, metrics)?;
                }
            }
            HopOutcome::Aborted => self.retry_or_give_up(cluster, spec, log, metrics)?,
        }
        Ok(true)
    }

    fn begin_attempt(&mut self, cluster: &LocalCluster, spec: &WorkloadSpec) -> Result<()> {
        self.uuid = TxnUuid::from_bytes(self.rng.gen());
        self.hop = 0;
        self.self_written.clear();
        self.last_tid = None;
        self.node_hint = self.client + self.txn_idx + self.attempt;
        if matches!(spec.mode, Mode::Shim) {
            let Some((_, mgr)) = cluster.pick_live(self.node_hint) else {
                return Err(AftError::Config("no live nodes".into()));
            };
            mgr.start_with(self.uuid);
        }
        Ok(())
    }

    fn mgr_for_attempt(&self, cluster: &LocalCluster) -> Result<Arc<crate::txn::TxnManager>> {
        cluster
            .pick_live(self.node_hint)
            .map(|(_, mgr)| mgr)
            .ok_or_else(|| AftError::Config("no live nodes".into()))
    }

    fn shim_hop(
        &mut self,
        cluster: &LocalCluster,
        spec: &WorkloadSpec,
        plan: &TxnPlan,
        hop: usize,
        log: &mut OpLog,
        metrics: &mut RunMetrics,
    ) -> Result<HopOutcome> {
        let mgr = self.mgr_for_attempt(cluster)?;
        for key in &plan.hops[hop].reads {
            match mgr.get(self.uuid, key) {
                Ok(read) => {
                    if !shim_read_consistent(&read, key, self.uuid) {
                        metrics.wrong_values += 1;
                    }
                    if spec.log_ops {
                        log.records.push(OpRecord {
                            client: self.client,
                            txn: self.uuid,
                            hop,
                            kind: OpKind::Read,
                            key: key.clone(),
                            observed: read.observed.clone(),
                            own_write: read.from_own_write,
                            written: None,
                        })
                    }
                }
                Err(AftError::NotReadable(_)) => {
                    let _ = mgr.abort(self.uuid);
                    return Ok(HopOutcome::Aborted);
                }
                Err(other) => return Err(other),
            }
        }
        for key in &plan.hops[hop].writes {
            mgr.put(self.uuid, key, encode_payload(self.uuid, key, hop, spec.value_size))?;
            if spec.log_ops {
                log.records.push(OpRecord {
                    client: self.client,
                    txn: self.uuid,
                    hop,
                    kind: OpKind::Write,
                    key: key.clone(),
                    observed: None,
                    own_write: false,
                    written: None,
                });
            }
        }
        Ok(HopOutcome::Advanced)
    }

    fn bypass_hop(
        &mut self,
        cluster: &LocalCluster,
        spec: &WorkloadSpec,
        plan: &TxnPlan,
        hop: usize,
        log: &mut OpLog,
        metrics: &mut RunMetrics,
    ) -> Result<()> {
        let backend = cluster.backend().as_ref();
        for key in &plan.hops[hop].reads {
            let (observed, own) = match bypass_read(backend, key)? {
                Some((tid, value)) => {
                    if !payload_consistent(&value.payload, key, Some(tid.uuid)) {
                        metrics.wrong_values += 1;
                    }
                    let own = self.self_written.get(key) == Some(&tid);
                    (Some((tid, value.cowritten)), own)
                }
                None => (None, false),
            };
            if spec.log_ops {
                log.records.push(OpRecord {
                    client: self.client,
                    txn: self.uuid,
                    hop,
                    kind: OpKind::Read,
                    key: key.clone(),
                    observed,
                    own_write: own,
                    written: None,
                });
            }
        }
        for key in &plan.hops[hop].writes {
            let ts = cluster.next_ts();
            let tid = bypass_write(
                backend,
                ts,
                self.uuid,
                key,
                &plan.writeset,
                encode_payload(self.uuid, key, hop, spec.value_size),
            )?;
            self.self_written.insert(key.clone(), tid);
            self.last_tid = Some(tid);
            if spec.log_ops {
                log.records.push(OpRecord {
                    client: self.client,
                    txn: self.uuid,
                    hop,
                    kind: OpKind::Write,
                    key: key.clone(),
                    observed: None,
                    own_write: false,
                    written: Some(tid),
                });
            }
        }
        Ok(())
    }

    fn finish_attempt(
        &mut self,
        cluster: &LocalCluster,
        spec: &WorkloadSpec,
        log: &mut OpLog,
        metrics: &mut RunMetrics,
    ) -> Result<()> {
        match spec.mode {
            Mode::Bypass => {
                log.outcomes.push(TxnOutcome {
                    client: self.client,
                    txn: self.uuid,
                    committed: true,
                    tid: self.last_tid,
                });
                metrics.committed += 1;
                self.next_txn();
            }
            Mode::Shim => {
                let mgr = self.mgr_for_attempt(cluster)?;
                match mgr.commit(self.uuid) {
                    Ok(tid) => {
                        log.outcomes.push(TxnOutcome {
                            client: self.client,
                            txn: self.uuid,
                            committed: true,
                            tid: Some(tid),
                        });
                        metrics.committed += 1;
                        self.next_txn();
                    }
                    Err(AftError::NotReadable(_)) => {
                        let _ = mgr.abort(self.uuid);
                        self.retry_or_give_up(cluster, spec, log, metrics)?;
                    }
                    Err(other) => return Err(other),
                }
            }
        }
        Ok(())
    }

    fn retry_or_give_up(
        &mut self,
        cluster: &LocalCluster,
        spec: &WorkloadSpec,
        log: &mut OpLog,
        metrics: &mut RunMetrics,
    ) -> Result<()> {
        log.outcomes.push(TxnOutcome {
            client: self.client,
            txn: self.uuid,
            committed: false,
            tid: None,
        });
        self.attempt += 1;
        if self.attempt < spec.retry_limit {
            metrics.retries += 1;
            self.begin_attempt(cluster, spec)?;
        } else {
            metrics.failed += 1;
            self.next_txn();
        }
        Ok(())
    }

    fn next_txn(&mut self) {
        self.txn_idx += 1;
        self.attempt = 0;
        self.plan = None;
        self.hop = 0;
    }
}

enum HopOutcome {
    Advanced,
    Aborted,
}
