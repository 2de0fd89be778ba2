//! The fault-manager runtime: an off-path process that scans storage for
//! commit records the nodes never broadcast, re-announces them, ages out
//! orphaned provisional keys, and coordinates globally-acknowledged
//! garbage collection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::error::{AftError, Result};
use crate::gc::{deletion_keys, Coordinator, GcAck};
use crate::model::{CommitRecord, TransactionId};
use crate::replication::CommitBatch;
use crate::server::client::{Conn, RemoteBackend};
use crate::server::config::CoordinatorConfig;
use crate::storage::{Backend, StorageKey};
use crate::wire;

const POLL: Duration = Duration::from_millis(5);

/// Coordinator state plus the delivery bookkeeping the ticks share. One
/// mutex covers both so a record recovered by the fault scan is excluded
/// from GC proposals in the same critical section that learns about it —
/// recovery always wins the race, GC waits a round.
struct CoordState {
    coord: Coordinator,
    /// Recovered records not yet acknowledged by every node. Kept (and
    /// kept out of GC) until delivery succeeds.
    unnotified: BTreeMap<TransactionId, CommitRecord>,
    /// Tids GC must skip in its next proposal.
    gc_exclude: BTreeSet<TransactionId>,
}

pub struct CoordinatorHandle {
    addr: SocketAddr,
    state: Arc<Mutex<CoordState>>,
    shutdown: Arc<AtomicBool>,
    threads: Vec<thread::JoinHandle<()>>,
}

impl CoordinatorHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ledger_len(&self) -> usize {
        self.state.lock().unwrap().coord.ledger_len()
    }

    pub fn globally_deleted_len(&self) -> usize {
        self.state.lock().unwrap().coord.globally_deleted_len()
    }

    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for CoordinatorHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }
}

/// Binds and starts the scan/GC cadence. The coordinator needs to see the
/// same storage as the nodes: either directly (`backend` in the config or
/// an override) or through a node's passthrough (`storage_via`).
pub fn spawn_coordinator(
    cfg: CoordinatorConfig,
    backend_override: Option<Arc<dyn Backend>>,
) -> Result<CoordinatorHandle> {
    let backend: Arc<dyn Backend> = match backend_override {
        Some(b) => b,
        None => match (&cfg.backend, &cfg.storage_via) {
            (Some(bc), None) => bc.build(false)?,
            (None, Some(addr)) => Arc::new(RemoteBackend::new(addr.clone())),
            _ => return Err(AftError::Config("no storage access configured".into())),
        },
    };

    let listener = TcpListener::bind(&cfg.listen)
        .map_err(|e| AftError::Protocol(format!("bind {}: {e}", cfg.listen)))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| AftError::Protocol(format!("listener: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| AftError::Protocol(format!("listener: {e}")))?;

    let state = Arc::new(Mutex::new(CoordState {
        coord: Coordinator::new(),
        unnotified: BTreeMap::new(),
        gc_exclude: BTreeSet::new(),
    }));
    let shutdown = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();

    // Deletion worker: storage deletes happen off the tick thread. A
    // failed chunk is retried a few times; a chunk dropped after that
    // leaks storage but never correctness (the records are already
    // globally forgotten), so it is only logged.
    let (delete_tx, delete_rx) = mpsc::channel::<Vec<StorageKey>>();
    {
        let backend = backend.clone();
        let shutdown = shutdown.clone();
        let chunk_size = cfg.deletion_chunk.max(1);
        threads.push(thread::spawn(move || {
            deletion_worker(&delete_rx, &*backend, chunk_size, &shutdown)
        }));
    }

    {
        let state = state.clone();
        let shutdown = shutdown.clone();
        threads.push(thread::spawn(move || {
            coord_accept_loop(listener, state, shutdown)
        }));
    }

    // Fault scan + orphan sweep cadence.
    {
        let state = state.clone();
        let backend = backend.clone();
        let shutdown = shutdown.clone();
        let nodes = cfg.nodes.clone();
        let orphan_age_ms = cfg.orphan_age_ms();
        let period = Duration::from_millis(cfg.intervals.fault_scan_ms);
        threads.push(thread::spawn(move || {
            ticker(&shutdown, period, || {
                fault_tick(&state, &*backend, &nodes, orphan_age_ms)
            })
        }));
    }

    // GC round cadence.
    {
        let state = state.clone();
        let shutdown = shutdown.clone();
        let nodes = cfg.nodes.clone();
        let max_candidates = cfg.max_candidates_per_round;
        let period = Duration::from_millis(cfg.intervals.gc_ms);
        threads.push(thread::spawn(move || {
            ticker(&shutdown, period, || {
                gc_tick(&state, &nodes, max_candidates, &delete_tx)
            })
        }));
    }

    log::info!("coordinator listening on {addr}");
    Ok(CoordinatorHandle {
        addr,
        state,
        shutdown,
        threads,
    })
}

fn ticker(shutdown: &AtomicBool, period: Duration, mut tick: impl FnMut()) {
    let mut last = Instant::now();
    while !shutdown.load(Ordering::SeqCst) {
        thread::sleep(POLL);
        if last.elapsed() >= period {
            tick();
            last = Instant::now();
        }
    }
}

fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One scan pass: pick up commit records the ledger has never seen,
/// queue them for delivery, and age out provisional spill keys whose
/// transactions can no longer exist.
fn fault_tick(
    state: &Mutex<CoordState>,
    backend: &dyn Backend,
    nodes: &[String],
    orphan_age_ms: u64,
) {
    let to_notify: Vec<CommitRecord> = {
        let mut st = state.lock().unwrap();
        match st.coord.fault_scan(backend) {
            Ok(recovered) => {
                for rec in recovered {
                    st.unnotified.insert(rec.tid, rec);
                }
            }
            Err(e) => {
                log::warn!("fault scan failed: {e}");
                return;
            }
        }
        // Undelivered records stay out of GC's reach, tick after tick.
        let tids: Vec<TransactionId> = st.unnotified.keys().copied().collect();
        st.gc_exclude.extend(tids);
        st.unnotified.values().cloned().collect()
    };

    if !to_notify.is_empty() {
        log::info!("re-announcing {} recovered transactions", to_notify.len());
        let msg = json!({
            "type": "fault_notify",
            "records": serde_json::to_value(&to_notify).expect("records serialize"),
        });
        let all_delivered = nodes.iter().all(|node| match send(node, msg.clone()) {
            Ok(_) => true,
            Err(e) => {
                log::debug!("fault notify to {node} failed: {e}");
                false
            }
        });
        if all_delivered {
            state.lock().unwrap().unnotified.clear();
        }
    }

    let mut st = state.lock().unwrap();
    match st.coord.orphan_sweep(backend, wall_ms(), orphan_age_ms) {
        Ok(swept) if !swept.is_empty() => {
            log::info!("swept {} orphaned provisional keys", swept.len())
        }
        Ok(_) => {}
        Err(e) => log::warn!("orphan sweep failed: {e}"),
    }
}

/// One GC round, synchronous within the tick: propose, collect acks from
/// every node, delete what all of them confirmed. Nodes are keyed by the
/// address we contacted, not their self-reported id — membership is the
/// coordinator's configuration, not the nodes' claim.
fn gc_tick(
    state: &Mutex<CoordState>,
    nodes: &[String],
    max_candidates: usize,
    delete_tx: &mpsc::Sender<Vec<StorageKey>>,
) {
    let set = {
        let mut st = state.lock().unwrap();
        let exclude = std::mem::take(&mut st.gc_exclude);
        st.coord.propose_round(&exclude, max_candidates)
    };
    let Some(set) = set else { return };

    let msg = {
        let mut v = serde_json::to_value(&set).expect("candidate set serializes");
        v["type"] = json!("gc_candidates");
        v
    };
    for node in nodes {
        match send(node, msg.clone()) {
            Ok(resp) => match serde_json::from_value::<GcAck>(resp) {
                Ok(mut ack) => {
                    ack.node = node.clone();
                    state.lock().unwrap().coord.record_ack(ack);
                }
                Err(e) => log::warn!("bad gc ack from {node}: {e}"),
            },
            Err(e) => log::debug!("gc candidates to {node} failed: {e}"),
        }
    }

    let deletable = state.lock().unwrap().coord.complete_round(nodes);
    if !deletable.is_empty() {
        log::info!("round {}: deleting {} transactions", set.round, deletable.len());
        let _ = delete_tx.send(deletion_keys(&deletable));
    }
}

fn deletion_worker(
    rx: &mpsc::Receiver<Vec<StorageKey>>,
    backend: &dyn Backend,
    chunk_size: usize,
    shutdown: &AtomicBool,
) {
    while !shutdown.load(Ordering::SeqCst) {
        let keys = match rx.recv_timeout(POLL) {
            Ok(keys) => keys,
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => return,
        };
        for chunk in keys.chunks(chunk_size) {
            let mut attempts = 0;
            loop {
                match backend.delete_batch(chunk) {
                    Ok(()) => break,
                    Err(e) if attempts < 10 && !shutdown.load(Ordering::SeqCst) => {
                        attempts += 1;
                        log::debug!("gc delete retry {attempts}: {e}");
                        thread::sleep(Duration::from_millis(100));
                    }
                    Err(e) => {
                        log::warn!("gc delete abandoned ({} keys): {e}", chunk.len());
                        break;
                    }
                }
            }
        }
    }
}

fn send(addr: &str, msg: Value) -> Result<Value> {
    Conn::connect(addr)?.request(msg)
}

/// The coordinator's listener only ingests commit batches (the unpruned
/// copies every node sends it) and answers stats probes.
fn coord_accept_loop(
    listener: TcpListener,
    state: Arc<Mutex<CoordState>>,
    shutdown: Arc<AtomicBool>,
) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let state = state.clone();
                thread::spawn(move || coord_serve_conn(stream, &state));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn coord_serve_conn(stream: TcpStream, state: &Mutex<CoordState>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_nonblocking(false);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        let body = match wire::read_frame_bytes(&mut reader) {
            Ok(Some(body)) => body,
            _ => return,
        };
        let response = match serde_json::from_slice::<Value>(&body) {
            Ok(req) => coord_handle(state, &req),
            Err(e) => wire::error_response(
                Value::Null,
                &AftError::Protocol(format!("bad frame: {e}")),
            ),
        };
        if wire::write_frame(&mut writer, &response).is_err() {
            return;
        }
    }
}

fn coord_handle(state: &Mutex<CoordState>, req: &Value) -> Value {
    let req_id = req.get("req_id").cloned().unwrap_or(Value::Null);
    match req.get("type").and_then(Value::as_str) {
        Some("commit_batch") => match serde_json::from_value::<CommitBatch>(req.clone()) {
            Ok(batch) => {
                state.lock().unwrap().coord.ingest(&batch);
                json!({ "req_id": req_id, "ok": true })
            }
            Err(e) => wire::error_response(
                req_id,
                &AftError::Protocol(format!("bad commit_batch: {e}")),
            ),
        },
        Some("stats") => {
            let st = state.lock().unwrap();
            json!({
                "req_id": req_id,
                "ledger_len": st.coord.ledger_len(),
                "globally_deleted": st.coord.globally_deleted_len(),
                "round_in_flight": st.coord.round_in_flight(),
            })
        }
        Some(other) => wire::error_response(
            req_id,
            &AftError::Protocol(format!("unknown request type {other}")),
        ),
        None => wire::error_response(req_id, &AftError::Protocol("missing type".into())),
    }
}
