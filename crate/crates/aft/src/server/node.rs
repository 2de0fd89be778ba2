//! The node runtime: a transaction manager behind a TCP listener, plus
//! the background threads that broadcast commits and run local upkeep.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::error::{AftError, Result};
use crate::gc::{handle_gc_candidates, local_gc_sweep, GcCandidateSet};
use crate::model::CommitRecord;
use crate::replication::{Broadcaster, CommitBatch};
use crate::server::client::Conn;
use crate::server::config::NodeConfig;
use crate::storage::{Backend, StorageKey};
use crate::txn::TxnManager;
use crate::wire;

/// How often blocked loops re-check the shutdown flag.
const POLL: Duration = Duration::from_millis(5);

/// A running node. Dropping the handle signals every background thread to
/// stop; [`NodeHandle::shutdown`] additionally waits for them.
pub struct NodeHandle {
    addr: SocketAddr,
    node_id: String,
    mgr: Arc<TxnManager>,
    shutdown: Arc<AtomicBool>,
    threads: Vec<thread::JoinHandle<()>>,
}

impl NodeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    /// The manager behind the listener, for in-process assertions.
    pub fn mgr(&self) -> &Arc<TxnManager> {
        &self.mgr
    }

    /// Orderly stop: background threads finish their current pass and are
    /// joined. Open connections are not waited on — handlers exit when
    /// their client hangs up or sends the next request.
    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Crash. No teardown runs: sessions, the commit index, and any
    /// unsent broadcast queue die with the node, exactly as if the
    /// process had been killed. Only what reached storage survives.
    /// In-flight requests are dropped without a response.
    pub fn kill(self) {
        // Drop does the work; the named method exists so call sites read
        // as what they mean.
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }
}

/// Binds, bootstraps, and starts serving. `backend_override` lets a test
/// or harness hand several nodes one shared store, the way real
/// deployments share a cloud service; when `None` the backend comes from
/// the config. Returns once the listener is live.
pub fn spawn_node(
    cfg: NodeConfig,
    backend_override: Option<Arc<dyn Backend>>,
) -> Result<NodeHandle> {
    let backend = match backend_override {
        Some(b) => b,
        None => cfg.backend.build(false)?,
    };
    let mgr = Arc::new(TxnManager::new(
        backend,
        cfg.clock.build(),
        cfg.txn_options(),
    ));
    let indexed = mgr.bootstrap()?;
    log::info!("node {}: bootstrap indexed {indexed} commit records", cfg.node_id);

    let listener = TcpListener::bind(&cfg.listen)
        .map_err(|e| AftError::Protocol(format!("bind {}: {e}", cfg.listen)))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| AftError::Protocol(format!("listener: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| AftError::Protocol(format!("listener: {e}")))?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();

    {
        let mgr = mgr.clone();
        let shutdown = shutdown.clone();
        let node_id = cfg.node_id.clone();
        threads.push(thread::spawn(move || {
            accept_loop(listener, mgr, node_id, shutdown)
        }));
    }

    {
        let mgr = mgr.clone();
        let shutdown = shutdown.clone();
        let broadcaster = Broadcaster::new(cfg.node_id.clone());
        let peers = cfg.peers.clone();
        let coordinator = cfg.coordinator.clone();
        let prune = cfg.prune_broadcast;
        let period = Duration::from_millis(cfg.intervals.multicast_ms);
        threads.push(thread::spawn(move || {
            ticker(&shutdown, period, || {
                multicast_tick(&mgr, &broadcaster, &peers, coordinator.as_deref(), prune)
            })
        }));
    }

    {
        let mgr = mgr.clone();
        let shutdown = shutdown.clone();
        let period = Duration::from_millis(cfg.intervals.gc_ms);
        threads.push(thread::spawn(move || {
            ticker(&shutdown, period, || upkeep_tick(&mgr))
        }));
    }

    log::info!("node {} listening on {addr}", cfg.node_id);
    Ok(NodeHandle {
        addr,
        node_id: cfg.node_id,
        mgr,
        shutdown,
        threads,
    })
}

/// Runs `tick` every `period`, polling the shutdown flag in between so
/// even hour-long periods stop promptly.
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

/// One broadcast pass: drain this tick's fresh commits, prune for peers,
/// keep the full set for the fault manager, send. An empty batch still
/// goes out as a heartbeat. Send failures are dropped, not retried — the
/// fault manager's storage scan is the recovery path for lost batches.
fn multicast_tick(
    mgr: &TxnManager,
    broadcaster: &Broadcaster,
    peers: &[String],
    coordinator: Option<&str>,
    prune: bool,
) {
    let fresh = mgr.drain_outbound();
    if peers.is_empty() && coordinator.is_none() {
        return;
    }
    let pair = {
        let idx = mgr.index().read().unwrap();
        broadcaster.collect(fresh, &idx, prune)
    };
    for peer in peers {
        if let Err(e) = send_batch(peer, &pair.peers) {
            log::debug!("broadcast to {peer} failed: {e}");
        }
    }
    if let Some(coord) = coordinator {
        if let Err(e) = send_batch(coord, &pair.coordinator) {
            log::debug!("broadcast to coordinator {coord} failed: {e}");
        }
    }
}

fn send_batch(addr: &str, batch: &CommitBatch) -> Result<()> {
    let mut msg = serde_json::to_value(batch).expect("batch serializes");
    msg["type"] = json!("commit_batch");
    Conn::connect(addr)?.request(msg).map(|_| ())
}

/// Local upkeep: abort idle sessions, drop superseded metadata, delete
/// provisional keys left by finished transactions.
fn upkeep_tick(mgr: &TxnManager) {
    for uuid in mgr.expire_stale_sessions(None) {
        log::info!("aborted idle transaction {uuid}");
    }
    let swept = local_gc_sweep(mgr);
    if !swept.is_empty() {
        log::debug!("local gc dropped {} superseded records", swept.len());
    }
    let doomed = mgr.drain_doomed();
    for chunk in doomed.chunks(64) {
        if let Err(e) = mgr.backend().delete_batch(chunk) {
            log::warn!("provisional-key deletion failed, requeueing: {e}");
            mgr.doom(chunk.to_vec());
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    mgr: Arc<TxnManager>,
    node_id: String,
    shutdown: Arc<AtomicBool>,
) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let mgr = mgr.clone();
                let node_id = node_id.clone();
                let shutdown = shutdown.clone();
                thread::spawn(move || serve_conn(stream, &mgr, &node_id, &shutdown));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

/// Per-connection loop: one response per request, in order. Pipelined
/// requests queue in the socket buffer and are answered back to back. A
/// frame that is length-delimited but not valid JSON gets a protocol
/// error and the connection stays usable; a broken length prefix cannot
/// be resynchronized, so the connection closes.
fn serve_conn(stream: TcpStream, mgr: &TxnManager, node_id: &str, shutdown: &AtomicBool) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_nonblocking(false);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        let body = match wire::read_frame_bytes(&mut reader) {
            Ok(Some(body)) => body,
            Ok(None) => return,
            Err(_) => return,
        };
        if shutdown.load(Ordering::SeqCst) {
            // Crashed between reading and answering: the request is lost,
            // which is exactly the window clients must retry across.
            return;
        }
        let response = match serde_json::from_slice::<Value>(&body) {
            Ok(req) => handle_request(mgr, node_id, &req),
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

/// Maps one request onto the manager and wraps the outcome in a response
/// frame carrying the caller's `req_id`.
fn handle_request(mgr: &TxnManager, node_id: &str, req: &Value) -> Value {
    let req_id = req.get("req_id").cloned().unwrap_or(Value::Null);
    let outcome = match req.get("type").and_then(Value::as_str) {
        Some(typ) => dispatch(mgr, node_id, typ, req),
        None => Err(AftError::Protocol("missing type".into())),
    };
    match outcome {
        Ok(mut resp) => {
            resp["req_id"] = req_id;
            resp
        }
        Err(e) => wire::error_response(req_id, &e),
    }
}

fn dispatch(mgr: &TxnManager, node_id: &str, typ: &str, req: &Value) -> Result<Value> {
    match typ {
        // ---- the five client calls ----
        "start" => {
            let handle = match req.get("uuid") {
                // A uuid in the request is a retry reclaiming its identity.
                Some(u) => mgr.start_with(wire::uuid_from_json(Some(u))?),
                None => mgr.start(),
            };
            Ok(json!({ "uuid": handle.uuid.to_string() }))
        }
        "get" => {
            let uuid = wire::uuid_from_json(req.get("uuid"))?;
            let read = mgr.get(uuid, str_field(req, "key")?)?;
            let mut resp = json!({
                "value": read.value.as_deref().map(wire::encode_bytes),
                "own_write": read.from_own_write,
            });
            if let Some((tid, cowritten)) = read.observed {
                resp["observed"] =
                    json!({ "ts": tid.ts, "uuid": tid.uuid.to_string(), "cowritten": cowritten });
            }
            Ok(resp)
        }
        "put" => {
            let uuid = wire::uuid_from_json(req.get("uuid"))?;
            let key = str_field(req, "key")?;
            let value = wire::decode_bytes(str_field(req, "value")?)?;
            mgr.put(uuid, key, value)?;
            Ok(json!({ "ok": true }))
        }
        "commit" => {
            let uuid = wire::uuid_from_json(req.get("uuid"))?;
            let tid = mgr.commit(uuid)?;
            Ok(wire::tid_json(&tid))
        }
        "abort" => {
            let uuid = wire::uuid_from_json(req.get("uuid"))?;
            mgr.abort(uuid)?;
            Ok(json!({ "ok": true }))
        }
        // Recovery probe: has this uuid ever committed, per storage?
        "check_commit" => {
            let uuid = wire::uuid_from_json(req.get("uuid"))?;
            let committed = mgr.find_commit_by_uuid(&uuid)?;
            Ok(json!({ "committed": committed.map(|tid| wire::tid_json(&tid)) }))
        }
        // ---- peer and coordinator traffic ----
        "commit_batch" => {
            let batch: CommitBatch = serde_json::from_value(req.clone())
                .map_err(|e| AftError::Protocol(format!("bad commit_batch: {e}")))?;
            Ok(json!({ "merged": mgr.merge_batch(&batch) }))
        }
        "fault_notify" => {
            let records: Vec<CommitRecord> = serde_json::from_value(
                req.get("records").cloned().unwrap_or(Value::Null),
            )
            .map_err(|e| AftError::Protocol(format!("bad fault_notify: {e}")))?;
            let merged = records
                .into_iter()
                .filter(|r| mgr.record_committed(r.clone()))
                .count();
            Ok(json!({ "merged": merged }))
        }
        "gc_candidates" => {
            let set: GcCandidateSet = serde_json::from_value(req.clone())
                .map_err(|e| AftError::Protocol(format!("bad gc_candidates: {e}")))?;
            let ack = handle_gc_candidates(mgr, node_id, &set);
            let mut resp = serde_json::to_value(&ack).expect("ack serializes");
            resp["type"] = json!("gc_ack");
            Ok(resp)
        }
        // ---- observability ----
        "stats" => Ok(json!({
            "node_id": node_id,
            "live_records": mgr.live_records(),
            "sessions": mgr.session_count(),
        })),
        // ---- storage passthrough, for a coordinator without its own
        // ---- access to the shared store ----
        "storage_get" => {
            let sk = StorageKey(str_field(req, "sk")?.to_string());
            let value = mgr.backend().get(&sk)?;
            Ok(json!({ "value": value.as_deref().map(wire::encode_bytes) }))
        }
        "storage_list" => {
            let prefix = str_field(req, "prefix")?;
            let limit = req.get("limit").and_then(Value::as_u64).map(|n| n as usize);
            let reverse = req.get("reverse").and_then(Value::as_bool).unwrap_or(false);
            let keys = mgr.backend().list_prefix(prefix, limit, reverse)?;
            let names: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
            Ok(json!({ "keys": names }))
        }
        "storage_put" => {
            let entries = req
                .get("entries")
                .and_then(Value::as_array)
                .ok_or_else(|| AftError::Protocol("missing entries".into()))?;
            let mut batch = Vec::with_capacity(entries.len());
            for e in entries {
                let sk = e
                    .get(0)
                    .and_then(Value::as_str)
                    .ok_or_else(|| AftError::Protocol("bad entry".into()))?;
                let val = e
                    .get(1)
                    .and_then(Value::as_str)
                    .ok_or_else(|| AftError::Protocol("bad entry".into()))?;
                batch.push((StorageKey(sk.to_string()), wire::decode_bytes(val)?));
            }
            mgr.backend().put_batch(&batch)?;
            Ok(json!({ "ok": true }))
        }
        "storage_delete" => {
            let sks = req
                .get("sks")
                .and_then(Value::as_array)
                .ok_or_else(|| AftError::Protocol("missing sks".into()))?;
            let mut keys = Vec::with_capacity(sks.len());
            for sk in sks {
                let s = sk
                    .as_str()
                    .ok_or_else(|| AftError::Protocol("bad storage key".into()))?;
                keys.push(StorageKey(s.to_string()));
            }
            mgr.backend().delete_batch(&keys)?;
            Ok(json!({ "ok": true }))
        }
        other => Err(AftError::Protocol(format!("unknown request type {other}"))),
    }
}

fn str_field<'a>(req: &'a Value, name: &str) -> Result<&'a str> {
    req.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| AftError::Protocol(format!("missing {name}")))
}
