//! The TCP surface: framing, the client calls, pipelining, peer
//! replication, and an actual `aft-node` process surviving SIGKILL.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use aft::server::{spawn_node, ClockMode, Conn, Intervals, NodeConfig};
use aft::storage::MemoryBackend;
use aft::{wire, Backend, BackendConfig, TransactionId, TxnUuid};

fn local_node_config(node_id: &str, listen: String, peers: Vec<String>, multicast_ms: u64) -> NodeConfig {
    NodeConfig {
        node_id: node_id.into(),
        listen,
        peers,
        coordinator: None,
        backend: BackendConfig::in_memory(),
        intervals: Intervals {
            multicast_ms,
            gc_ms: 60_000,
            fault_scan_ms: 60_000,
            txn_timeout_ms: 60_000,
        },
        cache_bytes: 64 << 20,
        spill_threshold_bytes: 4 << 20,
        bootstrap_limit: 10_000,
        clock: ClockMode::default(),
        prune_broadcast: true,
    }
}

/// Reserves distinct loopback ports. Both listeners stay open until both
/// ports are known, so the two can't collapse to one.
fn two_free_ports() -> (u16, u16) {
    let a = TcpListener::bind("127.0.0.1:0").expect("bind");
    let b = TcpListener::bind("127.0.0.1:0").expect("bind");
    (
        a.local_addr().expect("addr").port(),
        b.local_addr().expect("addr").port(),
    )
}

#[test]
fn client_calls_roundtrip_over_tcp() {
    let node = spawn_node(
        local_node_config("a", "127.0.0.1:0".into(), vec![], 60_000),
        None,
    )
    .expect("node");
    let mut conn = Conn::connect(&node.addr().to_string()).expect("connect");

    let uuid = conn.start().expect("start");
    conn.put(uuid, "greeting", b"hello").expect("put");
    let own = conn.get(uuid, "greeting").expect("own-write read");
    assert!(own.from_own_write);
    assert_eq!(own.value.as_deref(), Some(b"hello" as &[u8]));
    let tid = conn.commit(uuid).expect("commit");
    assert_eq!(tid.uuid, uuid);

    // A different session observes the committed version, with metadata.
    let probe = conn.start().expect("probe");
    let read = conn.get(probe, "greeting").expect("read");
    assert_eq!(read.value.as_deref(), Some(b"hello" as &[u8]));
    assert_eq!(read.observed.as_ref().map(|(t, _)| *t), Some(tid));
    conn.abort(probe).expect("abort");

    // An aborted buffer leaves no trace.
    let loser = conn.start().expect("loser");
    conn.put(loser, "greeting", b"discarded").expect("put");
    conn.abort(loser).expect("abort");
    let probe = conn.start().expect("probe");
    let read = conn.get(probe, "greeting").expect("read");
    assert_eq!(read.value.as_deref(), Some(b"hello" as &[u8]));
    conn.abort(probe).expect("abort");

    // Retrying a committed uuid is answerable from storage.
    assert_eq!(conn.check_commit(uuid).expect("check_commit"), Some(tid));

    let stats = conn.stats().expect("stats");
    assert_eq!(stats.node_id, "a");
    assert!(stats.live_records >= 1);

    node.shutdown();
}

#[test]
fn malformed_frames_error_without_killing_the_connection() {
    let node = spawn_node(
        local_node_config("a", "127.0.0.1:0".into(), vec![], 60_000),
        None,
    )
    .expect("node");

    let mut stream = TcpStream::connect(node.addr()).expect("connect");
    stream
        .set_read_timeout(Some(Duration::from_secs(10)))
        .expect("timeout");
    let mut reader = std::io::BufReader::new(stream.try_clone().expect("clone"));

    // Well-delimited frame, but not JSON: the server answers with a
    // protocol error and keeps reading.
    let garbage = b"this is not json";
    stream
        .write_all(&(garbage.len() as u32).to_be_bytes())
        .expect("len");
    stream.write_all(garbage).expect("body");
    let resp = wire::read_frame(&mut reader).expect("io").expect("resp");
    assert!(resp.get("error").is_some(), "wanted an error, got {resp}");

    // The same connection still serves real requests.
    wire::write_frame(&mut stream, &json!({ "type": "stats", "req_id": 7 })).expect("send");
    let resp = wire::read_frame(&mut reader).expect("io").expect("resp");
    assert_eq!(resp.get("req_id"), Some(&json!(7)));
    assert_eq!(resp.get("node_id").and_then(Value::as_str), Some("a"));

    // An absurd length prefix cannot be resynchronized: the server drops
    // this connection...
    stream.write_all(&u32::MAX.to_be_bytes()).expect("bad len");
    stream.write_all(b"xx").expect("tail");
    match wire::read_frame(&mut reader) {
        Ok(None) | Err(_) => {}
        Ok(Some(resp)) => panic!("connection should be gone, got {resp}"),
    }

    // ...without harming anyone else's.
    let mut conn = Conn::connect(&node.addr().to_string()).expect("reconnect");
    conn.stats().expect("stats after a hostile peer");

    node.shutdown();
}

#[test]
fn pipelined_requests_answer_in_order() {
    let node = spawn_node(
        local_node_config("a", "127.0.0.1:0".into(), vec![], 60_000),
        None,
    )
    .expect("node");

    let mut stream = TcpStream::connect(node.addr()).expect("connect");
    stream
        .set_read_timeout(Some(Duration::from_secs(10)))
        .expect("timeout");
    let mut reader = std::io::BufReader::new(stream.try_clone().expect("clone"));

    // All requests in one write, answers expected strictly in order.
    let mut batch = Vec::new();
    for i in 0..32u64 {
        let body = serde_json::to_vec(&json!({ "type": "stats", "req_id": i })).expect("body");
        batch.extend_from_slice(&(body.len() as u32).to_be_bytes());
        batch.extend_from_slice(&body);
    }
    stream.write_all(&batch).expect("pipeline");

    for i in 0..32u64 {
        let resp = wire::read_frame(&mut reader).expect("io").expect("resp");
        assert_eq!(resp.get("req_id"), Some(&json!(i)), "answer out of order");
    }

    node.shutdown();
}

#[test]
fn commits_replicate_between_two_nodes() {
    let shared: Arc<dyn Backend> = Arc::new(MemoryBackend::new());
    let (port_a, port_b) = two_free_ports();
    let addr_a = format!("127.0.0.1:{port_a}");
    let addr_b = format!("127.0.0.1:{port_b}");

    let node_a = spawn_node(
        local_node_config("a", addr_a.clone(), vec![addr_b.clone()], 50),
        Some(shared.clone()),
    )
    .expect("node a");
    let node_b = spawn_node(
        local_node_config("b", addr_b.clone(), vec![addr_a.clone()], 50),
        Some(shared),
    )
    .expect("node b");

    let mut ca = Conn::connect(&addr_a).expect("conn a");
    let uuid = ca.start().expect("start");
    ca.put(uuid, "replicated", b"from a").expect("put");
    ca.put(uuid, "sibling", b"also from a").expect("put");
    let tid = ca.commit(uuid).expect("commit");

    // Node b learns of the commit by multicast, not by being asked.
    let mut cb = Conn::connect(&addr_b).expect("conn b");
    let deadline = Instant::now() + Duration::from_secs(5);
    let (observed, cowritten, value) = loop {
        let probe = cb.start().expect("probe");
        let read = cb.get(probe, "replicated").expect("read");
        cb.abort(probe).expect("abort");
        if let Some((t, cow)) = read.observed {
            break (t, cow, read.value);
        }
        assert!(
            Instant::now() < deadline,
            "commit never became visible on node b"
        );
        thread::sleep(Duration::from_millis(25));
    };
    assert_eq!(observed, tid);
    assert!(cowritten.contains("sibling"));
    assert_eq!(value.as_deref(), Some(b"from a" as &[u8]));

    node_a.shutdown();
    node_b.shutdown();
}

// ---------------------------------------------------------------------------
// A real process, killed for real.
// ---------------------------------------------------------------------------

fn spawn_node_process(config: &std::path::Path) -> Child {
    Command::new(env!("CARGO_BIN_EXE_aft-node"))
        .arg("--config")
        .arg(config)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn aft-node")
}

/// The listener binds only after bootstrap, so a successful stats call
/// means the node is serving with its index warm.
fn await_ready(addr: &str, timeout: Duration) -> Conn {
    let deadline = Instant::now() + timeout;
    loop {
        if let Ok(mut conn) = Conn::connect(addr) {
            if conn.stats().is_ok() {
                return conn;
            }
        }
        assert!(
            Instant::now() < deadline,
            "node at {addr} not ready within {timeout:?}"
        );
        thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn sigkilled_node_process_restarts_with_all_committed_data() {
    let dir = tempfile::tempdir().expect("tempdir");
    let store = dir.path().join("store");
    let (port, _) = two_free_ports();
    let addr = format!("127.0.0.1:{port}");
    let config_path = dir.path().join("node.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"node_id = "solo"
listen = "{addr}"

[backend]
kind = "durable-file"
root_path = "{store}"

[intervals]
multicast_ms = 500
gc_ms = 60000
fault_scan_ms = 60000
txn_timeout_ms = 60000
"#,
            store = store.display()
        ),
    )
    .expect("write config");

    let mut child = spawn_node_process(&config_path);
    let mut conn = await_ready(&addr, Duration::from_secs(15));

    let mut committed: Vec<(String, Vec<u8>, TxnUuid, TransactionId)> = Vec::new();
    for i in 0..20 {
        let key = format!("stable{i:02}");
        let value = format!("survives #{i}").into_bytes();
        let uuid = conn.start().expect("start");
        conn.put(uuid, &key, &value).expect("put");
        let tid = conn.commit(uuid).expect("commit");
        committed.push((key, value, uuid, tid));
    }

    drop(conn);
    child.kill().expect("SIGKILL"); // no shutdown path runs
    child.wait().expect("reap");

    let mut child = spawn_node_process(&config_path);
    let mut conn = await_ready(&addr, Duration::from_secs(15));

    for (key, value, uuid, tid) in &committed {
        let probe = conn.start().expect("probe");
        let read = conn.get(probe, key).expect("read");
        conn.abort(probe).expect("abort");
        assert_eq!(
            read.observed.as_ref().map(|(t, _)| *t),
            Some(*tid),
            "{key} lost its version across the restart"
        );
        assert_eq!(read.value.as_deref(), Some(value.as_slice()), "{key}");
        assert_eq!(conn.check_commit(*uuid).expect("check_commit"), Some(*tid));
    }

    drop(conn);
    child.kill().expect("final kill");
    child.wait().expect("reap");
}
