//! Two real node processes (in-process threads, real TCP) over one shared
//! store: commit on B, wait out a couple of multicast intervals, read the
//! same data on A — then watch supersedence pruning keep the index lean.

use std::sync::Arc;
use std::thread::sleep;
use std::time::Duration;

use aft::server::{spawn_node, ClockMode, Conn, Intervals, NodeConfig};
use aft::storage::{BackendConfig, MemoryBackend};

fn node_config(id: &str, peers: Vec<String>) -> NodeConfig {
    NodeConfig {
        node_id: id.into(),
        listen: "127.0.0.1:0".into(), // pick a free port
        peers,
        coordinator: None,
        // Ignored here: both nodes get the same in-memory store via the
        // spawn override below, the way deployed nodes share a storage
        // service.
        backend: BackendConfig::in_memory(),
        intervals: Intervals { multicast_ms: 50, ..Intervals::default() },
        cache_bytes: 1 << 20,
        spill_threshold_bytes: 1 << 20,
        bootstrap_limit: 10_000,
        clock: ClockMode::System,
        prune_broadcast: true,
    }
}

fn main() -> aft::Result<()> {
    let shared = Arc::new(MemoryBackend::new());
    // A listens first; B broadcasts to A's real (kernel-assigned) port.
    let node_a = spawn_node(node_config("a", vec![]), Some(shared.clone()))?;
    let node_b = spawn_node(
        node_config("b", vec![node_a.addr().to_string()]),
        Some(shared.clone()),
    )?;
    println!("node a on {}, node b on {}", node_a.addr(), node_b.addr());

    // Commit a two-key transaction on B.
    let mut client_b = Conn::connect(&node_b.addr().to_string())?;
    let txn = client_b.start()?;
    client_b.put(txn, "order:42", b"3 widgets")?;
    client_b.put(txn, "invoice:42", b"$17.50")?;
    let tid = client_b.commit(txn)?;
    println!("committed {tid} on node b");

    // Within two multicast intervals the record reaches A.
    sleep(Duration::from_millis(120));
    let mut client_a = Conn::connect(&node_a.addr().to_string())?;
    let probe = client_a.start()?;
    let order = client_a.get(probe, "order:42")?;
    let invoice = client_a.get(probe, "invoice:42")?;
    client_a.abort(probe)?;
    println!(
        "node a serves order:42 = {:?}, invoice:42 = {:?}",
        String::from_utf8_lossy(order.value.as_deref().unwrap()),
        String::from_utf8_lossy(invoice.value.as_deref().unwrap()),
    );
    assert_eq!(order.observed.unwrap().0, tid);

    // Supersede the order three times on B. Peer batches drop versions
    // that are already superseded at send time, so A's index stays small
    // instead of accumulating every historical version.
    for qty in ["4 widgets", "5 widgets", "6 widgets"] {
        let txn = client_b.start()?;
        client_b.put(txn, "order:42", qty.as_bytes())?;
        client_b.commit(txn)?;
    }
    sleep(Duration::from_millis(120));
    let stats_a = client_a.stats()?;
    let stats_b = client_b.stats()?;
    println!(
        "after 3 supersessions: node b indexes {} records, node a {}",
        stats_b.live_records, stats_a.live_records,
    );

    let probe = client_a.start()?;
    let latest = client_a.get(probe, "order:42")?;
    client_a.abort(probe)?;
    println!(
        "node a's answer is the newest: {:?}",
        String::from_utf8_lossy(latest.value.as_deref().unwrap())
    );

    node_a.shutdown();
    node_b.shutdown();
    Ok(())
}
