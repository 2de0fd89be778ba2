//! The two-level garbage collector at work: nodes drop superseded
//! metadata on their own, but storage bytes fall only to the global
//! coordinator, and only after every node has agreed to stop serving the
//! version. Readers never see a deleted version or a gap.

use aft::harness::cluster::{ClusterOptions, LocalCluster};
use aft::model::data_prefix;

fn storage_versions(cluster: &LocalCluster) -> usize {
    cluster.backend().list_prefix(data_prefix(), None, false).unwrap().len()
}

fn main() -> aft::Result<()> {
    let cluster = LocalCluster::build(ClusterOptions::default())?;

    // One hot key, overwritten forty times across the cluster.
    for round in 0..40 {
        let node = round % cluster.node_count();
        let mgr = cluster.mgr(node).unwrap();
        let txn = mgr.start();
        mgr.put(txn.uuid, "counter", format!("{round}").into_bytes())?;
        mgr.commit(txn.uuid)?;
        cluster.tick_multicast();
    }
    println!(
        "before gc: {} data versions in storage, coordinator ledger {}",
        storage_versions(&cluster),
        cluster.coordinator_ledger_len(),
    );

    // Each GC round proposes superseded versions, collects an ack from
    // every node, and only then deletes. Run rounds until quiescent.
    let mut reclaimed = 0;
    let mut rounds = 0;
    loop {
        let deleted = cluster.tick_gc()?;
        if deleted.is_empty() && rounds > 1 {
            break;
        }
        reclaimed += deleted.len();
        rounds += 1;
    }
    println!(
        "after {rounds} gc rounds: reclaimed {reclaimed} versions, \
         {} data versions left, ledger {}",
        storage_versions(&cluster),
        cluster.coordinator_ledger_len(),
    );
    assert_eq!(storage_versions(&cluster), 1, "only the live version survives");

    // Every node still answers — with the newest value, not a hole.
    for i in cluster.live_indices() {
        let mgr = cluster.mgr(i).unwrap();
        let probe = mgr.start();
        let read = mgr.get(probe.uuid, "counter")?;
        mgr.abort(probe.uuid)?;
        println!(
            "{} answers counter = {:?} at {}",
            cluster.node_id(i),
            String::from_utf8_lossy(read.value.as_deref().unwrap()),
            read.observed.unwrap().0,
        );
    }

    // A version being read is safe: a transaction that observed an old
    // version pins it until the transaction finishes.
    let mgr = cluster.mgr(0).unwrap();
    let pinner = mgr.start();
    let pinned = mgr.get(pinner.uuid, "counter")?.observed.unwrap().0;
    let txn = mgr.start();
    mgr.put(txn.uuid, "counter", b"41".to_vec())?;
    mgr.commit(txn.uuid)?;
    cluster.tick_multicast();
    cluster.tick_gc()?;
    let still_there = mgr.get(pinner.uuid, "counter")?;
    println!(
        "mid-transaction reader still pinned to {} after another gc round: {}",
        pinned,
        still_there.observed.unwrap().0 == pinned,
    );
    mgr.abort(pinner.uuid)?;
    Ok(())
}
