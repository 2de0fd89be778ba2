//! What happens when a transaction writes more than fits in memory: the
//! buffer spills to provisional storage keys, commit copies them to their
//! final versioned locations, and abandoned spills get swept as orphans.

use std::sync::Arc;

use aft::gc::Coordinator;
use aft::model::{decode_data_key, Clock, PROVISIONAL_TS};
use aft::storage::{Backend, MemoryBackend};
use aft::txn::{TxnManager, TxnOptions};

fn provisional_and_final(backend: &dyn Backend) -> (usize, usize) {
    let mut provisional = 0;
    let mut committed = 0;
    for sk in backend.list_prefix("data/", None, false).unwrap() {
        match decode_data_key(&sk) {
            Ok((_, tid)) if tid.ts == PROVISIONAL_TS => provisional += 1,
            Ok(_) => committed += 1,
            Err(_) => {}
        }
    }
    (provisional, committed)
}

fn main() -> aft::Result<()> {
    let backend = Arc::new(MemoryBackend::new());
    // A 64-byte spill threshold so this example does not allocate 4 MiB.
    let mgr = TxnManager::new(
        backend.clone(),
        Clock::logical(),
        TxnOptions { spill_threshold: 64, ..TxnOptions::default() },
    );

    let txn = mgr.start();
    mgr.put(txn.uuid, "small", b"fits".to_vec())?;
    let (p, c) = provisional_and_final(backend.as_ref());
    println!("after small write: {p} provisional, {c} committed keys in storage");

    // This write pushes the buffer over the threshold; everything
    // buffered so far moves to storage under provisional ids (timestamp
    // 0, which no committed version can carry).
    mgr.put(txn.uuid, "large", vec![b'x'; 100])?;
    let (p, c) = provisional_and_final(backend.as_ref());
    println!("after spill:       {p} provisional, {c} committed keys");
    assert!(p >= 2);

    // Spilled writes are still private — and still readable by their own
    // transaction.
    let own = mgr.get(txn.uuid, "large")?;
    println!(
        "own read of spilled key: {} bytes (from own write: {})",
        own.value.as_ref().unwrap().len(),
        own.from_own_write,
    );

    // Commit copies spilled bytes to final versioned keys, then the
    // provisional ones are deleted in the background sweep.
    let tid = mgr.commit(txn.uuid)?;
    for chunk in mgr.drain_doomed().chunks(64) {
        backend.delete_batch(chunk)?;
    }
    let (p, c) = provisional_and_final(backend.as_ref());
    println!("after commit {tid}: {p} provisional, {c} committed keys");
    assert_eq!((p, c), (0, 2));

    // A transaction that spills and then dies leaves orphans no node will
    // clean (the node that owned the session is gone). The coordinator's
    // orphan sweep ages them out.
    let doomed = mgr.start();
    mgr.put(doomed.uuid, "stranded", vec![b'y'; 100])?;
    // The client vanishes here; no abort ever arrives for `doomed`.
    let (p, _) = provisional_and_final(backend.as_ref());
    println!("after a crashed writer: {p} provisional keys stranded");

    let mut coordinator = Coordinator::new();
    let age_ms = 10_000;
    coordinator.orphan_sweep(backend.as_ref(), 1_000, age_ms)?; // first sighting
    let swept = coordinator.orphan_sweep(backend.as_ref(), 1_000 + age_ms + 1, age_ms)?;
    println!("orphan sweep reclaimed {} keys once they aged out", swept.len());
    let (p, c) = provisional_and_final(backend.as_ref());
    assert_eq!((p, c), (0, 2));
    println!("storage is clean: {p} provisional, {c} committed");
    Ok(())
}
