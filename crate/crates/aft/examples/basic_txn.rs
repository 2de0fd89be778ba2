//! The five-call client API against a single node: start, put, get,
//! commit, abort — and what each guarantees.

use std::sync::Arc;

use aft::model::Clock;
use aft::storage::MemoryBackend;
use aft::txn::{TxnManager, TxnOptions};

fn main() -> aft::Result<()> {
    let backend = Arc::new(MemoryBackend::new());
    let mgr = TxnManager::new(backend, Clock::system(), TxnOptions::default());

    // A transaction is a uuid plus a server-side session. Everything the
    // transaction writes stays in a private buffer until commit.
    let txn = mgr.start();
    println!("started transaction {}", txn.uuid);

    mgr.put(txn.uuid, "account:alice", b"100".to_vec())?;
    mgr.put(txn.uuid, "account:bob", b"50".to_vec())?;

    // Reads inside the transaction see its own writes...
    let read = mgr.get(txn.uuid, "account:alice")?;
    println!(
        "own read: {:?} (from own buffer: {})",
        String::from_utf8_lossy(read.value.as_deref().unwrap()),
        read.from_own_write,
    );

    // ...but nobody else sees anything yet.
    let outsider = mgr.start();
    let peek = mgr.get(outsider.uuid, "account:alice")?;
    println!("outsider before commit: {:?}", peek.value);
    mgr.abort(outsider.uuid)?;

    // Commit assigns the timestamp-ordered transaction id and makes both
    // writes visible at once.
    let tid = mgr.commit(txn.uuid)?;
    println!("committed as {tid}");

    let reader = mgr.start();
    for key in ["account:alice", "account:bob"] {
        let read = mgr.get(reader.uuid, key)?;
        let (observed, cowritten) = read.observed.as_ref().unwrap();
        println!(
            "{key} = {} (version {observed}, cowritten with {cowritten:?})",
            String::from_utf8_lossy(read.value.as_deref().unwrap()),
        );
        assert_eq!(*observed, tid);
    }
    mgr.abort(reader.uuid)?;

    // Committing the same uuid again is a no-op that returns the original
    // id — retries after a lost ack cannot double-commit.
    mgr.start_with(txn.uuid);
    let again = mgr.commit(txn.uuid)?;
    println!("commit retry returned the same id: {}", again == tid);

    // An aborted transaction leaves no trace.
    let doomed = mgr.start();
    mgr.put(doomed.uuid, "account:alice", b"drained".to_vec())?;
    mgr.abort(doomed.uuid)?;
    let reader = mgr.start();
    let read = mgr.get(reader.uuid, "account:alice")?;
    println!(
        "after abort, alice is still {:?}",
        String::from_utf8_lossy(read.value.as_deref().unwrap())
    );
    mgr.abort(reader.uuid)?;
    Ok(())
}
