//! Why multi-key reads need protection, and what the shim does about it.
//!
//! A transaction that writes several keys becomes visible atomically; a
//! transaction that reads several keys is pinned to versions that belong
//! together. Once a reader has observed a version of any key, every later
//! read is answered with versions consistent with that observation — even
//! if newer commits land mid-transaction.

use std::sync::Arc;

use aft::model::Clock;
use aft::storage::MemoryBackend;
use aft::txn::{TxnManager, TxnOptions};

fn main() -> aft::Result<()> {
    let backend = Arc::new(MemoryBackend::new());
    let mgr = TxnManager::new(backend, Clock::logical(), TxnOptions::default());

    // Version 1 of a two-key record.
    let setup = mgr.start();
    mgr.put(setup.uuid, "profile", b"v1-profile".to_vec())?;
    mgr.put(setup.uuid, "settings", b"v1-settings".to_vec())?;
    let v1 = mgr.commit(setup.uuid)?;
    println!("v1 committed as {v1}");

    // A reader observes the first key at v1...
    let reader = mgr.start();
    let first = mgr.get(reader.uuid, "profile")?;
    println!(
        "reader sees profile = {}",
        String::from_utf8_lossy(first.value.as_deref().unwrap())
    );

    // ...and then v2 of BOTH keys commits mid-transaction.
    let racer = mgr.start();
    mgr.put(racer.uuid, "profile", b"v2-profile".to_vec())?;
    mgr.put(racer.uuid, "settings", b"v2-settings".to_vec())?;
    let v2 = mgr.commit(racer.uuid)?;
    println!("v2 committed as {v2} while the reader is mid-transaction");

    // The naive answer for the second read would be v2-settings — newest
    // version wins. But v2's writer also rewrote "profile", which this
    // reader already observed at v1: returning v2-settings would hand the
    // reader a state that never existed. The shim notices via the
    // cowritten set and answers with the version that matches the read
    // set.
    let second = mgr.get(reader.uuid, "settings")?;
    let (tid, cowritten) = second.observed.as_ref().unwrap();
    println!(
        "reader sees settings = {} (version {tid}, cowritten {cowritten:?})",
        String::from_utf8_lossy(second.value.as_deref().unwrap())
    );
    assert_eq!(*tid, v1, "the read set stays atomic");

    // Re-reading the first key keeps returning the same version:
    // repeatable reads fall out of the same rule.
    let again = mgr.get(reader.uuid, "profile")?;
    assert_eq!(again.observed.unwrap().0, v1);
    println!("re-read of profile still answers v1 — repeatable");
    mgr.abort(reader.uuid)?;

    // A fresh transaction has no observations to honor and gets v2.
    let fresh = mgr.start();
    let latest = mgr.get(fresh.uuid, "profile")?;
    assert_eq!(latest.observed.unwrap().0, v2);
    println!("a new transaction reads v2, as expected");
    mgr.abort(fresh.uuid)?;

    // One more wrinkle: when no compatible version exists at all, the
    // read fails with `not_readable` instead of breaking atomicity, and
    // the client's move is to abort and retry under a fresh identity.
    // Here the only version of "inbox" was co-written with a "profile"
    // newer than the one this reader is pinned to.
    let reader = mgr.start();
    let _ = mgr.get(reader.uuid, "profile")?; // pins profile at v2
    let racer = mgr.start();
    mgr.put(racer.uuid, "profile", b"v3-profile".to_vec())?;
    mgr.put(racer.uuid, "inbox", b"v3-inbox".to_vec())?;
    mgr.commit(racer.uuid)?;
    match mgr.get(reader.uuid, "inbox") {
        Err(aft::AftError::NotReadable(key)) => {
            println!("inbox read while pinned to v2: not_readable({key}) — abort and retry");
        }
        other => panic!("expected not_readable, got {other:?}"),
    }
    mgr.abort(reader.uuid)?;

    // The retry starts unpinned and reads v3 of both keys.
    let retry = mgr.start();
    let profile = mgr.get(retry.uuid, "profile")?;
    let inbox = mgr.get(retry.uuid, "inbox")?;
    println!(
        "retry sees profile = {}, inbox = {}",
        String::from_utf8_lossy(profile.value.as_deref().unwrap()),
        String::from_utf8_lossy(inbox.value.as_deref().unwrap()),
    );
    mgr.abort(retry.uuid)?;
    Ok(())
}
