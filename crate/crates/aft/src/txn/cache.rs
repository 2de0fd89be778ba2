//! Byte-bounded LRU cache of committed version values, saving a backend
//! round trip for hot keys. Only committed bytes ever enter; GC evicts a
//! transaction's entries when its metadata goes away.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use crate::model::TransactionId;

type VersionRef = (String, TransactionId);

struct Inner {
    entries: HashMap<VersionRef, (Vec<u8>, u64)>,
    /// recency tick → entry, oldest first; ticks are unique.
    by_age: BTreeMap<u64, VersionRef>,
    next_tick: u64,
    bytes: usize,
    capacity: usize,
}

pub struct DataCache {
    inner: Mutex<Inner>,
}

impl DataCache {
    pub fn new(capacity_bytes: usize) -> Self {
        DataCache {
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                by_age: BTreeMap::new(),
                next_tick: 0,
                bytes: 0,
                capacity: capacity_bytes,
            }),
        }
    }

    pub fn get(&self, key: &str, tid: &TransactionId) -> Option<Vec<u8>> {
        let mut inner = self.inner.lock().unwrap();
        let vref = (key.to_string(), *tid);
        let tick = inner.next_tick;
        inner.next_tick += 1;
        let (value, old_tick) = inner.entries.get_mut(&vref).map(|(v, t)| {
            let old = *t;
            *t = tick;
            (v.clone(), old)
        })?;
        inner.by_age.remove(&old_tick);
        inner.by_age.insert(tick, vref);
        Some(value)
    }

    /// Caches a committed version's bytes, evicting least-recently-used
    /// entries to stay within capacity. Values larger than the whole cache
    /// are not cached at all.
    pub fn insert(&self, key: &str, tid: TransactionId, value: Vec<u8>) {
        let cost = key.len() + value.len();
        let mut inner = self.inner.lock().unwrap();
        if cost > inner.capacity {
            return;
        }
        let vref = (key.to_string(), tid);
        if let Some((old_value, old_tick)) = inner.entries.remove(&vref) {
            inner.by_age.remove(&old_tick);
            inner.bytes -= vref.0.len() + old_value.len();
        }
        while inner.bytes + cost > inner.capacity {
            let (_, oldest) = inner.by_age.pop_first().expect("bytes > 0 implies entries");
            let (evicted, _) = inner.entries.remove(&oldest).unwrap();
            inner.bytes -= oldest.0.len() + evicted.len();
        }
        let tick = inner.next_tick;
        inner.next_tick += 1;
        inner.bytes += cost;
        inner.by_age.insert(tick, vref.clone());
        inner.entries.insert(vref, (value, tick));
    }

    /// Drops one version's bytes; no-op when absent.
    pub fn evict(&self, key: &str, tid: &TransactionId) {
        let mut inner = self.inner.lock().unwrap();
        let vref = (key.to_string(), *tid);
        if let Some((value, tick)) = inner.entries.remove(&vref) {
            inner.by_age.remove(&tick);
            inner.bytes -= vref.0.len() + value.len();
        }
    }

    pub fn bytes(&self) -> usize {
        self.inner.lock().unwrap().bytes
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TxnUuid;

    fn tid(ts: u64) -> TransactionId {
        TransactionId::new(ts, TxnUuid([ts as u8; 16]))
    }

    #[test]
    fn hit_returns_exact_bytes() {
        let c = DataCache::new(1024);
        c.insert("k", tid(1), b"value".to_vec());
        assert_eq!(c.get("k", &tid(1)), Some(b"value".to_vec()));
        assert_eq!(c.get("k", &tid(2)), None, "versions are distinct entries");
    }

    #[test]
    fn eviction_is_least_recently_used() {
        // Capacity fits two of the three entries (each costs 1 + 10).
        let c = DataCache::new(22);
        c.insert("a", tid(1), vec![0; 10]);
        c.insert("b", tid(2), vec![0; 10]);
        assert_eq!(c.get("a", &tid(1)).map(|v| v.len()), Some(10)); // refresh a
        c.insert("c", tid(3), vec![0; 10]); // must evict b, the coldest
        assert!(c.get("b", &tid(2)).is_none());
        assert!(c.get("a", &tid(1)).is_some());
        assert!(c.get("c", &tid(3)).is_some());
    }

    #[test]
    fn oversized_value_is_skipped() {
        let c = DataCache::new(8);
        c.insert("k", tid(1), vec![0; 64]);
        assert!(c.is_empty());
    }

    #[test]
    fn reinsert_replaces_and_reaccounts() {
        let c = DataCache::new(1024);
        c.insert("k", tid(1), vec![0; 100]);
        c.insert("k", tid(1), vec![0; 4]);
        assert_eq!(c.bytes(), 1 + 4);
        assert_eq!(c.get("k", &tid(1)).map(|v| v.len()), Some(4));
    }

    #[test]
    fn evict_frees_bytes() {
        let c = DataCache::new(1024);
        c.insert("k", tid(1), vec![0; 100]);
        c.evict("k", &tid(1));
        assert_eq!(c.bytes(), 0);
        assert!(c.get("k", &tid(1)).is_none());
        c.evict("k", &tid(1)); // absent is fine
    }
}
