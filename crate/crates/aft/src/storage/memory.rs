//! In-memory backend: a sorted map behind a mutex, plus the fault hooks the
//! crash-matrix tests drive.
//!
//! Faults are deterministic: arm a countdown with [`MemoryBackend::fail_after`]
//! and the Nth subsequent operation fails. Batches can additionally be made
//! non-atomic ([`BatchApply::EntryByEntry`]), so a fault landing mid-batch
//! leaves a partial prefix behind — the backend behavior the commit protocol
//! has to survive on real cloud stores.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;

use super::{Backend, LatencySpec, StorageError, StorageKey};

/// How `put_batch` applies its entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BatchApply {
    /// All entries land or none do (multi-key atomicity).
    #[default]
    Atomic,
    /// Entries land one at a time; each consumes one fault-countdown tick,
    /// so an armed fault can strand a prefix of the batch.
    EntryByEntry,
}

#[derive(Default)]
struct Inner {
    map: BTreeMap<String, Vec<u8>>,
    /// Operations remaining until the next one fails; `None` = healthy.
    ops_until_fault: Option<u64>,
    batch_apply: BatchApply,
}

impl Inner {
    /// Ticks the fault countdown; returns an error when it fires. The fault
    /// is one-shot: after firing, the backend is healthy again until rearmed.
    fn tick(&mut self, op: &'static str) -> Result<(), StorageError> {
        if let Some(n) = self.ops_until_fault {
            if n <= 1 {
                self.ops_until_fault = None;
                return Err(StorageError::Injected(op));
            }
            self.ops_until_fault = Some(n - 1);
        }
        Ok(())
    }
}

pub struct MemoryBackend {
    inner: Mutex<Inner>,
    latency: Option<LatencySpec>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        MemoryBackend { inner: Mutex::new(Inner::default()), latency: None }
    }

    /// Adds a uniform per-operation delay. Benchmark plumbing only.
    pub fn with_latency(mut self, spec: LatencySpec) -> Self {
        self.latency = Some(spec);
        self
    }

    /// Arms a one-shot fault: the `n`th operation from now (1-based) fails.
    pub fn fail_after(&self, n: u64) {
        assert!(n >= 1, "fault countdown is 1-based");
        self.inner.lock().unwrap().ops_until_fault = Some(n);
    }

    /// Disarms any pending fault.
    pub fn heal(&self) {
        self.inner.lock().unwrap().ops_until_fault = None;
    }

    pub fn set_batch_apply(&self, mode: BatchApply) {
        self.inner.lock().unwrap().batch_apply = mode;
    }

    /// Number of live keys; test convenience.
    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn maybe_sleep(&self) {
        if let Some(lat) = self.latency {
            let ms = if lat.max_ms > lat.min_ms {
                rand::thread_rng().gen_range(lat.min_ms..=lat.max_ms)
            } else {
                lat.min_ms
            };
            if ms > 0 {
                std::thread::sleep(Duration::from_millis(ms));
            }
        }
    }
}

impl Default for MemoryBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for MemoryBackend {
    fn get(&self, sk: &StorageKey) -> Result<Option<Vec<u8>>, StorageError> {
        self.maybe_sleep();
        let mut inner = self.inner.lock().unwrap();
        inner.tick("get")?;
        Ok(inner.map.get(sk.as_str()).cloned())
    }

    fn put_batch(&self, entries: &[(StorageKey, Vec<u8>)]) -> Result<(), StorageError> {
        if entries.is_empty() {
            return Err(StorageError::EmptyBatch);
        }
        self.maybe_sleep();
        let mut inner = self.inner.lock().unwrap();
        match inner.batch_apply {
            BatchApply::Atomic => {
                inner.tick("put_batch")?;
                for (k, v) in entries {
                    inner.map.insert(k.0.clone(), v.clone());
                }
            }
            BatchApply::EntryByEntry => {
                for (k, v) in entries {
                    inner.tick("put_batch")?;
                    inner.map.insert(k.0.clone(), v.clone());
                }
            }
        }
        Ok(())
    }

    fn list_prefix(
        &self,
        prefix: &str,
        limit: Option<usize>,
        reverse: bool,
    ) -> Result<Vec<StorageKey>, StorageError> {
        self.maybe_sleep();
        let mut inner = self.inner.lock().unwrap();
        inner.tick("list_prefix")?;
        let range = inner
            .map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| StorageKey(k.clone()));
        let keys: Vec<StorageKey> = if reverse {
            let mut all: Vec<_> = range.collect();
            all.reverse();
            match limit {
                Some(n) => all.into_iter().take(n).collect(),
                None => all,
            }
        } else {
            match limit {
                Some(n) => range.take(n).collect(),
                None => range.collect(),
            }
        };
        Ok(keys)
    }

    fn delete_batch(&self, sks: &[StorageKey]) -> Result<(), StorageError> {
        self.maybe_sleep();
        let mut inner = self.inner.lock().unwrap();
        inner.tick("delete_batch")?;
        for sk in sks {
            inner.map.remove(sk.as_str());
        }
        Ok(())
    }
}
