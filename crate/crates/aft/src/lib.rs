//! A fault-tolerance shim that layers read atomic isolation on top of any
//! durable key-value store.
//!
//! Multi-step requests (for example a chain of serverless functions) are
//! grouped into transactions against a simple key-value API: `start`, `get`,
//! `put`, `commit`, `abort`. The shim guarantees that a transaction never
//! observes another transaction's partial effects (no dirty or fractured
//! reads), plus read-your-writes and repeatable reads, without coordinating
//! between nodes on the critical path.
//!
//! The only assumption made of the storage backend is that acknowledged
//! writes are durable. Every key version is written to a fresh storage key,
//! and a transaction becomes visible only once its commit record is
//! persisted, so crashes at any point leave either all of a transaction's
//! writes visible or none of them.
//!
//! # Crate layout
//!
//! - [`model`] — transaction IDs, commit records, storage-key encoding.
//! - [`storage`] — the pluggable backend trait with in-memory and
//!   durable-file implementations.
//! - [`buffer`] — the per-transaction atomic write buffer with spill-to-storage.
//! - [`txn`] — the transaction manager: commit/abort protocol, the atomic
//!   read algorithm, commit-set cache, data cache, and bootstrap.
//! - [`replication`] — background commit-set multicast with supersedence
//!   pruning.
//! - [`gc`] — local metadata GC, the global garbage collector, and the fault
//!   manager's recovery scan.
//! - [`server`] — TCP node/coordinator runtimes speaking a length-prefixed
//!   JSON wire protocol, plus a client.
//! - [`harness`] — workload generation, anomaly counting, a brute-force read
//!   oracle, and crash-point injection.
//!
//! # Getting started
//!
//! The `examples/` directory is the best entry point; each example is a
//! runnable walkthrough of one capability:
//!
//! ```bash
//! cargo run -p aft --example basic_txn
//! cargo run -p aft --example read_atomicity
//! cargo run -p aft --example write_buffer_spill
//! cargo run -p aft --example crash_recovery
//! cargo run -p aft --example cluster_replication
//! cargo run -p aft --example garbage_collection
//! cargo run -p aft --example anomaly_demo
//! ```
//!
//! Long-running deployments use the `aft-node` and `aft-coordinator`
//! binaries; `aft-bench` drives workloads and reports throughput, latency,
//! and anomaly counts.

pub mod buffer;
pub mod error;
pub mod gc;
pub mod harness;
pub mod model;
pub mod replication;
pub mod server;
pub mod storage;
pub mod txn;
pub mod wire;

pub use error::{AftError, Result};
pub use model::{CommitRecord, PendingTxnHandle, TransactionId, TxnUuid};
pub use storage::{Backend, BackendConfig, StorageError, StorageKey};
pub use txn::TxnManager;
