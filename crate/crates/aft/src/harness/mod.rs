//! Test and benchmark apparatus: workload generation, anomaly counting,
//! the brute-force read oracle, in-process clusters, and crash injection.
//!
//! Nothing in here is needed to run a node; it exists so the correctness
//! claims the shim makes (no fractured reads, exactly-once commits, safe
//! GC) are checked by machinery that is independent of the implementation
//! under test.

pub mod bypass;
pub mod cluster;
pub mod crash;
pub mod oplog;
pub mod oracle;
pub mod report;
pub mod workload;
