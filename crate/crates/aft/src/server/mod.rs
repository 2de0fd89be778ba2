//! Node and coordinator runtimes.
//!
//! [`spawn_node`] turns a [`TxnManager`](crate::txn::TxnManager) into a TCP
//! server speaking the framed-JSON protocol from [`wire`](crate::wire):
//! client calls (start/get/put/commit/abort), peer traffic (commit
//! batches), and coordinator traffic (GC candidate rounds, fault
//! notifications). [`spawn_coordinator`] runs the off-path fault manager
//! and global GC against the same storage. [`client::Conn`] is the typed
//! client for either.
//!
//! Everything here is plain threads and blocking sockets — connections are
//! cheap at the scale this runs at, and the absence of an async runtime
//! keeps the crash tests honest (a killed node is just dropped threads).

pub mod client;
pub mod config;
pub mod coordinator;
pub mod node;

pub use client::Conn;
pub use config::{ClockMode, CoordinatorConfig, Intervals, NodeConfig};
pub use coordinator::{spawn_coordinator, CoordinatorHandle};
pub use node::{spawn_node, NodeHandle};
