//! TOML configuration for the node and coordinator binaries.

use std::path::Path;
use std::sync::atomic::AtomicU64;

use serde::{Deserialize, Serialize};

use crate::error::{AftError, Result};
use crate::model::Clock;
use crate::storage::BackendConfig;
use crate::txn::TxnOptions;

/// Background cadences, shared by both runtimes. A node uses the multicast
/// and gc entries; a coordinator uses gc and fault_scan; txn_timeout bounds
/// session lifetimes on nodes and orphan aging on the coordinator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Intervals {
    pub multicast_ms: u64,
    pub gc_ms: u64,
    pub fault_scan_ms: u64,
    pub txn_timeout_ms: u64,
}

impl Default for Intervals {
    fn default() -> Self {
        Intervals {
            multicast_ms: 1_000,
            gc_ms: 5_000,
            fault_scan_ms: 5_000,
            txn_timeout_ms: 60_000,
        }
    }
}

impl Intervals {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("multicast_ms", self.multicast_ms),
            ("gc_ms", self.gc_ms),
            ("fault_scan_ms", self.fault_scan_ms),
            ("txn_timeout_ms", self.txn_timeout_ms),
        ] {
            if v == 0 {
                return Err(AftError::Config(format!("intervals.{name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Which clock stamps commit timestamps. Real deployments want wall time;
/// deterministic runs want the logical counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    #[default]
    System,
    Logical,
}

impl ClockMode {
    pub fn build(self) -> Clock {
        match self {
            ClockMode::System => Clock::System,
            ClockMode::Logical => Clock::Logical(AtomicU64::new(1)),
        }
    }
}

fn default_cache_bytes() -> usize {
    64 << 20
}

fn default_spill_threshold() -> usize {
    4 << 20
}

fn default_bootstrap_limit() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

/// Everything an `aft-node` process needs, loaded from a TOML file.
///
/// ```toml
/// node_id = "a"
/// listen = "127.0.0.1:4101"
/// peers = ["127.0.0.1:4102"]
/// coordinator = "127.0.0.1:4100"
///
/// [backend]
/// kind = "durable-file"
/// root_path = "/var/lib/aft"
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    /// Address to bind; port 0 picks a free port (tests rely on this).
    pub listen: String,
    /// Other nodes' listen addresses. Must not include our own.
    #[serde(default)]
    pub peers: Vec<String>,
    /// Fault-manager address, if one is running.
    #[serde(default)]
    pub coordinator: Option<String>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub intervals: Intervals,
    #[serde(default = "default_cache_bytes")]
    pub cache_bytes: usize,
    #[serde(default = "default_spill_threshold")]
    pub spill_threshold_bytes: usize,
    #[serde(default = "default_bootstrap_limit")]
    pub bootstrap_limit: usize,
    #[serde(default)]
    pub clock: ClockMode,
    /// Drop superseded records from peer batches before sending.
    #[serde(default = "default_true")]
    pub prune_broadcast: bool,
}

impl NodeConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| AftError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let cfg: NodeConfig =
            toml::from_str(&text).map_err(|e| AftError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_id.is_empty() {
            return Err(AftError::Config("node_id must not be empty".into()));
        }
        if self.peers.iter().any(|p| p == &self.listen) {
            return Err(AftError::Config(format!(
                "peers must not include this node's own address {}",
                self.listen
            )));
        }
        if self.spill_threshold_bytes == 0 {
            return Err(AftError::Config("spill_threshold_bytes must be > 0".into()));
        }
        self.intervals.validate()
    }

    pub fn txn_options(&self) -> TxnOptions {
        TxnOptions {
            spill_threshold: self.spill_threshold_bytes,
            txn_timeout_ms: self.intervals.txn_timeout_ms,
            bootstrap_limit: self.bootstrap_limit,
            cache_bytes: self.cache_bytes,
        }
    }
}

fn default_max_round() -> usize {
    256
}

fn default_deletion_chunk() -> usize {
    64
}

/// Everything an `aft-coordinator` process needs.
///
/// The coordinator must see the same storage as the nodes. `backend`
/// configures direct access; `storage_via` instead routes every storage
/// operation through the named node's passthrough requests, for setups
/// where exactly one process may own the store (the durable-file backend).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub listen: String,
    /// Full static membership: every node's listen address. A GC round
    /// deletes nothing until all of them have acknowledged it.
    pub nodes: Vec<String>,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
    #[serde(default)]
    pub storage_via: Option<String>,
    #[serde(default)]
    pub intervals: Intervals,
    /// Provisional keys older than this are swept as orphans. Defaults to
    /// ten transaction timeouts, so nothing a live session still
    /// references can age out.
    #[serde(default)]
    pub orphan_age_ms: Option<u64>,
    #[serde(default = "default_max_round")]
    pub max_candidates_per_round: usize,
    #[serde(default = "default_deletion_chunk")]
    pub deletion_chunk: usize,
}

impl CoordinatorConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| AftError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let cfg: CoordinatorConfig =
            toml::from_str(&text).map_err(|e| AftError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(AftError::Config("nodes must not be empty".into()));
        }
        match (&self.backend, &self.storage_via) {
            (Some(_), Some(_)) => Err(AftError::Config(
                "backend and storage_via are mutually exclusive".into(),
            )),
            (None, None) => Err(AftError::Config(
                "one of backend or storage_via is required".into(),
            )),
            _ => {
                if self.max_candidates_per_round == 0 {
                    return Err(AftError::Config(
                        "max_candidates_per_round must be > 0".into(),
                    ));
                }
                self.intervals.validate()
            }
        }
    }

    pub fn orphan_age_ms(&self) -> u64 {
        self.orphan_age_ms
            .unwrap_or(self.intervals.txn_timeout_ms.saturating_mul(10))
    }
}
