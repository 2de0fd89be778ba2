//! Framed TCP client for talking to nodes and the coordinator.

use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{AftError, Result};
use crate::model::{TransactionId, TxnUuid};
use crate::storage::{Backend, StorageError, StorageKey};
use crate::txn::ReadResult;
use crate::wire;

/// One connection to one server. Sequential request/response; every
/// transport failure comes back as [`AftError::NodeDown`], which is the
/// signal retry logic keys on — a dead socket and a dead node look the
/// same from here, and are handled the same way.
pub struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_req: u64,
}

impl Conn {
    pub fn connect(addr: &str) -> Result<Conn> {
        let stream = TcpStream::connect(addr).map_err(|e| {
            log::debug!("connect {addr}: {e}");
            AftError::NodeDown
        })?;
        let _ = stream.set_nodelay(true);
        // A wedged server must not hang callers forever; ticks and
        // harness clients both rely on this bound.
        let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
        let _ = stream.set_write_timeout(Some(Duration::from_secs(10)));
        let read_half = stream.try_clone().map_err(|_| AftError::NodeDown)?;
        Ok(Conn {
            reader: BufReader::new(read_half),
            writer: BufWriter::new(stream),
            next_req: 0,
        })
    }

    /// Sends `msg` (stamping a fresh `req_id`) and waits for its response.
    /// Errors the server reports come back as their typed [`AftError`].
    pub fn request(&mut self, mut msg: Value) -> Result<Value> {
        self.next_req += 1;
        msg["req_id"] = json!(self.next_req);
        wire::write_frame(&mut self.writer, &msg).map_err(|e| {
            log::debug!("send: {e}");
            AftError::NodeDown
        })?;
        let resp = wire::read_frame(&mut self.reader)
            .map_err(|e| {
                log::debug!("recv: {e}");
                AftError::NodeDown
            })?
            .ok_or(AftError::NodeDown)?;
        let resp = wire::check_response(resp)?;
        if resp.get("req_id") != Some(&json!(self.next_req)) {
            return Err(AftError::Protocol("response to a different request".into()));
        }
        Ok(resp)
    }

    pub fn start(&mut self) -> Result<TxnUuid> {
        let resp = self.request(json!({ "type": "start" }))?;
        wire::uuid_from_json(resp.get("uuid"))
    }

    /// Re-adopts a known uuid — the retry path after losing a node.
    pub fn start_with(&mut self, uuid: TxnUuid) -> Result<TxnUuid> {
        let resp = self.request(json!({ "type": "start", "uuid": uuid.to_string() }))?;
        wire::uuid_from_json(resp.get("uuid"))
    }

    pub fn get(&mut self, uuid: TxnUuid, key: &str) -> Result<ReadResult> {
        let resp =
            self.request(json!({ "type": "get", "uuid": uuid.to_string(), "key": key }))?;
        let value = match resp.get("value") {
            Some(Value::String(b64)) => Some(wire::decode_bytes(b64)?),
            _ => None,
        };
        let observed = match resp.get("observed") {
            Some(obs) if !obs.is_null() => {
                let tid = wire::tid_from_json(obs)?;
                let cowritten: BTreeSet<String> =
                    serde_json::from_value(obs.get("cowritten").cloned().unwrap_or_default())
                        .map_err(|e| AftError::Protocol(format!("bad cowritten: {e}")))?;
                Some((tid, cowritten))
            }
            _ => None,
        };
        let from_own_write = resp
            .get("own_write")
            .and_then(Value::as_bool)
            .unwrap_or(false);
        Ok(ReadResult {
            value,
            observed,
            from_own_write,
        })
    }

    pub fn put(&mut self, uuid: TxnUuid, key: &str, value: &[u8]) -> Result<()> {
        self.request(json!({
            "type": "put",
            "uuid": uuid.to_string(),
            "key": key,
            "value": wire::encode_bytes(value),
        }))
        .map(|_| ())
    }

    pub fn commit(&mut self, uuid: TxnUuid) -> Result<TransactionId> {
        let resp = self.request(json!({ "type": "commit", "uuid": uuid.to_string() }))?;
        wire::tid_from_json(&resp)
    }

    pub fn abort(&mut self, uuid: TxnUuid) -> Result<()> {
        self.request(json!({ "type": "abort", "uuid": uuid.to_string() }))
            .map(|_| ())
    }

    /// Whether `uuid` has a commit record anywhere in storage.
    pub fn check_commit(&mut self, uuid: TxnUuid) -> Result<Option<TransactionId>> {
        let resp =
            self.request(json!({ "type": "check_commit", "uuid": uuid.to_string() }))?;
        match resp.get("committed") {
            Some(v) if !v.is_null() => Ok(Some(wire::tid_from_json(v)?)),
            _ => Ok(None),
        }
    }

    pub fn stats(&mut self) -> Result<NodeStats> {
        let resp = self.request(json!({ "type": "stats" }))?;
        Ok(NodeStats {
            node_id: resp
                .get("node_id")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            live_records: resp
                .get("live_records")
                .and_then(Value::as_u64)
                .unwrap_or(0) as usize,
            sessions: resp.get("sessions").and_then(Value::as_u64).unwrap_or(0) as usize,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeStats {
    pub node_id: String,
    pub live_records: usize,
    pub sessions: usize,
}

/// Storage reached through a node's passthrough requests instead of
/// directly. This is how a coordinator process shares a store it cannot
/// open itself — the durable-file backend admits exactly one owning
/// process, so the owner proxies.
///
/// Connections are re-established per failure, not per call; a dead proxy
/// surfaces as [`StorageError::Io`] and the next call reconnects.
pub struct RemoteBackend {
    addr: String,
    conn: Mutex<Option<Conn>>,
}

impl RemoteBackend {
    pub fn new(addr: impl Into<String>) -> Self {
        RemoteBackend {
            addr: addr.into(),
            conn: Mutex::new(None),
        }
    }

    fn call(&self, msg: Value) -> std::result::Result<Value, StorageError> {
        let mut slot = self.conn.lock().unwrap();
        if slot.is_none() {
            *slot = Some(Conn::connect(&self.addr).map_err(remote_err)?);
        }
        match slot.as_mut().unwrap().request(msg) {
            Ok(v) => Ok(v),
            Err(e) => {
                *slot = None;
                Err(remote_err(e))
            }
        }
    }
}

fn remote_err(e: AftError) -> StorageError {
    match e {
        AftError::Storage(s) => s,
        other => StorageError::Io(std::io::Error::other(other.to_string())),
    }
}

impl Backend for RemoteBackend {
    fn get(&self, sk: &StorageKey) -> std::result::Result<Option<Vec<u8>>, StorageError> {
        let resp = self.call(json!({ "type": "storage_get", "sk": sk.as_str() }))?;
        match resp.get("value") {
            Some(Value::String(b64)) => Ok(Some(
                wire::decode_bytes(b64).map_err(|e| StorageError::Corrupt(e.to_string()))?,
            )),
            _ => Ok(None),
        }
    }

    fn put_batch(&self, entries: &[(StorageKey, Vec<u8>)]) -> std::result::Result<(), StorageError> {
        if entries.is_empty() {
            return Err(StorageError::EmptyBatch);
        }
        let wired: Vec<Value> = entries
            .iter()
            .map(|(sk, v)| json!([sk.as_str(), wire::encode_bytes(v)]))
            .collect();
        self.call(json!({ "type": "storage_put", "entries": wired }))
            .map(|_| ())
    }

    fn list_prefix(
        &self,
        prefix: &str,
        limit: Option<usize>,
        reverse: bool,
    ) -> std::result::Result<Vec<StorageKey>, StorageError> {
        let resp = self.call(json!({
            "type": "storage_list",
            "prefix": prefix,
            "limit": limit,
            "reverse": reverse,
        }))?;
        let keys = resp
            .get("keys")
            .and_then(Value::as_array)
            .ok_or_else(|| StorageError::Corrupt("storage_list reply".into()))?;
        keys.iter()
            .map(|k| {
                k.as_str()
                    .map(|s| StorageKey(s.to_string()))
                    .ok_or_else(|| StorageError::Corrupt("storage_list reply".into()))
            })
            .collect()
    }

    fn delete_batch(&self, sks: &[StorageKey]) -> std::result::Result<(), StorageError> {
        let wired: Vec<&str> = sks.iter().map(|k| k.as_str()).collect();
        self.call(json!({ "type": "storage_delete", "sks": wired }))
            .map(|_| ())
    }
}
