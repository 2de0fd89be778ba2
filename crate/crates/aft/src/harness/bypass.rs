//! The baseline the shim is measured against: clients that use the
//! versioned key layout directly, with no buffering, no commit record,
//! and therefore no atomicity. Each write becomes its own immediately
//! visible version; reads return whatever version is newest.
//!
//! So that anomalies can be counted, every value embeds the same metadata
//! the shim keeps in commit records — a timestamp, the writing
//! transaction's uuid, and the full cowritten key set.

use std::collections::BTreeSet;

use serde_json::{json, Value};

use crate::error::{AftError, Result};
use crate::model::{encode_data_key, data_key_prefix, TransactionId, TxnUuid};
use crate::storage::{put_one, Backend};
use crate::wire;

#[derive(Clone, Debug, PartialEq)]
pub struct BypassValue {
    pub ts: u64,
    pub uuid: TxnUuid,
    pub cowritten: BTreeSet<String>,
    pub payload: Vec<u8>,
}

impl BypassValue {
    pub fn to_bytes(&self) -> Vec<u8> {
        let v = json!({
            "ts": self.ts,
            "uuid": self.uuid.to_string(),
            "cowritten": self.cowritten,
            "payload": wire::encode_bytes(&self.payload),
        });
        serde_json::to_vec(&v).expect("bypass value serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let v: Value = serde_json::from_slice(bytes)
            .map_err(|e| AftError::Protocol(format!("bad bypass value: {e}")))?;
        let ts = v
            .get("ts")
            .and_then(Value::as_u64)
            .ok_or_else(|| AftError::Protocol("bad bypass value: ts".into()))?;
        let uuid = wire::uuid_from_json(v.get("uuid"))?;
        let cowritten = serde_json::from_value(v.get("cowritten").cloned().unwrap_or_default())
            .map_err(|e| AftError::Protocol(format!("bad bypass value: {e}")))?;
        let payload = wire::decode_bytes(
            v.get("payload")
                .and_then(Value::as_str)
                .ok_or_else(|| AftError::Protocol("bad bypass value: payload".into()))?,
        )?;
        Ok(BypassValue {
            ts,
            uuid,
            cowritten,
            payload,
        })
    }
}

/// Writes one version of `key`, visible the moment the put returns.
/// Returns the version id it created.
pub fn bypass_write(
    backend: &dyn Backend,
    ts: u64,
    uuid: TxnUuid,
    key: &str,
    cowritten: &BTreeSet<String>,
    payload: Vec<u8>,
) -> Result<TransactionId> {
    let tid = TransactionId::new(ts, uuid);
    let value = BypassValue {
        ts,
        uuid,
        cowritten: cowritten.clone(),
        payload,
    };
    put_one(backend, encode_data_key(key, &tid)?, value.to_bytes())?;
    Ok(tid)
}

/// Reads the newest version of `key` — no atomicity filtering of any
/// kind, which is the point.
pub fn bypass_read(
    backend: &dyn Backend,
    key: &str,
) -> Result<Option<(TransactionId, BypassValue)>> {
    let prefix = data_key_prefix(key);
    let newest = backend.list_prefix(&prefix, Some(1), true)?;
    let Some(sk) = newest.first() else { return Ok(None) };
    let Some(bytes) = backend.get(sk)? else { return Ok(None) };
    let value = BypassValue::from_bytes(&bytes)?;
    Ok(Some((TransactionId::new(value.ts, value.uuid), value)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::MemoryBackend;

    fn keys(ks: &[&str]) -> BTreeSet<String> {
        ks.iter().map(|k| k.to_string()).collect()
    }

    #[test]
    fn value_roundtrips() {
        let v = BypassValue {
            ts: 42,
            uuid: TxnUuid([7; 16]),
            cowritten: keys(&["a", "b"]),
            payload: vec![0, 255, 3],
        };
        assert_eq!(BypassValue::from_bytes(&v.to_bytes()).unwrap(), v);
    }

    #[test]
    fn read_returns_newest_write() {
        let b = MemoryBackend::new();
        let u1 = TxnUuid([1; 16]);
        let u2 = TxnUuid([2; 16]);
        bypass_write(&b, 5, u1, "k", &keys(&["k"]), b"old".to_vec()).unwrap();
        let newest = bypass_write(&b, 9, u2, "k", &keys(&["k", "l"]), b"new".to_vec()).unwrap();

        let (tid, value) = bypass_read(&b, "k").unwrap().unwrap();
        assert_eq!(tid, newest);
        assert_eq!(value.payload, b"new");
        assert_eq!(value.cowritten, keys(&["k", "l"]));
        assert_eq!(bypass_read(&b, "never").unwrap(), None);
    }

    #[test]
    fn interleaved_writes_expose_a_fractured_state() {
        // The scenario the shim exists to prevent: transaction u2 wrote k
        // then l; a reader between the two puts sees new k alongside old l.
        let b = MemoryBackend::new();
        let u1 = TxnUuid([1; 16]);
        let u2 = TxnUuid([2; 16]);
        bypass_write(&b, 1, u1, "k", &keys(&["k", "l"]), b"k1".to_vec()).unwrap();
        bypass_write(&b, 2, u1, "l", &keys(&["k", "l"]), b"l1".to_vec()).unwrap();

        bypass_write(&b, 3, u2, "k", &keys(&["k", "l"]), b"k2".to_vec()).unwrap();
        // Reader arrives here, before u2 writes l.
        let (k_tid, k_val) = bypass_read(&b, "k").unwrap().unwrap();
        let (l_tid, _) = bypass_read(&b, "l").unwrap().unwrap();
        assert_eq!(k_tid.uuid, u2);
        assert_eq!(l_tid.uuid, u1, "old l next to new k");
        assert!(k_val.cowritten.contains("l"), "metadata proves the fracture");
        bypass_write(&b, 4, u2, "l", &keys(&["k", "l"]), b"l2".to_vec()).unwrap();
    }
}
