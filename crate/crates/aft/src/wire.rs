//! Frame and message encoding for everything that crosses a socket.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. Every request object carries `"type"` and `"req_id"`; every
//! response echoes the `req_id` and carries either a result or an
//! `"error"` code from a small closed set. Byte values travel as base64
//! strings. The format is deliberately primitive — any language can speak
//! it with a socket and a JSON parser.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use crate::error::AftError;
use crate::model::{TransactionId, TxnUuid};

/// Frames larger than this are rejected as protocol errors — nothing the
/// shim sends comes near it, so a bigger length prefix means a confused or
/// hostile peer.
pub const MAX_FRAME: u32 = 64 << 20;

pub fn write_frame(w: &mut impl Write, msg: &Value) -> io::Result<()> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "frame too large"))?;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame body; `Ok(None)` is a clean end-of-stream (the peer
/// closed between frames). A malformed length or truncated body is an
/// error — the stream cannot be resynchronized past either.
pub fn read_frame_bytes(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len_bytes = [0u8; 4];
    match r.read_exact(&mut len_bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len_bytes);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// [`read_frame_bytes`] plus JSON parsing. Servers read the raw body
/// instead, so a frame that is well-delimited but not valid JSON can be
/// answered with a protocol error rather than killing the connection.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Value>> {
    match read_frame_bytes(r)? {
        None => Ok(None),
        Some(body) => serde_json::from_slice(&body)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

pub fn encode_bytes(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn decode_bytes(s: &str) -> Result<Vec<u8>, AftError> {
    B64.decode(s).map_err(|e| AftError::Protocol(format!("bad base64: {e}")))
}

/// Renders a transaction ID as the `{"ts":…,"uuid":"…"}` fragment used in
/// responses and peer messages.
pub fn tid_json(tid: &TransactionId) -> Value {
    json!({ "ts": tid.ts, "uuid": tid.uuid.to_string() })
}

pub fn tid_from_json(v: &Value) -> Result<TransactionId, AftError> {
    let ts = v
        .get("ts")
        .and_then(Value::as_u64)
        .ok_or_else(|| AftError::Protocol("missing ts".into()))?;
    let uuid = uuid_from_json(v.get("uuid"))?;
    Ok(TransactionId::new(ts, uuid))
}

pub fn uuid_from_json(v: Option<&Value>) -> Result<TxnUuid, AftError> {
    v.and_then(Value::as_str)
        .ok_or_else(|| AftError::Protocol("missing uuid".into()))?
        .parse()
}

/// Builds the error response for a request id.
pub fn error_response(req_id: Value, err: &AftError) -> Value {
    json!({ "req_id": req_id, "error": err.code(), "message": err.to_string() })
}

/// Extracts a response's payload or converts its error code back into an
/// [`AftError`] — the client-side mirror of [`error_response`].
pub fn check_response(resp: Value) -> Result<Value, AftError> {
    match resp.get("error").and_then(Value::as_str) {
        None => Ok(resp),
        Some(code) => {
            let msg = resp
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            Err(match code {
                "unknown_txn" => AftError::UnknownTxn(msg),
                "not_running" => AftError::NotRunning(msg),
                "not_readable" => AftError::NotReadable(msg),
                "storage_error" => {
                    AftError::Storage(crate::storage::StorageError::Corrupt(msg))
                }
                "bad_key" => AftError::BadKey(msg),
                "node_down" => AftError::NodeDown,
                _ => AftError::Protocol(format!("{code}: {msg}")),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frames_roundtrip_back_to_back() {
        let a = json!({"type": "start", "req_id": 1});
        let b = json!({"type": "get", "req_id": 2, "key": "k"});
        let mut buf = Vec::new();
        write_frame(&mut buf, &a).unwrap();
        write_frame(&mut buf, &b).unwrap();

        let mut r = Cursor::new(buf);
        assert_eq!(read_frame(&mut r).unwrap(), Some(a));
        assert_eq!(read_frame(&mut r).unwrap(), Some(b));
        assert_eq!(read_frame(&mut r).unwrap(), None, "clean EOF");
    }

    #[test]
    fn length_prefix_is_big_endian() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({})).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 2]);
        assert_eq!(&buf[4..], b"{}");
    }

    #[test]
    fn truncated_body_is_an_error_not_eof() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({"type": "start"})).unwrap();
        buf.truncate(buf.len() - 1);
        let mut r = Cursor::new(buf);
        assert!(read_frame(&mut r).is_err());
    }

    #[test]
    fn absurd_length_is_rejected() {
        let mut buf = (MAX_FRAME + 1).to_be_bytes().to_vec();
        buf.extend_from_slice(&[0; 8]);
        assert!(read_frame(&mut Cursor::new(buf)).is_err());
    }

    #[test]
    fn values_roundtrip_through_base64() {
        let raw = vec![0u8, 255, 7, 128];
        assert_eq!(decode_bytes(&encode_bytes(&raw)).unwrap(), raw);
        assert!(decode_bytes("!!!").is_err());
    }

    #[test]
    fn error_codes_roundtrip() {
        let err = AftError::NotReadable("k".into());
        let resp = error_response(json!(9), &err);
        assert_eq!(resp["req_id"], 9);
        assert_eq!(resp["error"], "not_readable");
        assert!(matches!(check_response(resp), Err(AftError::NotReadable(_))));
        let ok = json!({"req_id": 9, "value": null});
        assert_eq!(check_response(ok.clone()).unwrap(), ok);
    }

    #[test]
    fn tid_json_roundtrip() {
        let tid = TransactionId::new(42, TxnUuid([0xcd; 16]));
        assert_eq!(tid_from_json(&tid_json(&tid)).unwrap(), tid);
    }
}
