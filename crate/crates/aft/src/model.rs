//! Core identifier, version, and commit-record types.
//!
//! Every committed transaction is identified by a `(timestamp, uuid)` pair.
//! Timestamps come from each node's local clock (no synchronization is
//! required for correctness) and ties are broken by comparing UUIDs
//! lexicographically, giving a total order over all transactions. Key
//! versions and commit records are addressed in storage by rendering that
//! pair into a fixed-width string, so a plain lexicographic listing of the
//! storage namespace comes back in timestamp order.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::AftError;
use crate::storage::StorageKey;

/// 128-bit transaction identity, rendered as 32 lowercase hex characters.
///
/// The UUID is chosen at `StartTransaction` and survives retries of the same
/// logical transaction; commit-time idempotence keys off it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxnUuid(pub [u8; 16]);

impl TxnUuid {
    pub fn random() -> Self {
        TxnUuid(*uuid::Uuid::new_v4().as_bytes())
    }

    /// Builds a UUID from caller-supplied bytes. Used by deterministic
    /// harness runs that derive identities from a seeded RNG.
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        TxnUuid(bytes)
    }
}

impl fmt::Display for TxnUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for TxnUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for TxnUuid {
    type Err = AftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(AftError::BadKey(format!("malformed uuid {s:?}")));
        }
        let mut out = [0u8; 16];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16).unwrap() as u8;
            let lo = (chunk[1] as char).to_digit(16).unwrap() as u8;
            out[i] = hi << 4 | lo;
        }
        Ok(TxnUuid(out))
    }
}

impl Serialize for TxnUuid {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TxnUuid {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A committed transaction's identity: commit timestamp plus UUID.
///
/// The derived ordering (timestamp first, then UUID bytes) is the total
/// order used everywhere: version indexes, supersedence checks, and the
/// rendered storage keys all agree with it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TransactionId {
    /// Milliseconds since epoch, or logical ticks under an injected clock.
    pub ts: u64,
    pub uuid: TxnUuid,
}

impl TransactionId {
    pub fn new(ts: u64, uuid: TxnUuid) -> Self {
        TransactionId { ts, uuid }
    }
}

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:020}-{}", self.ts, self.uuid)
    }
}

impl fmt::Debug for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Total order over transaction IDs: timestamp first, UUID tie-break.
pub fn compare_tids(a: &TransactionId, b: &TransactionId) -> std::cmp::Ordering {
    a.cmp(b)
}

/// Handle for an in-flight transaction. It has no timestamp yet; the commit
/// step assigns one from the node's clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PendingTxnHandle {
    pub uuid: TxnUuid,
    /// Clock reading at `StartTransaction`, for expiry bookkeeping.
    pub start_time: u64,
}

/// A committed transaction's ID and write set: the unit of replication,
/// recovery, and garbage collection.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    #[serde(flatten)]
    pub tid: TransactionId,
    pub writeset: BTreeSet<String>,
}

impl CommitRecord {
    pub fn new(tid: TransactionId, writeset: BTreeSet<String>) -> Self {
        debug_assert!(!writeset.is_empty(), "commit records carry a nonempty write set");
        CommitRecord { tid, writeset }
    }

    /// Serialized form stored in the commit namespace and sent on the wire:
    /// `{"ts":…,"uuid":"…","writeset":[…]}`.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("commit record serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AftError> {
        serde_json::from_slice(bytes)
            .map_err(|e| AftError::Protocol(format!("bad commit record: {e}")))
    }
}

impl fmt::Debug for CommitRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CommitRecord({} -> {:?})", self.tid, self.writeset)
    }
}

/// One immutable version of a key, carrying the write set of the
/// transaction that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyVersion {
    pub key: String,
    pub tid: TransactionId,
    /// Equal to the writing transaction's write set; always contains `key`.
    pub cowritten: BTreeSet<String>,
    pub value: Vec<u8>,
}

/// Sentinel timestamp for provisional (spilled, uncommitted) data keys.
/// Real commit timestamps are always nonzero, so provisional keys sort
/// before every committed version and are recognizable on sight.
pub const PROVISIONAL_TS: u64 = 0;

const DATA_PREFIX: &str = "data/";
const COMMIT_PREFIX: &str = "commit/";

/// Renders the storage key for one version of a data key:
/// `data/{key}/{20-digit timestamp}-{uuid}`.
///
/// Keys may not contain `/`, which the encoding reserves, so the rendering
/// is injective and versions of one key sort in transaction-ID order.
pub fn encode_data_key(key: &str, tid: &TransactionId) -> Result<StorageKey, AftError> {
    validate_user_key(key)?;
    Ok(StorageKey(format!("{DATA_PREFIX}{key}/{tid}")))
}

/// Prefix under which every version of `key` lives.
pub fn data_key_prefix(key: &str) -> String {
    format!("{DATA_PREFIX}{key}/")
}

/// Renders the storage key of a commit record:
/// `commit/{20-digit timestamp}-{uuid}`. Listing the `commit/` prefix
/// enumerates commit records in timestamp order.
pub fn encode_commit_key(tid: &TransactionId) -> StorageKey {
    StorageKey(format!("{COMMIT_PREFIX}{tid}"))
}

pub fn commit_prefix() -> &'static str {
    COMMIT_PREFIX
}

pub fn data_prefix() -> &'static str {
    DATA_PREFIX
}

/// Recovers `(key, tid)` from a rendered data key.
pub fn decode_data_key(sk: &StorageKey) -> Result<(String, TransactionId), AftError> {
    let rest = sk
        .as_str()
        .strip_prefix(DATA_PREFIX)
        .ok_or_else(|| AftError::BadKey(format!("not a data key: {sk}")))?;
    let (key, version) = rest
        .rsplit_once('/')
        .ok_or_else(|| AftError::BadKey(format!("malformed data key: {sk}")))?;
    validate_user_key(key)?;
    Ok((key.to_string(), parse_tid_component(version, sk)?))
}

/// Recovers the transaction ID from a rendered commit key.
pub fn decode_commit_key(sk: &StorageKey) -> Result<TransactionId, AftError> {
    let rest = sk
        .as_str()
        .strip_prefix(COMMIT_PREFIX)
        .ok_or_else(|| AftError::BadKey(format!("not a commit key: {sk}")))?;
    parse_tid_component(rest, sk)
}

fn parse_tid_component(s: &str, origin: &StorageKey) -> Result<TransactionId, AftError> {
    let bad = || AftError::BadKey(format!("malformed transaction id in {origin}"));
    let (ts, uuid) = s.split_once('-').ok_or_else(bad)?;
    if ts.len() != 20 {
        return Err(bad());
    }
    let ts: u64 = ts.parse().map_err(|_| bad())?;
    Ok(TransactionId::new(ts, uuid.parse()?))
}

pub(crate) fn validate_user_key(key: &str) -> Result<(), AftError> {
    if key.is_empty() {
        return Err(AftError::BadKey("empty key".into()));
    }
    if key.contains('/') {
        return Err(AftError::BadKey(format!("key {key:?} contains reserved '/'")));
    }
    if key.len() > u16::MAX as usize {
        return Err(AftError::BadKey("key longer than 65535 bytes".into()));
    }
    Ok(())
}

/// Clock used to assign commit timestamps.
///
/// Production nodes read the system clock; tests and deterministic harness
/// runs inject a logical counter. Correctness never depends on clock
/// synchronization between nodes — time only orders versions.
#[derive(Debug)]
pub enum Clock {
    System,
    /// Monotonic counter starting at 1; each reading advances it.
    Logical(AtomicU64),
    /// A logical counter shared by several nodes — a whole cluster draws
    /// from one sequence, so no two commits anywhere tie on timestamp.
    /// Deterministic harness runs use this.
    SharedLogical(std::sync::Arc<AtomicU64>),
}

impl Clock {
    pub fn system() -> Self {
        Clock::System
    }

    pub fn logical() -> Self {
        Clock::Logical(AtomicU64::new(0))
    }

    /// Current reading in milliseconds (system) or the next tick (logical).
    pub fn now(&self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .expect("system clock before epoch")
                .as_millis() as u64,
            Clock::Logical(c) => c.fetch_add(1, Ordering::Relaxed) + 1,
            Clock::SharedLogical(c) => c.fetch_add(1, Ordering::Relaxed) + 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cmp::Ordering::*;

    fn uuid_of(byte: u8) -> TxnUuid {
        TxnUuid([byte; 16])
    }

    fn tid(ts: u64, byte: u8) -> TransactionId {
        TransactionId::new(ts, uuid_of(byte))
    }

    #[test]
    fn tid_order_breaks_ties_by_uuid() {
        // Same timestamp: "aa…" precedes "ab…".
        let a = TransactionId::new(5, TxnUuid([0xaa; 16]));
        let mut b_bytes = [0xaa; 16];
        b_bytes[0] = 0xab;
        let b = TransactionId::new(5, TxnUuid(b_bytes));
        assert_eq!(compare_tids(&a, &b), Less);

        // Timestamp dominates regardless of uuid.
        assert_eq!(compare_tids(&tid(3, 0xff), &tid(5, 0x00)), Less);

        // Identity.
        assert_eq!(compare_tids(&tid(7, 0xcc), &tid(7, 0xcc)), Equal);
    }

    #[test]
    fn data_key_renders_fixed_width() {
        let t = TransactionId::new(12, TxnUuid([0xab; 16]));
        let sk = encode_data_key("k", &t).unwrap();
        assert_eq!(
            sk.as_str(),
            "data/k/00000000000000000012-abababababababababababababababab"
        );
    }

    #[test]
    fn data_key_order_follows_timestamps() {
        let u = uuid_of(0x11);
        let v9 = encode_data_key("k", &TransactionId::new(9, u)).unwrap();
        let v10 = encode_data_key("k", &TransactionId::new(10, u)).unwrap();
        assert!(v9.as_str() < v10.as_str());
    }

    #[test]
    fn keys_with_separator_are_rejected() {
        let t = tid(1, 0x01);
        assert!(encode_data_key("a/b", &t).is_err());
        assert!(encode_data_key("", &t).is_err());
    }

    #[test]
    fn commit_keys_sort_chronologically() {
        let mut rendered: Vec<String> = [5u64, 30, 7]
            .iter()
            .map(|&ts| encode_commit_key(&tid(ts, 0x02)).0)
            .collect();
        rendered.sort();
        let recovered: Vec<u64> = rendered
            .iter()
            .map(|s| decode_commit_key(&StorageKey(s.clone())).unwrap().ts)
            .collect();
        assert_eq!(recovered, vec![5, 7, 30]);
    }

    #[test]
    fn commit_key_roundtrip_fuzz() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = TransactionId::new(rng.gen(), TxnUuid(rng.gen()));
            let decoded = decode_commit_key(&encode_commit_key(&t)).unwrap();
            assert_eq!(decoded, t);
        }
    }

    #[test]
    fn order_isomorphism_between_tids_and_commit_keys() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            // Cluster timestamps in a small range so ties actually occur.
            let a = TransactionId::new(rng.gen_range(0..4), TxnUuid(rng.gen()));
            let b = TransactionId::new(rng.gen_range(0..4), TxnUuid(rng.gen()));
            let by_tid = compare_tids(&a, &b);
            let by_key = encode_commit_key(&a).0.cmp(&encode_commit_key(&b).0);
            assert_eq!(by_tid, by_key, "{a} vs {b}");
        }
    }

    #[test]
    fn data_key_injective_fuzz() {
        use rand::{Rng, SeedableRng};
        use std::collections::HashSet;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut seen = HashSet::new();
        for i in 0..100_000u64 {
            // Mix fresh and colliding (key, ts) material; uuids make pairs unique.
            let key = format!("k{}", i % 512);
            let t = TransactionId::new(rng.gen_range(0..64), TxnUuid(rng.gen()));
            let sk = encode_data_key(&key, &t).unwrap();
            assert!(seen.insert(sk.0.clone()), "collision at {sk}");
            let (k2, t2) = decode_data_key(&sk).unwrap();
            assert_eq!((k2.as_str(), t2), (key.as_str(), t));
        }
    }

    #[test]
    fn uuid_renders_as_32_lowercase_hex() {
        let u = TxnUuid([0xAB; 16]);
        let s = u.to_string();
        assert_eq!(s.len(), 32);
        assert_eq!(s, s.to_lowercase());
        assert_eq!(s.parse::<TxnUuid>().unwrap(), u);
    }

    #[test]
    fn logical_clock_ticks_from_one() {
        let c = Clock::logical();
        assert_eq!(c.now(), 1);
        assert_eq!(c.now(), 2);
    }

    #[test]
    fn commit_record_wire_shape() {
        let rec = CommitRecord::new(tid(12, 0xab), ["k".to_string()].into());
        let json: serde_json::Value = serde_json::from_slice(&rec.to_bytes()).unwrap();
        assert_eq!(json["ts"], 12);
        assert_eq!(json["uuid"], "abababababababababababababababab");
        assert_eq!(json["writeset"], serde_json::json!(["k"]));
        assert_eq!(CommitRecord::from_bytes(&rec.to_bytes()).unwrap(), rec);
    }
}
