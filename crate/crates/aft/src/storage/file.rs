//! Durable-file backend: one append-only log plus compaction snapshots.
//!
//! Layout under `root_path`:
//!
//! ```text
//! log.bin                  append-only record stream (puts and deletes)
//! snap-000042-data.bin     sorted live entries of the data/ namespace
//! snap-000042-commit.bin   …of the commit/ namespace
//! snap-000042-misc.bin     …everything else
//! CURRENT                  generation number the snapshots belong to
//! ```
//!
//! Every record is `[len: u32 BE][op: u8][klen: u16 BE][key][value][crc: u32 BE]`
//! where `len` counts the body (op through value) and the CRC covers the
//! same bytes. op 0 = put, op 1 = delete (empty value).
//!
//! Writes append to `log.bin` and fsync before acknowledging. Compaction
//! writes fresh snapshot files, flips `CURRENT` via atomic rename, then
//! truncates the log; replaying a stale log over a newer snapshot is
//! idempotent, so a crash anywhere in that sequence recovers cleanly. A
//! torn tail on the log (partial record, bad CRC) is truncated at the last
//! intact record on open — that suffix was never acknowledged.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{Backend, StorageError, StorageKey};

const OP_PUT: u8 = 0;
const OP_DELETE: u8 = 1;
/// Upper bound on a single record body; anything larger is treated as a
/// torn length field rather than a real record.
const MAX_BODY: u32 = 1 << 30;
/// Log size that triggers compaction after a write.
const DEFAULT_COMPACT_THRESHOLD: u64 = 64 << 20;

struct Inner {
    map: BTreeMap<String, Vec<u8>>,
    log: File,
    log_bytes: u64,
    generation: u64,
    compact_threshold: u64,
}

pub struct FileBackend {
    root: PathBuf,
    inner: Mutex<Inner>,
}

impl FileBackend {
    /// Opens (or initializes) a backend rooted at `root`. Recovery order:
    /// load the `CURRENT` snapshot generation if one exists, then replay
    /// the log on top, truncating any torn tail.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StorageError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;

        let generation = read_current(&root)?;
        let mut map = BTreeMap::new();
        if let Some(generation) = generation {
            for ns in ["data", "commit", "misc"] {
                let path = snap_path(&root, generation, ns);
                if path.exists() {
                    load_snapshot(&path, &mut map)?;
                }
            }
        }

        let log_path = root.join("log.bin");
        let mut log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)?;
        let log_bytes = replay_log(&mut log, &mut map)?;

        let backend = FileBackend {
            root,
            inner: Mutex::new(Inner {
                map,
                log,
                log_bytes,
                generation: generation.unwrap_or(0),
                compact_threshold: DEFAULT_COMPACT_THRESHOLD,
            }),
        };
        backend.remove_stale_snapshots()?;
        Ok(backend)
    }

    /// Lowers (or raises) the automatic compaction trigger. Tests use tiny
    /// thresholds to exercise compaction without megabytes of traffic.
    pub fn set_compact_threshold(&self, bytes: u64) {
        self.inner.lock().unwrap().compact_threshold = bytes;
    }

    /// Rewrites live state into fresh snapshot files and truncates the log.
    pub fn compact(&self) -> Result<(), StorageError> {
        let mut inner = self.inner.lock().unwrap();
        self.compact_locked(&mut inner)
    }

    /// Bytes currently in the log; observability for compaction tests.
    pub fn log_len(&self) -> u64 {
        self.inner.lock().unwrap().log_bytes
    }

    fn compact_locked(&self, inner: &mut Inner) -> Result<(), StorageError> {
        let next_gen = inner.generation + 1;

        // Partition live entries by namespace and write sorted snapshots.
        // BTreeMap iteration is already sorted, so each file comes out
        // sorted for free.
        for ns in ["data", "commit", "misc"] {
            let mut snap = File::create(snap_path(&self.root, next_gen, ns))?;
            for (k, v) in &inner.map {
                if namespace_of(k) == ns {
                    snap.write_all(&encode_record(OP_PUT, k, v)?)?;
                }
            }
            snap.sync_all()?;
        }
        sync_dir(&self.root)?;

        // Flip CURRENT atomically. After this point a crash recovers from
        // the new snapshots; the old log replays idempotently over them.
        let tmp = self.root.join("CURRENT.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(next_gen.to_string().as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, self.root.join("CURRENT"))?;
        sync_dir(&self.root)?;

        // Now the log's contents are redundant; drop them.
        inner.log.set_len(0)?;
        inner.log.seek(SeekFrom::Start(0))?;
        inner.log.sync_all()?;
        inner.log_bytes = 0;

        let old_gen = inner.generation;
        inner.generation = next_gen;
        if old_gen != 0 {
            for ns in ["data", "commit", "misc"] {
                let _ = fs::remove_file(snap_path(&self.root, old_gen, ns));
            }
        }
        Ok(())
    }

    fn remove_stale_snapshots(&self) -> Result<(), StorageError> {
        let current = self.inner.lock().unwrap().generation;
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(rest) = name.strip_prefix("snap-") {
                let gen: Option<u64> = rest.split('-').next().and_then(|g| g.parse().ok());
                if gen != Some(current) {
                    let _ = fs::remove_file(entry.path());
                }
            } else if name == "CURRENT.tmp" {
                let _ = fs::remove_file(entry.path());
            }
        }
        Ok(())
    }

    fn append_records(
        &self,
        inner: &mut Inner,
        records: Vec<(u8, String, Vec<u8>)>,
    ) -> Result<(), StorageError> {
        let mut buf = Vec::new();
        for (op, key, value) in &records {
            buf.extend_from_slice(&encode_record(*op, key, value)?);
        }
        inner.log.write_all(&buf)?;
        // Durability on acknowledgment: data reaches disk before we apply
        // to the in-memory view or return to the caller.
        inner.log.sync_data()?;
        inner.log_bytes += buf.len() as u64;

        for (op, key, value) in records {
            match op {
                OP_PUT => {
                    inner.map.insert(key, value);
                }
                _ => {
                    inner.map.remove(&key);
                }
            }
        }

        if inner.log_bytes >= inner.compact_threshold {
            self.compact_locked(inner)?;
        }
        Ok(())
    }
}

impl Backend for FileBackend {
    fn get(&self, sk: &StorageKey) -> Result<Option<Vec<u8>>, StorageError> {
        Ok(self.inner.lock().unwrap().map.get(sk.as_str()).cloned())
    }

    fn put_batch(&self, entries: &[(StorageKey, Vec<u8>)]) -> Result<(), StorageError> {
        if entries.is_empty() {
            return Err(StorageError::EmptyBatch);
        }
        let records = entries
            .iter()
            .map(|(k, v)| (OP_PUT, k.0.clone(), v.clone()))
            .collect();
        let mut inner = self.inner.lock().unwrap();
        self.append_records(&mut inner, records)
    }

    fn list_prefix(
        &self,
        prefix: &str,
        limit: Option<usize>,
        reverse: bool,
    ) -> Result<Vec<StorageKey>, StorageError> {
        let inner = self.inner.lock().unwrap();
        let range = inner
            .map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| StorageKey(k.clone()));
        Ok(if reverse {
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
        })
    }

    fn delete_batch(&self, sks: &[StorageKey]) -> Result<(), StorageError> {
        if sks.is_empty() {
            return Ok(());
        }
        let records = sks.iter().map(|k| (OP_DELETE, k.0.clone(), Vec::new())).collect();
        let mut inner = self.inner.lock().unwrap();
        self.append_records(&mut inner, records)
    }
}

fn namespace_of(key: &str) -> &'static str {
    if key.starts_with("data/") {
        "data"
    } else if key.starts_with("commit/") {
        "commit"
    } else {
        "misc"
    }
}

fn snap_path(root: &Path, generation: u64, ns: &str) -> PathBuf {
    root.join(format!("snap-{generation:06}-{ns}.bin"))
}

fn read_current(root: &Path) -> Result<Option<u64>, StorageError> {
    let path = root.join("CURRENT");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let generation = text
        .trim()
        .parse()
        .map_err(|_| StorageError::Corrupt(format!("CURRENT holds {text:?}")))?;
    Ok(Some(generation))
}

fn sync_dir(root: &Path) -> Result<(), StorageError> {
    File::open(root)?.sync_all()?;
    Ok(())
}

/// `[len u32][op u8][klen u16][key][value][crc u32]`, integers big-endian,
/// CRC32 over the body (op through value).
fn encode_record(op: u8, key: &str, value: &[u8]) -> Result<Vec<u8>, StorageError> {
    let klen: u16 = key.len().try_into().map_err(|_| StorageError::KeyTooLarge)?;
    let body_len = 1 + 2 + key.len() + value.len();
    if body_len as u64 > MAX_BODY as u64 {
        return Err(StorageError::Corrupt("record over size cap".into()));
    }
    let mut out = Vec::with_capacity(4 + body_len + 4);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.push(op);
    out.extend_from_slice(&klen.to_be_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(value);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

enum Parsed {
    Record { op: u8, key: String, value: Vec<u8>, next: usize },
    /// Ran off the end or failed validation — a torn tail.
    Torn,
}

fn parse_record(buf: &[u8], at: usize) -> Parsed {
    let Some(header) = buf.get(at..at + 4) else { return Parsed::Torn };
    let body_len = u32::from_be_bytes(header.try_into().unwrap());
    if body_len < 3 || body_len > MAX_BODY {
        return Parsed::Torn;
    }
    let body_start = at + 4;
    let Some(body) = buf.get(body_start..body_start + body_len as usize) else {
        return Parsed::Torn;
    };
    let crc_start = body_start + body_len as usize;
    let Some(crc_bytes) = buf.get(crc_start..crc_start + 4) else { return Parsed::Torn };
    if crc32fast::hash(body) != u32::from_be_bytes(crc_bytes.try_into().unwrap()) {
        return Parsed::Torn;
    }
    let op = body[0];
    let klen = u16::from_be_bytes([body[1], body[2]]) as usize;
    if 3 + klen > body.len() {
        return Parsed::Torn;
    }
    let Ok(key) = std::str::from_utf8(&body[3..3 + klen]) else { return Parsed::Torn };
    Parsed::Record {
        op,
        key: key.to_string(),
        value: body[3 + klen..].to_vec(),
        next: crc_start + 4,
    }
}

/// Applies every intact log record to `map`; truncates a torn tail in
/// place. Returns the surviving log length.
fn replay_log(log: &mut File, map: &mut BTreeMap<String, Vec<u8>>) -> Result<u64, StorageError> {
    let mut buf = Vec::new();
    log.seek(SeekFrom::Start(0))?;
    log.read_to_end(&mut buf)?;

    let mut at = 0usize;
    loop {
        if at == buf.len() {
            break;
        }
        match parse_record(&buf, at) {
            Parsed::Record { op, key, value, next } => {
                match op {
                    OP_PUT => {
                        map.insert(key, value);
                    }
                    OP_DELETE => {
                        map.remove(&key);
                    }
                    other => {
                        // An intact record with an unknown op is corruption,
                        // not a torn tail; refuse to guess.
                        return Err(StorageError::Corrupt(format!("unknown op {other}")));
                    }
                }
                at = next;
            }
            Parsed::Torn => {
                log::warn!(
                    "truncating torn log tail at byte {at} ({} bytes dropped)",
                    buf.len() - at
                );
                log.set_len(at as u64)?;
                log.sync_all()?;
                break;
            }
        }
    }
    log.seek(SeekFrom::End(0))?;
    Ok(at as u64)
}

/// Loads one snapshot file. Snapshots were fully synced before `CURRENT`
/// pointed at them, so damage here is a hard error rather than a tail to
/// trim.
fn load_snapshot(path: &Path, map: &mut BTreeMap<String, Vec<u8>>) -> Result<(), StorageError> {
    let buf = fs::read(path)?;
    let mut at = 0usize;
    while at < buf.len() {
        match parse_record(&buf, at) {
            Parsed::Record { op: OP_PUT, key, value, next } => {
                map.insert(key, value);
                at = next;
            }
            _ => {
                return Err(StorageError::Corrupt(format!(
                    "snapshot {} damaged at byte {at}",
                    path.display()
                )))
            }
        }
    }
    Ok(())
}
