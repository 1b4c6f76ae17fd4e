//! File-backed job store coordinating fetch workers through chunk leases.
//!
//! The log is a header line followed by one JSON event per line:
//!
//! ```text
//! {"format":"crawlcurate-jobstore","version":1}
//! {"op":"create","chunk_id":0,"items":[{"seq":0,"pair":{...}}, ...]}
//! {"op":"lease","chunk_id":0,"worker_id":"w1","expiry_ms":1700000000000}
//! {"op":"complete","chunk_id":0,"worker_id":"w1","results":[...]}
//! ```
//!
//! Every operation holds an exclusive `flock` on the log while it catches up
//! on events appended by other handles, validates the transition and
//! appends. A torn final line left by a crashed writer is truncated.
//! `<log>.snapshot` holds the replayed state up to a log offset so that
//! opening a long log does not replay it from the start.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crawlcurate_core::wat::CandidatePair;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fetch::FetchResult;

pub const STORE_FORMAT: &str = "crawlcurate-jobstore";
pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_CHUNK_SIZE: usize = 10_000;
const DEFAULT_SNAPSHOT_EVERY: u64 = 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("job store io: {0}")]
    StoreIo(#[from] std::io::Error),
    #[error("job store header invalid: {0}")]
    BadHeader(String),
    #[error("job store corrupt at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("unknown chunk {0}")]
    UnknownChunk(u64),
    #[error("chunk {chunk_id} is not leased by {worker_id}")]
    LeaseLost { chunk_id: u64, worker_id: String },
    #[error("chunk {chunk_id} has {expected} items but {got} results were supplied")]
    ResultCountMismatch { chunk_id: u64, expected: usize, got: usize },
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobItem {
    /// Position in the overall pair sequence, unique across chunks.
    pub seq: u64,
    pub pair: CandidatePair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ChunkState {
    Pending,
    Leased { worker_id: String, lease_expiry_ms: u64 },
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobChunk {
    pub chunk_id: u64,
    pub items: Arc<Vec<JobItem>>,
    pub state: ChunkState,
    /// One result per item, present once Done.
    pub results: Option<Arc<Vec<FetchResult>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounts {
    pub pending: usize,
    pub leased: usize,
    pub done: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Event {
    Create { chunk_id: u64, items: Vec<JobItem> },
    Lease { chunk_id: u64, worker_id: String, expiry_ms: u64 },
    Complete { chunk_id: u64, worker_id: String, results: Vec<FetchResult> },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    log_offset: u64,
    chunks: Vec<JobChunk>,
}

#[derive(Debug, Default)]
struct State {
    chunks: BTreeMap<u64, JobChunk>,
}

impl State {
    fn apply(&mut self, event: Event, offset: u64) -> Result<(), StoreError> {
        let corrupt = |reason: String| StoreError::Corrupt { offset, reason };
        match event {
            Event::Create { chunk_id, items } => {
                if self.chunks.contains_key(&chunk_id) {
                    return Err(corrupt(format!("chunk {chunk_id} created twice")));
                }
                self.chunks.insert(
                    chunk_id,
                    JobChunk { chunk_id, items: Arc::new(items), state: ChunkState::Pending, results: None },
                );
            }
            Event::Lease { chunk_id, worker_id, expiry_ms } => {
                let chunk = self.chunks.get_mut(&chunk_id).ok_or_else(|| corrupt(format!("lease of unknown chunk {chunk_id}")))?;
                if chunk.state == ChunkState::Done {
                    return Err(corrupt(format!("lease of done chunk {chunk_id}")));
                }
                chunk.state = ChunkState::Leased { worker_id, lease_expiry_ms: expiry_ms };
            }
            Event::Complete { chunk_id, results, .. } => {
                let chunk = self.chunks.get_mut(&chunk_id).ok_or_else(|| corrupt(format!("completion of unknown chunk {chunk_id}")))?;
                if chunk.state != ChunkState::Done {
                    chunk.state = ChunkState::Done;
                    chunk.results = Some(Arc::new(results));
                }
            }
        }
        Ok(())
    }
}

struct LockGuard<'a>(&'a File);

impl<'a> LockGuard<'a> {
    fn acquire(file: &'a File) -> std::io::Result<Self> {
        file.lock()?;
        Ok(Self(file))
    }
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

pub struct JobStore {
    path: PathBuf,
    file: File,
    state: State,
    offset: u64,
    clock: Arc<dyn Clock>,
    snapshot_every: u64,
    since_snapshot: u64,
}

impl std::fmt::Debug for JobStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobStore").field("path", &self.path).field("offset", &self.offset).finish()
    }
}

fn snapshot_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".snapshot");
    PathBuf::from(p)
}

impl JobStore {
    /// Opens or creates the store at `path`.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut store = Self {
            path,
            file,
            state: State::default(),
            offset: 0,
            clock,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            since_snapshot: 0,
        };
        {
            let file = store.file.try_clone()?;
            let _guard = LockGuard::acquire(&file)?;
            if store.file.metadata()?.len() == 0 {
                let header = serde_json::to_string(&Header { format: STORE_FORMAT.into(), version: STORE_VERSION })
                    .expect("header serializes");
                store.file.write_all(format!("{header}\n").as_bytes())?;
            }
            store.load_snapshot();
            store.catch_up()?;
        }
        Ok(store)
    }

    /// Snapshot after this many locally appended events (0 disables).
    pub fn set_snapshot_every(&mut self, events: u64) {
        self.snapshot_every = events;
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn load_snapshot(&mut self) {
        let Ok(bytes) = std::fs::read(snapshot_path(&self.path)) else {
            return;
        };
        let Ok(snap) = serde_json::from_slice::<Snapshot>(&bytes) else {
            log::warn!("ignoring unreadable snapshot for {}", self.path.display());
            return;
        };
        let len = self.file.metadata().map_or(0, |m| m.len());
        if snap.format != STORE_FORMAT || snap.version != STORE_VERSION || snap.log_offset > len {
            log::warn!("ignoring stale snapshot for {}", self.path.display());
            return;
        }
        self.state.chunks = snap.chunks.into_iter().map(|c| (c.chunk_id, c)).collect();
        self.offset = snap.log_offset;
    }

    /// Applies events appended since the last call. Caller holds the lock.
    fn catch_up(&mut self) -> Result<(), StoreError> {
        let len = self.file.metadata()?.len();
        if len < self.offset {
            return Err(StoreError::Corrupt { offset: len, reason: "log shrank below known offset".into() });
        }
        if len == self.offset {
            return Ok(());
        }
        let mut reader = &self.file;
        reader.seek(SeekFrom::Start(self.offset))?;
        let mut buf = Vec::with_capacity((len - self.offset) as usize);
        reader.take(len - self.offset).read_to_end(&mut buf)?;
        let complete = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < buf.len() {
            log::warn!("truncating torn record at byte {} of {}", self.offset + complete as u64, self.path.display());
            self.file.set_len(self.offset + complete as u64)?;
        }
        let mut pos = self.offset;
        for line in buf[..complete].split_inclusive(|&b| b == b'\n') {
            let body = &line[..line.len() - 1];
            if pos == 0 {
                let header: Header = serde_json::from_slice(body).map_err(|e| StoreError::BadHeader(e.to_string()))?;
                if header.format != STORE_FORMAT || header.version != STORE_VERSION {
                    return Err(StoreError::BadHeader(format!("{} v{}", header.format, header.version)));
                }
            } else if !body.is_empty() {
                let event: Event = serde_json::from_slice(body)
                    .map_err(|e| StoreError::Corrupt { offset: pos, reason: e.to_string() })?;
                self.state.apply(event, pos)?;
            }
            pos += line.len() as u64;
        }
        self.offset = pos;
        Ok(())
    }

    fn append(&mut self, event: Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(&event).expect("event serializes");
        line.push(b'\n');
        self.file.write_all(&line)?;
        let at = self.offset;
        self.offset += line.len() as u64;
        self.state.apply(event, at)?;
        self.since_snapshot += 1;
        if self.snapshot_every > 0 && self.since_snapshot >= self.snapshot_every {
            self.write_snapshot()?;
        }
        Ok(())
    }

    fn write_snapshot(&mut self) -> Result<(), StoreError> {
        let snap = Snapshot {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            log_offset: self.offset,
            chunks: self.state.chunks.values().cloned().collect(),
        };
        let target = snapshot_path(&self.path);
        let tmp = target.with_extension(format!("snapshot.{}.tmp", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes"))?;
        std::fs::rename(tmp, target)?;
        self.since_snapshot = 0;
        Ok(())
    }

    fn locked<T>(&mut self, op: impl FnOnce(&mut Self) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let file = self.file.try_clone()?;
        let _guard = LockGuard::acquire(&file)?;
        self.catch_up()?;
        op(self)
    }

    /// Splits `pairs` into new Pending chunks; sequence numbers continue
    /// after the highest existing one.
    pub fn add_chunks(&mut self, pairs: Vec<CandidatePair>, chunk_size: usize) -> Result<Vec<u64>, StoreError> {
        let chunk_size = chunk_size.max(1);
        self.locked(|s| {
            let mut next_id = s.state.chunks.keys().next_back().map_or(0, |k| k + 1);
            let mut next_seq = s
                .state
                .chunks
                .values()
                .filter_map(|c| c.items.last().map(|i| i.seq + 1))
                .max()
                .unwrap_or(0);
            let mut ids = Vec::new();
            let mut pairs = pairs.into_iter().peekable();
            while pairs.peek().is_some() {
                let items: Vec<JobItem> = pairs
                    .by_ref()
                    .take(chunk_size)
                    .map(|pair| {
                        let item = JobItem { seq: next_seq, pair };
                        next_seq += 1;
                        item
                    })
                    .collect();
                s.append(Event::Create { chunk_id: next_id, items })?;
                ids.push(next_id);
                next_id += 1;
            }
            Ok(ids)
        })
    }

    /// Atomically leases the lowest-id chunk that is Pending or whose lease
    /// has expired. Returns `None` when no such chunk exists.
    pub fn lease_chunk(&mut self, worker_id: &str, lease_ttl: Duration) -> Result<Option<JobChunk>, StoreError> {
        self.locked(|s| {
            let now = s.clock.now_ms();
            let candidate = s.state.chunks.values().find(|c| match &c.state {
                ChunkState::Pending => true,
                ChunkState::Leased { lease_expiry_ms, .. } => *lease_expiry_ms <= now,
                ChunkState::Done => false,
            });
            let Some(chunk_id) = candidate.map(|c| c.chunk_id) else {
                return Ok(None);
            };
            let expiry_ms = now.saturating_add(lease_ttl.as_millis() as u64);
            s.append(Event::Lease { chunk_id, worker_id: worker_id.to_string(), expiry_ms })?;
            Ok(s.state.chunks.get(&chunk_id).cloned())
        })
    }

    /// Marks a leased chunk Done with one result per item. Completing an
    /// already Done chunk is a no-op; completing a chunk re-leased to another
    /// worker fails with `LeaseLost`.
    pub fn complete_chunk(&mut self, chunk_id: u64, worker_id: &str, results: Vec<FetchResult>) -> Result<(), StoreError> {
        self.locked(|s| {
            let chunk = s.state.chunks.get(&chunk_id).ok_or(StoreError::UnknownChunk(chunk_id))?;
            match &chunk.state {
                ChunkState::Done => return Ok(()),
                ChunkState::Leased { worker_id: holder, .. } if holder == worker_id => {}
                _ => {
                    return Err(StoreError::LeaseLost { chunk_id, worker_id: worker_id.to_string() });
                }
            }
            if results.len() != chunk.items.len() {
                return Err(StoreError::ResultCountMismatch { chunk_id, expected: chunk.items.len(), got: results.len() });
            }
            s.append(Event::Complete { chunk_id, worker_id: worker_id.to_string(), results })
        })
    }

    /// Re-reads events appended by other handles.
    pub fn refresh(&mut self) -> Result<(), StoreError> {
        self.locked(|_| Ok(()))
    }

    pub fn snapshot(&mut self) -> Result<(), StoreError> {
        self.locked(Self::write_snapshot)
    }

    pub fn chunk(&self, chunk_id: u64) -> Option<&JobChunk> {
        self.state.chunks.get(&chunk_id)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &JobChunk> {
        self.state.chunks.values()
    }

    pub fn counts(&self) -> StoreCounts {
        let mut c = StoreCounts::default();
        for chunk in self.state.chunks.values() {
            match chunk.state {
                ChunkState::Pending => c.pending += 1,
                ChunkState::Leased { .. } => c.leased += 1,
                ChunkState::Done => c.done += 1,
            }
        }
        c
    }

    /// (item, result) for every Done chunk, in sequence order.
    pub fn completed_items(&self) -> Vec<(JobItem, FetchResult)> {
        let mut out: Vec<(JobItem, FetchResult)> = self
            .state
            .chunks
            .values()
            .filter_map(|c| c.results.as_ref().map(|r| (c, r)))
            .flat_map(|(c, r)| c.items.iter().cloned().zip(r.iter().cloned()))
            .collect();
        out.sort_by_key(|(item, _)| item.seq);
        out
    }
}

/// Every lease event in a log as (chunk_id, worker_id, expiry_ms), in log
/// order.
pub fn lease_history(path: &Path) -> Result<Vec<(u64, String, u64)>, StoreError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        if let Ok(Event::Lease { chunk_id, worker_id, expiry_ms }) = serde_json::from_str(line) {
            out.push((chunk_id, worker_id, expiry_ms));
        }
    }
    Ok(out)
}
