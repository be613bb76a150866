//! Append-only event log with periodic snapshots.
//!
//! Each state change is one JSON line `{"seq": n, "event": {...}}`, flushed
//! to disk before the change is applied in memory or acknowledged. A snapshot
//! holds the full state up to `last_seq`. Once it is durably in place the log
//! is truncated. Recovery loads the snapshot and replays every later event.
//! A torn final line (a write cut short by a crash) is discarded.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::state::{Event, StudyState};

const LOG_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    last_seq: u64,
    state: StudyState,
}

enum Backend {
    Disk { dir: PathBuf, log: File },
    Memory,
}

pub struct EventStore {
    backend: Backend,
    next_seq: u64,
    since_snapshot: u64,
    snapshot_every: u64,
}

impl EventStore {
    /// A store that keeps nothing; for simulations and tests that do not
    /// need durability.
    pub fn in_memory() -> Self {
        Self {
            backend: Backend::Memory,
            next_seq: 1,
            since_snapshot: 0,
            snapshot_every: u64::MAX,
        }
    }

    /// Opens (or creates) the store in `dir` and rebuilds the state it holds.
    pub fn open(dir: &Path, snapshot_every: u64) -> Result<(Self, StudyState)> {
        fs::create_dir_all(dir)?;
        let (mut state, last_seq) = match fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes)
                    .map_err(|e| ServiceError::Corrupt(format!("snapshot: {e}")))?;
                (snap.state, snap.last_seq)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (StudyState::default(), 0),
            Err(e) => return Err(e.into()),
        };

        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)?;
        let (replayed, good_len, max_seq) = replay(&mut log, last_seq, &mut state)?;
        let file_len = log.metadata()?.len();
        if good_len < file_len {
            tracing::warn!(
                discarded_bytes = file_len - good_len,
                "discarding torn record at the end of the event log"
            );
            log.set_len(good_len)?;
            log.sync_all()?;
        }
        let store = Self {
            backend: Backend::Disk {
                dir: dir.to_path_buf(),
                log,
            },
            next_seq: max_seq.max(last_seq) + 1,
            since_snapshot: replayed,
            snapshot_every: snapshot_every.max(1),
        };
        Ok((store, state))
    }

    /// Durably appends one event and returns its sequence number.
    pub fn append(&mut self, event: &Event) -> Result<u64> {
        let seq = self.next_seq;
        if let Backend::Disk { log, .. } = &mut self.backend {
            let mut line = serde_json::to_vec(&LogLine {
                seq,
                event: event.clone(),
            })
            .map_err(std::io::Error::other)?;
            line.push(b'\n');
            log.write_all(&line)?;
            log.sync_data()?;
        }
        self.next_seq += 1;
        self.since_snapshot += 1;
        Ok(seq)
    }

    pub fn wants_snapshot(&self) -> bool {
        self.since_snapshot >= self.snapshot_every
    }

    /// Writes a snapshot of `state`, which must reflect every appended event,
    /// then truncates the log.
    pub fn snapshot(&mut self, state: &StudyState) -> Result<()> {
        let last_seq = self.next_seq - 1;
        if let Backend::Disk { dir, log } = &mut self.backend {
            let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
            {
                let mut f = File::create(&tmp)?;
                serde_json::to_writer(
                    &mut f,
                    &Snapshot {
                        last_seq,
                        state: state.clone(),
                    },
                )
                .map_err(std::io::Error::other)?;
                f.sync_all()?;
            }
            fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
            if let Ok(d) = File::open(&*dir) {
                d.sync_all().ok();
            }
            log.set_len(0)?;
            log.sync_all()?;
        }
        self.since_snapshot = 0;
        Ok(())
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }
}

/// Applies logged events newer than `after` to `state`. Returns the number
/// applied, the byte length of the intact prefix, and the highest sequence
/// number seen.
fn replay(log: &mut File, after: u64, state: &mut StudyState) -> Result<(u64, u64, u64)> {
    log.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&*log);
    let mut buf = Vec::new();
    let (mut applied, mut good_len, mut max_seq) = (0u64, 0u64, 0u64);
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let complete = buf.last() == Some(&b'\n');
        match serde_json::from_slice::<LogLine>(&buf) {
            Ok(line) if complete => {
                if line.seq > after {
                    if line.seq <= max_seq.max(after) {
                        return Err(ServiceError::Corrupt(format!(
                            "sequence number {} is out of order",
                            line.seq
                        )));
                    }
                    state
                        .apply(&line.event)
                        .map_err(|e| ServiceError::Corrupt(format!("event {}: {e}", line.seq)))?;
                    applied += 1;
                }
                max_seq = max_seq.max(line.seq);
                good_len += n as u64;
            }
            _ => {
                // Only the final line may be damaged.
                let mut rest = Vec::new();
                std::io::Read::read_to_end(&mut reader, &mut rest)?;
                if rest.iter().any(|b| !b.is_ascii_whitespace()) {
                    return Err(ServiceError::Corrupt(format!(
                        "unreadable record at byte {good_len}"
                    )));
                }
                break;
            }
        }
    }
    Ok((applied, good_len, max_seq))
}
