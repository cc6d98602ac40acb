//! Append-only JSON-lines event logs with periodic state snapshots.
//!
//! Trial `id` lives in `<dir>/<id>.events.jsonl`, one event per line, and
//! `<dir>/<id>.snapshot.json`, the state after some prefix of the log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{apply, replay, Event, TrialState};

/// Events between snapshots.
pub const SNAPSHOT_EVERY: u64 = 32;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("trial {0:?} not found")]
    NotFound(String),
    #[error("trial {0:?} already exists")]
    Exists(String),
    #[error("invalid trial id {0:?}: use 1-64 letters, digits, '-' or '_'")]
    InvalidId(String),
    #[error("corrupt log for trial {id:?} at line {line}: {message}")]
    Corrupt {
        id: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    state: TrialState,
}

#[derive(Debug, Clone)]
pub struct JsonlStore {
    dir: PathBuf,
}

pub fn valid_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl JsonlStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.events.jsonl"))
    }

    fn snapshot_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.snapshot.json"))
    }

    fn check(id: &str) -> Result<(), StoreError> {
        if valid_id(id) {
            Ok(())
        } else {
            Err(StoreError::InvalidId(id.into()))
        }
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_id(id) && self.log_path(id).exists()
    }

    /// Writes the genesis events of a new trial.
    pub fn create(&self, id: &str, events: &[Event]) -> Result<(), StoreError> {
        Self::check(id)?;
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.log_path(id))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => StoreError::Exists(id.into()),
                _ => StoreError::Io(e),
            })?;
        write_events(&mut f, events)?;
        Ok(())
    }

    /// Appends events and refreshes the snapshot when due.
    pub fn append(&self, state: &TrialState, events: &[Event]) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let id = &state.trial_id;
        Self::check(id)?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(self.log_path(id))
            .map_err(|_| StoreError::NotFound(id.clone()))?;
        write_events(&mut f, events)?;
        let first = events[0].seq;
        if (first..state.n_events).any(|n| (n + 1) % SNAPSHOT_EVERY == 0) {
            self.write_snapshot(state)?;
        }
        Ok(())
    }

    fn write_snapshot(&self, state: &TrialState) -> Result<(), StoreError> {
        let path = self.snapshot_path(&state.trial_id);
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec(&Snapshot { state: state.clone() }).expect("state serializes");
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_data()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn events(&self, id: &str) -> Result<Vec<Event>, StoreError> {
        Self::check(id)?;
        let f = File::open(self.log_path(id)).map_err(|_| StoreError::NotFound(id.into()))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Event = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                id: id.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if e.seq != out.len() as u64 {
                return Err(StoreError::Corrupt {
                    id: id.into(),
                    line: i + 1,
                    message: format!("sequence number {} where {} was expected", e.seq, out.len()),
                });
            }
            out.push(e);
        }
        Ok(out)
    }

    /// Current state, from the snapshot plus the events logged after it.
    pub fn load(&self, id: &str) -> Result<(TrialState, Vec<Event>), StoreError> {
        let events = self.events(id)?;
        let snapshot = fs::read(self.snapshot_path(id))
            .ok()
            .and_then(|b| serde_json::from_slice::<Snapshot>(&b).ok())
            .filter(|s| s.state.n_events as usize <= events.len());
        let state = match snapshot {
            Some(s) => {
                let from = s.state.n_events as usize;
                events[from..].iter().fold(s.state, |st, e| apply(Some(st), e))
            }
            None => replay(&events).ok_or_else(|| StoreError::Corrupt {
                id: id.into(),
                line: 0,
                message: "empty log".into(),
            })?,
        };
        Ok((state, events))
    }

    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()
                    .and_then(|n| n.strip_suffix(".events.jsonl"))
                    .map(str::to_owned)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}

fn write_events(f: &mut File, events: &[Event]) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    for e in events {
        serde_json::to_writer(&mut buf, e).expect("event serializes");
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    f.sync_data()?;
    Ok(())
}
