//! Append-only JSONL state log.
//!
//! Every state change of a record appends the full record as one line; the
//! current state of a record is its last valid line. Lines that fail to parse
//! or that make an illegal stage transition are skipped with a warning.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::record::{Stage, SynthRecord};
use crate::gateway::cache::ends_with_newline;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const USAGE_FILE: &str = "usage.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("state store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("injected crash after {0} writes")]
    InjectedCrash(usize),
    #[error("record {record_id}: illegal transition {from:?} -> {to}")]
    IllegalTransition { record_id: String, from: Option<Stage>, to: Stage },
}

/// Reconstructed progress: the latest state of every record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineState {
    pub records: BTreeMap<String, SynthRecord>,
    /// Lines skipped while loading.
    pub skipped_lines: usize,
}

impl PipelineState {
    pub fn get(&self, record_id: &str) -> Option<&SynthRecord> {
        self.records.get(record_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose last state is not terminal; resuming re-verifies them.
    pub fn interrupted(&self) -> impl Iterator<Item = &SynthRecord> {
        self.records.values().filter(|r| !r.stage.is_terminal())
    }

    fn apply(&mut self, record: SynthRecord) -> Result<(), StoreError> {
        let from = self.records.get(&record.record_id).map(|r| r.stage);
        if !record.stage.may_follow(from, record.scheme, record.is_fix()) {
            return Err(StoreError::IllegalTransition { record_id: record.record_id.clone(), from, to: record.stage });
        }
        self.records.insert(record.record_id.clone(), record);
        Ok(())
    }
}

/// Rebuilds state from a log. A missing file yields empty state.
pub fn resume(path: &Path) -> Result<PipelineState, StoreError> {
    let mut state = PipelineState::default();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(state),
        Err(source) => return Err(StoreError::Io { path: path.to_path_buf(), source }),
    };
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    let mut n = 0;
    loop {
        buf.clear();
        let read =
            reader.read_until(b'\n', &mut buf).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
        if read == 0 {
            break;
        }
        n += 1;
        let line = String::from_utf8_lossy(&buf);
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<SynthRecord>(line.trim_end())
            .map_err(|e| e.to_string())
            .and_then(|r| state.apply(r).map_err(|e| e.to_string()));
        if let Err(e) = parsed {
            log::warn!("{}:{n}: skipping corrupt record line: {e}", path.display());
            state.skipped_lines += 1;
        }
    }
    Ok(state)
}

#[derive(Debug)]
struct Inner {
    state: PipelineState,
    writer: Option<File>,
    writes: usize,
    poisoned: bool,
}

/// Single-writer handle on the record log; readers see a consistent
/// in-memory view.
#[derive(Debug)]
pub struct StateStore {
    dir: Option<PathBuf>,
    inner: Mutex<Inner>,
    fail_after: Option<usize>,
}

impl StateStore {
    /// Opens (resuming) the store in `dir`, creating it if needed.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: dir.to_path_buf(), source };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(RECORDS_FILE);
        let state = resume(&path)?;
        let mut writer = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        if !ends_with_newline(&path).map_err(io)? {
            // terminate a torn tail so the next record starts on its own line
            writer.write_all(b"\n").map_err(io)?;
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            inner: Mutex::new(Inner { state, writer: Some(writer), writes: 0, poisoned: false }),
            fail_after: None,
        })
    }

    /// A store with no backing file.
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            inner: Mutex::new(Inner { state: PipelineState::default(), writer: None, writes: 0, poisoned: false }),
            fail_after: None,
        }
    }

    /// Simulates a crash: after `writes` successful appends the next append
    /// writes half a line and fails, and every later append fails too.
    pub fn with_crash_after(mut self, writes: usize) -> Self {
        self.fail_after = Some(writes);
        self
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn records_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(RECORDS_FILE))
    }

    /// Per-record analyzer workspace.
    pub fn workspace(&self, record_id: &str) -> PathBuf {
        match &self.dir {
            Some(d) => d.join("work").join(record_id),
            None => std::env::temp_dir().join(format!("cwesynth-{}", std::process::id())).join(record_id),
        }
    }

    pub fn get(&self, record_id: &str) -> Option<SynthRecord> {
        self.lock().state.get(record_id).cloned()
    }

    pub fn snapshot(&self) -> PipelineState {
        self.lock().state.clone()
    }

    pub fn writes(&self) -> usize {
        self.lock().writes
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append(&self, record: &SynthRecord) -> Result<(), StoreError> {
        let mut inner = self.lock();
        if inner.poisoned {
            return Err(StoreError::InjectedCrash(inner.writes));
        }
        let from = inner.state.get(&record.record_id).map(|r| r.stage);
        if !record.stage.may_follow(from, record.scheme, record.is_fix()) {
            return Err(StoreError::IllegalTransition { record_id: record.record_id.clone(), from, to: record.stage });
        }
        let line = serde_json::to_string(record).expect("record serializes") + "\n";
        let crash = self.fail_after.is_some_and(|n| inner.writes >= n);
        let path = self.records_path();
        if let Some(w) = inner.writer.as_mut() {
            let bytes = if crash { &line.as_bytes()[..line.len() / 2] } else { line.as_bytes() };
            w.write_all(bytes)
                .and_then(|_| w.flush())
                .map_err(|source| StoreError::Io { path: path.unwrap_or_default(), source })?;
        }
        if crash {
            inner.poisoned = true;
            return Err(StoreError::InjectedCrash(inner.writes));
        }
        inner.writes += 1;
        inner.state.apply(record.clone())?;
        Ok(())
    }
}
