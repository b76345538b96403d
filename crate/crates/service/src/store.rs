//! On-disk store: one append-only event log and one snapshot per run, plus
//! an audit log of recommendations.
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::registry::{RunEvent, RunState};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

const EVENTS: &str = "events.jsonl";
const SNAPSHOT: &str = "snapshot.json";
const AUDIT: &str = "audit.jsonl";

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

impl Store {
    /// Opens or creates a store rooted at `root`; fails if it is not writable.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let runs = root.join("runs");
        fs::create_dir_all(&runs).map_err(io(&runs))?;
        let probe = root.join(".write-probe");
        File::create(&probe).map_err(io(&probe))?;
        fs::remove_file(&probe).map_err(io(&probe))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn events_path(&self, id: &str) -> PathBuf {
        self.run_dir(id).join(EVENTS)
    }

    pub fn snapshot_path(&self, id: &str) -> PathBuf {
        self.run_dir(id).join(SNAPSHOT)
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join(AUDIT)
    }

    pub fn append(&self, id: &str, event: &RunEvent) -> Result<(), StoreError> {
        let dir = self.run_dir(id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        append_line(&dir.join(EVENTS), event)
    }

    /// Atomically replaces the snapshot of `state`.
    pub fn write_snapshot(&self, state: &RunState) -> Result<(), StoreError> {
        let path = self.snapshot_path(&state.id);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(state).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        fs::write(&tmp, body).map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))
    }

    pub fn read_snapshot(&self, id: &str) -> Option<RunState> {
        let text = fs::read_to_string(self.snapshot_path(id)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Event logs of every stored run, ordered by run id.
    pub fn load_all(&self) -> Result<Vec<Vec<RunEvent>>, StoreError> {
        let runs = self.root.join("runs");
        let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
            .map_err(io(&runs))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(EVENTS).is_file())
            .collect();
        dirs.sort();
        dirs.iter().map(|d| read_events(&d.join(EVENTS))).collect()
    }

    pub fn audit<T: Serialize>(&self, entry: &T) -> Result<(), StoreError> {
        append_line(&self.audit_path(), entry)
    }
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_string(value).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
    f.write_all(line.as_bytes()).map_err(io(path))?;
    f.flush().map_err(io(path))
}

fn read_events(path: &Path) -> Result<Vec<RunEvent>, StoreError> {
    let f = File::open(path).map_err(io(path))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| StoreError::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)))?;
        events.push(event);
    }
    Ok(events)
}
