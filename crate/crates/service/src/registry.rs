//! Run registry: status machine, event history and persistence hooks.
use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, MutexGuard};

use flip_core::federation::{ClientSetup, RoundMetrics, SimulationConfig};
use flip_core::practitioner::{AdherenceEvent, Requirements};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::store::{Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Paused,
    Done,
    Aborted,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Aborted)
    }

    pub fn can_become(self, to: RunStatus) -> bool {
        use RunStatus::*;
        matches!(
            (self, to),
            (Pending, Running)
                | (Pending, Aborted)
                | (Running, Paused)
                | (Running, Done)
                | (Running, Aborted)
                | (Paused, Running)
                | (Paused, Aborted)
        )
    }
}

/// What a client submits to start a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub simulation: SimulationConfig,
    /// Enables adherence warnings.
    #[serde(default)]
    pub requirements: Option<Requirements>,
}

/// Everything that happens to a run, in order. Replaying the events of a
/// run rebuilds its [`RunState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    Created { id: String, spec: RunSpec },
    Status { status: RunStatus, reason: Option<String> },
    Setup { clients: Vec<ClientSetup> },
    RoundComplete { round: u32, metrics: RoundMetrics },
    Warning { warning: AdherenceEvent },
    Done { status: RunStatus, diagnostic: Option<String>, max_accuracy: Option<f64> },
}

impl RunEvent {
    /// Events streamed to run followers.
    pub fn is_public(&self) -> bool {
        !matches!(self, RunEvent::Created { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub id: String,
    pub status: RunStatus,
    pub spec: RunSpec,
    pub clients: Vec<ClientSetup>,
    pub rounds: Vec<RoundMetrics>,
    pub warnings: Vec<AdherenceEvent>,
    pub diagnostic: Option<String>,
    /// Number of events applied.
    pub events: u64,
}

impl RunState {
    pub fn from_events(events: &[RunEvent]) -> Result<Self, ServiceError> {
        let Some(RunEvent::Created { id, spec }) = events.first() else {
            return Err(ServiceError::Internal("event log does not start with a creation event".into()));
        };
        let mut state = RunState {
            id: id.clone(),
            status: RunStatus::Pending,
            spec: spec.clone(),
            clients: Vec::new(),
            rounds: Vec::new(),
            warnings: Vec::new(),
            diagnostic: None,
            events: 1,
        };
        for e in &events[1..] {
            state.apply(e)?;
        }
        Ok(state)
    }

    pub fn apply(&mut self, event: &RunEvent) -> Result<(), ServiceError> {
        match event {
            RunEvent::Created { .. } => {
                return Err(ServiceError::Internal(format!("run {} created twice", self.id)));
            }
            RunEvent::Status { status, .. } => {
                if status.is_terminal() || !self.status.can_become(*status) {
                    return Err(self.bad_transition(*status));
                }
                self.status = *status;
            }
            RunEvent::Setup { clients } => self.clients = clients.clone(),
            RunEvent::RoundComplete { round, metrics } => {
                if *round as usize != self.rounds.len() + 1 || self.status.is_terminal() {
                    return Err(ServiceError::Internal(format!(
                        "run {}: round {round} out of order after {} rounds",
                        self.id,
                        self.rounds.len()
                    )));
                }
                self.rounds.push(metrics.clone());
            }
            RunEvent::Warning { warning } => self.warnings.push(warning.clone()),
            RunEvent::Done { status, diagnostic, .. } => {
                if !status.is_terminal() || !self.status.can_become(*status) {
                    return Err(self.bad_transition(*status));
                }
                self.status = *status;
                self.diagnostic = diagnostic.clone();
            }
        }
        self.events += 1;
        Ok(())
    }

    fn bad_transition(&self, to: RunStatus) -> ServiceError {
        ServiceError::Conflict(format!(
            "run {} cannot go from {:?} to {:?}",
            self.id, self.status, to
        ))
    }

    pub fn max_accuracy(&self) -> Option<f64> {
        self.rounds.iter().map(|r| r.accuracy).reduce(f64::max)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            id: self.id.clone(),
            status: self.status,
            rounds_done: self.rounds.len() as u32,
            rounds_total: self.spec.simulation.federation.rounds,
            max_accuracy: self.max_accuracy(),
            warnings: self.warnings.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub status: RunStatus,
    pub rounds_done: u32,
    pub rounds_total: u32,
    pub max_accuracy: Option<f64>,
    pub warnings: usize,
}

/// What a worker should do at a round boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Proceed,
    Stop,
}

struct Entry {
    state: RunState,
    events: Vec<RunEvent>,
    worker: bool,
}

struct Inner {
    runs: BTreeMap<u64, Entry>,
    next: u64,
}

pub struct Registry {
    inner: Mutex<Inner>,
    changed: Condvar,
    store: Store,
}

fn run_id(seq: u64) -> String {
    format!("run-{seq:06}")
}

fn parse_id(id: &str) -> Option<u64> {
    id.strip_prefix("run-")?.parse().ok()
}

pub const RESTART_REASON: &str = "service restarted while the run was active";

impl Registry {
    /// Loads every persisted run. Runs that were active when the previous
    /// process stopped come back paused.
    pub fn open(store: Store) -> Result<Self, StoreError> {
        let mut runs = BTreeMap::new();
        for events in store.load_all()? {
            let state = RunState::from_events(&events).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            let seq = parse_id(&state.id).ok_or_else(|| StoreError::Corrupt(format!("bad run id {}", state.id)))?;
            // The event log is authoritative; a stale snapshot is rewritten.
            if store.read_snapshot(&state.id).as_ref() != Some(&state) {
                store.write_snapshot(&state)?;
            }
            runs.insert(seq, Entry { state, events, worker: false });
        }
        let next = runs.keys().next_back().map_or(1, |k| k + 1);
        let registry = Registry {
            inner: Mutex::new(Inner { runs, next }),
            changed: Condvar::new(),
            store,
        };
        let active: Vec<String> = registry
            .lock()
            .runs
            .values()
            .filter(|e| e.state.status == RunStatus::Running)
            .map(|e| e.state.id.clone())
            .collect();
        for id in active {
            registry
                .record(&id, RunEvent::Status { status: RunStatus::Paused, reason: Some(RESTART_REASON.into()) })
                .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        }
        Ok(registry)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn create(&self, spec: RunSpec) -> Result<RunState, ServiceError> {
        let mut inner = self.lock();
        let seq = inner.next;
        inner.next += 1;
        let id = run_id(seq);
        let event = RunEvent::Created { id: id.clone(), spec };
        self.store.append(&id, &event).map_err(internal)?;
        let state = RunState::from_events(std::slice::from_ref(&event))?;
        self.store.write_snapshot(&state).map_err(internal)?;
        inner.runs.insert(seq, Entry { state: state.clone(), events: vec![event], worker: false });
        Ok(state)
    }

    /// Validates, persists and applies `event`.
    pub fn record(&self, id: &str, event: RunEvent) -> Result<RunState, ServiceError> {
        let mut inner = self.lock();
        let entry = entry_mut(&mut inner, id)?;
        let mut next = entry.state.clone();
        next.apply(&event)?;
        self.store.append(id, &event).map_err(internal)?;
        self.store.write_snapshot(&next).map_err(internal)?;
        entry.state = next.clone();
        entry.events.push(event);
        drop(inner);
        self.changed.notify_all();
        Ok(next)
    }

    pub fn transition(&self, id: &str, to: RunStatus, reason: Option<String>) -> Result<RunState, ServiceError> {
        let event = if to.is_terminal() {
            RunEvent::Done { status: to, diagnostic: reason, max_accuracy: self.get(id)?.max_accuracy() }
        } else {
            RunEvent::Status { status: to, reason }
        };
        self.record(id, event)
    }

    pub fn get(&self, id: &str) -> Result<RunState, ServiceError> {
        let mut inner = self.lock();
        Ok(entry_mut(&mut inner, id)?.state.clone())
    }

    pub fn list(&self) -> Vec<RunSummary> {
        self.lock().runs.values().map(|e| e.state.summary()).collect()
    }

    pub fn states(&self) -> Vec<RunState> {
        self.lock().runs.values().map(|e| e.state.clone()).collect()
    }

    /// Public events from index `cursor` on, the next cursor, and whether
    /// the run has finished.
    pub fn events_since(&self, id: &str, cursor: usize) -> Result<(Vec<RunEvent>, usize, bool), ServiceError> {
        let mut inner = self.lock();
        let entry = entry_mut(&mut inner, id)?;
        let events = entry.events.iter().skip(cursor).filter(|e| e.is_public()).cloned().collect();
        Ok((events, entry.events.len(), entry.state.status.is_terminal()))
    }

    /// Claims the worker slot of a run; false if a worker already holds it.
    pub fn claim_worker(&self, id: &str) -> Result<bool, ServiceError> {
        let mut inner = self.lock();
        let entry = entry_mut(&mut inner, id)?;
        if entry.worker {
            return Ok(false);
        }
        entry.worker = true;
        Ok(true)
    }

    pub fn release_worker(&self, id: &str) {
        if let Ok(entry) = entry_mut(&mut self.lock(), id) {
            entry.worker = false;
        }
        self.changed.notify_all();
    }

    /// Blocks while the run is paused.
    pub fn await_control(&self, id: &str) -> Control {
        let mut inner = self.lock();
        loop {
            let status = match entry_mut(&mut inner, id) {
                Ok(e) => e.state.status,
                Err(_) => return Control::Stop,
            };
            match status {
                RunStatus::Running => return Control::Proceed,
                RunStatus::Paused | RunStatus::Pending => {
                    inner = self.changed.wait(inner).unwrap_or_else(|p| p.into_inner());
                }
                RunStatus::Done | RunStatus::Aborted => return Control::Stop,
            }
        }
    }

    /// Blocks until no worker holds the run or `timeout` passes.
    pub fn wait_idle(&self, id: &str, timeout: std::time::Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            match entry_mut(&mut inner, id) {
                Ok(e) if e.worker => {}
                _ => return true,
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return false;
            }
            inner = self.changed.wait_timeout(inner, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }
}

fn entry_mut<'a>(inner: &'a mut Inner, id: &str) -> Result<&'a mut Entry, ServiceError> {
    parse_id(id)
        .and_then(|seq| inner.runs.get_mut(&seq))
        .ok_or_else(|| ServiceError::NotFound(format!("no run with id {id:?}")))
}

fn internal(e: StoreError) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use RunStatus::*;

    #[test]
    fn transition_table() {
        let all = [Pending, Running, Paused, Done, Aborted];
        let allowed: Vec<_> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_become(*b))
            .collect();
        assert_eq!(
            allowed,
            vec![
                (Pending, Running),
                (Pending, Aborted),
                (Running, Paused),
                (Running, Done),
                (Running, Aborted),
                (Paused, Running),
                (Paused, Aborted),
            ]
        );
        assert!(all.iter().all(|s| !Done.can_become(*s) && !Aborted.can_become(*s)));
    }

    #[test]
    fn ids_parse_back() {
        assert_eq!(parse_id(&run_id(42)), Some(42));
        assert_eq!(parse_id("run-x"), None);
        assert_eq!(parse_id("42"), None);
    }
}
