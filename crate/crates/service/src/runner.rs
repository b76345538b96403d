//! Background execution of registered runs, one worker thread per run.
use std::sync::Arc;
use std::thread::JoinHandle;

use flip_core::federation::{Federation, FederationError};
use flip_core::practitioner::{
    check_adherence, AdherenceEvent, AdherenceKind, AdherenceThresholds, REMEDY_EXPAND_PARTITION,
    REMEDY_RELAX_EPSILON,
};

use crate::error::ServiceError;
use crate::registry::{Control, Registry, RunEvent, RunStatus};

/// Starts a worker for `id` unless one is already attached.
///
/// A run restored from the store is recomputed from its seed; rounds that
/// were already recorded are checked against the recomputation instead of
/// being recorded again.
pub fn start(registry: Arc<Registry>, id: String) -> Result<Option<JoinHandle<()>>, ServiceError> {
    if !registry.claim_worker(&id)? {
        return Ok(None);
    }
    let handle = std::thread::Builder::new()
        .name(format!("flip-{id}"))
        .spawn(move || {
            if let Err(e) = execute(&registry, &id) {
                tracing::warn!(run = %id, error = %e, "run worker failed");
                abort(&registry, &id, e.to_string());
            }
            registry.release_worker(&id);
        })
        .map_err(|e| ServiceError::Internal(format!("cannot spawn worker: {e}")))?;
    Ok(Some(handle))
}

fn abort(registry: &Registry, id: &str, diagnostic: String) {
    if let Ok(state) = registry.get(id) {
        if !state.status.is_terminal() {
            let _ = registry.transition(id, RunStatus::Aborted, Some(diagnostic));
        }
    }
}

fn setup_warning(e: &FederationError) -> Option<AdherenceEvent> {
    matches!(e, FederationError::Accountant { .. }).then(|| AdherenceEvent {
        round: 0,
        kind: AdherenceKind::CalibrationFailure,
        message: e.to_string(),
        remedies: vec![REMEDY_RELAX_EPSILON.to_string(), REMEDY_EXPAND_PARTITION.to_string()],
    })
}

fn execute(registry: &Registry, id: &str) -> Result<(), ServiceError> {
    let state = registry.get(id)?;
    match state.status {
        RunStatus::Pending => {
            registry.transition(id, RunStatus::Running, None)?;
        }
        RunStatus::Running | RunStatus::Paused => {}
        RunStatus::Done | RunStatus::Aborted => return Ok(()),
    }
    let spec = state.spec;
    let (train, test) = spec.simulation.data.generate_split();
    let mut fed = match Federation::new(spec.simulation.federation.clone(), &train, &test) {
        Ok(fed) => fed,
        Err(e) => {
            if let Some(warning) = setup_warning(&e) {
                registry.record(id, RunEvent::Warning { warning })?;
            }
            abort(registry, id, e.to_string());
            return Ok(());
        }
    };
    let clients = fed.record().clients.clone();
    if state.clients.is_empty() {
        registry.record(id, RunEvent::Setup { clients })?;
    } else if state.clients != clients {
        abort(registry, id, "client setup differs from the recorded run".into());
        return Ok(());
    }

    let recorded = state.rounds;
    let thresholds = AdherenceThresholds::default();
    while !fed.is_finished() {
        let index = fed.rounds_done() as usize;
        let replaying = index < recorded.len();
        if !replaying && registry.await_control(id) == Control::Stop {
            return Ok(());
        }
        let metrics = match fed.run_round() {
            Ok(m) => m.clone(),
            Err(e) => {
                abort(registry, id, e.to_string());
                return Ok(());
            }
        };
        if replaying {
            if metrics != recorded[index] {
                abort(registry, id, format!("round {} diverged from the recorded run", index + 1));
                return Ok(());
            }
            continue;
        }
        if registry.get(id)?.status.is_terminal() {
            return Ok(());
        }
        registry.record(id, RunEvent::RoundComplete { round: metrics.round, metrics })?;
        if let Some(req) = &spec.requirements {
            let known = registry.get(id)?.warnings;
            for warning in check_adherence(fed.record(), req, &thresholds) {
                if !known.contains(&warning) {
                    registry.record(id, RunEvent::Warning { warning })?;
                }
            }
        }
    }
    if registry.await_control(id) == Control::Proceed {
        registry.transition(id, RunStatus::Done, None)?;
    }
    Ok(())
}
