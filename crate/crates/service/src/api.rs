//! HTTP/JSON routes.
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flip_core::federation::aggregation_weights;
use flip_core::partition::{partition_sizes, PartitionPolicy};
use flip_core::practitioner::{recommend, PolicyTable, PractitionerError, Recommendation, Requirements};
use futures::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrateRequest};
use crate::error::ServiceError;
use crate::registry::{Registry, RunEvent, RunSpec, RunState, RunStatus, RunSummary};
use crate::runner;

/// Poll interval of followed run streams.
const FOLLOW_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub policy: PolicyTable,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/calibrate", post(calibrate_handler))
        .route("/partitions", get(partitions_handler))
        .route("/recommend", post(recommend_handler))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/rounds", get(run_rounds))
        .route("/runs/{id}/pause", post(pause_run))
        .route("/runs/{id}/resume", post(resume_run))
        .route("/runs/{id}/abort", post(abort_run))
        .route("/runs/{id}/warnings", get(run_warnings))
        .with_state(state)
}

/// Starts workers for runs that were submitted but never started.
pub fn resume_pending(registry: &Arc<Registry>) -> Result<(), ServiceError> {
    for run in registry.list() {
        if run.status == RunStatus::Pending {
            runner::start(registry.clone(), run.id)?;
        }
    }
    Ok(())
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker task failed: {e}")))?
}

async fn calibrate_handler(body: Bytes) -> Result<Response, ServiceError> {
    let req: CalibrateRequest = parse_json(&body)?;
    let resp = blocking(move || calibrate(&req)).await?;
    Ok(Json(resp).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionQuery {
    n: u64,
    k: usize,
    policy: String,
}

#[derive(Debug, Serialize)]
struct PartitionResponse {
    n: u64,
    k: usize,
    policy: PartitionPolicy,
    sizes: Vec<u64>,
    weights: Vec<f64>,
}

async fn partitions_handler(query: Result<Query<PartitionQuery>, axum::extract::rejection::QueryRejection>) -> Result<Response, ServiceError> {
    let Query(q) = query.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let policy: PartitionPolicy = q.policy.parse().map_err(|e: flip_core::partition::PartitionError| ServiceError::BadRequest(e.to_string()))?;
    let sizes = partition_sizes(q.n, q.k, policy).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let weights = aggregation_weights(&sizes);
    Ok(Json(PartitionResponse { n: q.n, k: q.k, policy, sizes, weights }).into_response())
}

/// One line of the recommendation audit log.
#[derive(Debug, Serialize)]
struct AuditEntry<'a> {
    requirements: &'a Requirements,
    policy_table: &'a PolicyTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    recommendation: Option<&'a Recommendation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn practitioner_error(e: PractitionerError) -> ServiceError {
    match e {
        PractitionerError::Calibration { ref remedies, .. } => ServiceError::Unsatisfiable {
            message: e.to_string(),
            remedies: remedies.clone(),
        },
        other => ServiceError::BadRequest(other.to_string()),
    }
}

async fn recommend_handler(State(app): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let req: Requirements = parse_json(&body)?;
    let policy = app.policy;
    let registry = app.registry.clone();
    let rec = blocking(move || {
        let outcome = recommend(&req, &policy);
        let entry = AuditEntry {
            requirements: &req,
            policy_table: &policy,
            recommendation: outcome.as_ref().ok(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
        };
        registry.store().audit(&entry).map_err(|e| ServiceError::Internal(e.to_string()))?;
        outcome.map_err(practitioner_error)
    })
    .await?;
    Ok(Json(rec).into_response())
}

async fn create_run(State(app): State<AppState>, body: Bytes) -> Result<Response, ServiceError> {
    let spec: RunSpec = parse_json(&body)?;
    spec.simulation
        .federation
        .validate()
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    if let Some(req) = &spec.requirements {
        req.validate().map_err(practitioner_error)?;
    }
    let registry = app.registry.clone();
    let state = blocking(move || {
        let state = registry.create(spec)?;
        runner::start(registry, state.id.clone())?;
        Ok(state)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(state.summary())).into_response())
}

async fn list_runs(State(app): State<AppState>) -> Json<Vec<RunSummary>> {
    Json(app.registry.list())
}

async fn get_run(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<RunState>, ServiceError> {
    Ok(Json(app.registry.get(&id)?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamQuery {
    /// Keep the stream open until the run finishes.
    #[serde(default)]
    follow: bool,
    /// `ndjson` (default) or `sse`.
    #[serde(default)]
    format: Option<String>,
}

fn event_stream(registry: Arc<Registry>, id: String, follow: bool) -> impl Stream<Item = RunEvent> + Send {
    stream::unfold((0usize, false), move |(mut cursor, done)| {
        let registry = registry.clone();
        let id = id.clone();
        async move {
            if done {
                return None;
            }
            loop {
                let (events, next, finished) = registry.events_since(&id, cursor).ok()?;
                cursor = next;
                let done = !follow || finished;
                if !events.is_empty() || done {
                    return Some((stream::iter(events), (cursor, done)));
                }
                tokio::time::sleep(FOLLOW_INTERVAL).await;
            }
        }
    })
    .flatten()
}

async fn run_rounds(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    query: Result<Query<StreamQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(q) = query.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    app.registry.get(&id)?;
    let wants_sse = match q.format.as_deref() {
        Some("sse") => true,
        Some("ndjson") => false,
        Some(other) => return Err(ServiceError::BadRequest(format!("unknown stream format {other:?}"))),
        None => headers
            .get(header::ACCEPT)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.contains("text/event-stream")),
    };
    let events = event_stream(app.registry.clone(), id, q.follow);
    if wants_sse {
        let sse = events.map(|e| {
            let kind = event_kind(&e);
            Ok::<_, Infallible>(Event::default().event(kind).data(serde_json::to_string(&e).unwrap_or_default()))
        });
        return Ok(Sse::new(sse).keep_alive(KeepAlive::default()).into_response());
    }
    let lines = events.map(|e| {
        let mut line = serde_json::to_vec(&e).unwrap_or_default();
        line.push(b'\n');
        Ok::<_, Infallible>(Bytes::from(line))
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(lines)).into_response())
}

fn event_kind(e: &RunEvent) -> &'static str {
    match e {
        RunEvent::Created { .. } => "created",
        RunEvent::Status { .. } => "status",
        RunEvent::Setup { .. } => "setup",
        RunEvent::RoundComplete { .. } => "round_complete",
        RunEvent::Warning { .. } => "warning",
        RunEvent::Done { .. } => "done",
    }
}

async fn control(app: AppState, id: String, to: RunStatus, reason: &'static str) -> Result<Json<RunSummary>, ServiceError> {
    let registry = app.registry.clone();
    blocking(move || {
        let state = registry.transition(&id, to, Some(reason.to_string()))?;
        if to == RunStatus::Running {
            runner::start(registry.clone(), id)?;
        }
        Ok(Json(state.summary()))
    })
    .await
}

async fn pause_run(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<RunSummary>, ServiceError> {
    control(app, id, RunStatus::Paused, "paused by request").await
}

async fn resume_run(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<RunSummary>, ServiceError> {
    control(app, id, RunStatus::Running, "resumed by request").await
}

async fn abort_run(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<RunSummary>, ServiceError> {
    control(app, id, RunStatus::Aborted, "aborted by request").await
}

async fn run_warnings(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Vec<flip_core::practitioner::AdherenceEvent>>, ServiceError> {
    Ok(Json(app.registry.get(&id)?.warnings))
}
