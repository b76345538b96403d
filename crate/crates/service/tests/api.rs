mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use flip_core::practitioner::{PolicyTable, Requirements};
use flip_service::api::{router, AppState};
use flip_service::registry::{Registry, RunSpec, RunState, RunStatus};
use flip_service::store::Store;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path) -> Router {
    let registry = Arc::new(Registry::open(Store::open(dir).unwrap()).unwrap());
    router(AppState { registry, policy: PolicyTable::default() })
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, content_type)
}

async fn send_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes, _) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_for(app: &Router, id: &str, pred: impl Fn(&RunState) -> bool) -> RunState {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (status, bytes, _) = send(app, Method::GET, &format!("/runs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let state: RunState = serde_json::from_slice(&bytes).unwrap();
        if pred(&state) {
            return state;
        }
        assert!(Instant::now() < deadline, "timed out waiting on {id}: {:?}", state.status);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn qqp_iid(scheme: &str) -> Value {
    json!({
        "epsilon": [10.0, 6.0],
        "delta": 1e-6,
        "scheme": scheme,
        "batch": 550,
        "dataset_size": 90962,
        "rounds": 5
    })
}

#[tokio::test]
async fn calibrate_is_pure_and_orders_the_accountants() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s1, a, _) = send(&app, Method::POST, "/calibrate", Some(qqp_iid("poisson"))).await;
    let (s2, b, _) = send(&app, Method::POST, "/calibrate", Some(qqp_iid("poisson"))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let poisson: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(poisson["steps"], 830);
    assert_eq!(poisson["adjacency"], "add-remove");
    let (_, fixed) = send_json(&app, Method::POST, "/calibrate", Some(qqp_iid("fixed"))).await;
    assert_eq!(fixed["adjacency"], "replace-one");
    for i in 0..2 {
        let p = poisson["results"][i]["sigma"].as_f64().unwrap();
        let f = fixed["results"][i]["sigma"].as_f64().unwrap();
        assert!((1.7..=2.1).contains(&(f / p)), "{f} / {p}");
        assert!(poisson["results"][i]["achieved_epsilon"].as_f64().unwrap() <= poisson["results"][i]["epsilon"].as_f64().unwrap());
    }
}

#[tokio::test]
async fn calibrate_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, body) = send_json(&app, Method::POST, "/calibrate", Some(json!({"epsilon": 10}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad-request");
    let mut unreachable = qqp_iid("poisson");
    unreachable["epsilon"] = json!(1e-9);
    let (status, body) = send_json(&app, Method::POST, "/calibrate", Some(unreachable)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!body["remedies"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn partitions_match_reference_rows_and_are_pure() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let uri = "/partitions?n=67349&k=4&policy=square";
    let (status, a, content_type) = send(&app, Method::GET, uri, None).await;
    let (_, b, _) = send(&app, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(content_type.as_deref(), Some("application/json"));
    assert_eq!(a, b);
    let body: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(body["sizes"], json!([2244, 8979, 20204, 35922]));
    let (status, body) = send_json(&app, Method::GET, "/partitions?n=10&k=4&policy=exponential", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad-request");
    let (status, _) = send_json(&app, Method::GET, "/partitions?n=100&k=4&policy=zipf", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send_json(&app, Method::GET, "/partitions?n=100", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn recommendations_are_audited() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let req = json!({
        "privacy_goal": {"kind": "mitigate-reconstruction"},
        "clients": 4,
        "memory_budget": 100000,
        "model_units": 42,
        "dataset_size": 67349,
        "partition_hint": "iid"
    });
    serde_json::from_value::<Requirements>(req.clone()).unwrap();
    let (status, rec) = send_json(&app, Method::POST, "/recommend", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rec["epsilon"], 10.0);
    assert_eq!(rec["accountant"], "poisson-rdp");

    let mut tight = req;
    tight["privacy_goal"] = json!({"kind": "mitigate-mia"});
    tight["memory_budget"] = json!(442);
    let (_, rec) = send_json(&app, Method::POST, "/recommend", Some(tight)).await;
    assert_eq!(rec["epsilon"], 6.0);
    assert_eq!(rec["accountant"], "fixed-size-rdp");
    assert_eq!(rec["batch_size"], 400);

    let audit = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    let lines: Vec<Value> = audit.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["requirements"]["memory_budget"], 100000);
    assert_eq!(lines[1]["recommendation"]["accountant"], "fixed-size-rdp");
}

#[tokio::test]
async fn runs_stream_monotone_rounds_and_finish() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let spec = serde_json::to_value(common::spec(4, 800)).unwrap();
    let (status, created) = send_json(&app, Method::POST, "/runs", Some(spec)).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["id"].as_str().unwrap().to_string();

    // A followed stream ends with the terminal event.
    let (status, body, content_type) = send(&app, Method::GET, &format!("/runs/{id}/rounds?follow=true"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(content_type.as_deref(), Some("application/x-ndjson"));
    let events: Vec<Value> = String::from_utf8(body).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let rounds: Vec<u64> = events
        .iter()
        .filter(|e| e["type"] == "round_complete")
        .map(|e| e["round"].as_u64().unwrap())
        .collect();
    assert_eq!(rounds, vec![1, 2, 3, 4]);
    assert_eq!(events.last().unwrap()["type"], "done");
    assert_eq!(events.last().unwrap()["status"], "done");

    let state = wait_for(&app, &id, |s| s.status.is_terminal()).await;
    assert_eq!(state.rounds.len(), 4);
    let (_, list) = send_json(&app, Method::GET, "/runs", None).await;
    assert_eq!(list[0]["id"], id.as_str());
    assert_eq!(list[0]["rounds_done"], 4);
    let (status, warnings) = send_json(&app, Method::GET, &format!("/runs/{id}/warnings"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(warnings, json!([]));

    // Server-sent events carry the same stream.
    let (status, body, content_type) = send(&app, Method::GET, &format!("/runs/{id}/rounds?format=sse"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(content_type.unwrap().starts_with("text/event-stream"));
    let text = String::from_utf8(body).unwrap();
    assert_eq!(text.matches("event: round_complete").count(), 4);
    assert!(text.contains("event: done"));
}

#[tokio::test]
async fn pause_resume_abort() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let spec = serde_json::to_value(common::spec(400, 4000)).unwrap();
    let (_, created) = send_json(&app, Method::POST, "/runs", Some(spec)).await;
    let id = created["id"].as_str().unwrap().to_string();
    wait_for(&app, &id, |s| s.status == RunStatus::Running).await;

    let (status, paused) = send_json(&app, Method::POST, &format!("/runs/{id}/pause"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(paused["status"], "paused");
    // At most the round in flight completes after the pause.
    tokio::time::sleep(Duration::from_millis(300)).await;
    let a = wait_for(&app, &id, |_| true).await.rounds.len();
    tokio::time::sleep(Duration::from_millis(300)).await;
    let b = wait_for(&app, &id, |_| true).await.rounds.len();
    assert_eq!(a, b);
    assert!(b < 400);

    let (status, _) = send_json(&app, Method::POST, &format!("/runs/{id}/pause"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, resumed) = send_json(&app, Method::POST, &format!("/runs/{id}/resume"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resumed["status"], "running");
    wait_for(&app, &id, |s| s.rounds.len() > b).await;

    let (status, aborted) = send_json(&app, Method::POST, &format!("/runs/{id}/abort"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(aborted["status"], "aborted");
    let state = wait_for(&app, &id, |_| true).await;
    assert_eq!(state.diagnostic.as_deref(), Some("aborted by request"));
    let (status, body) = send_json(&app, Method::POST, &format!("/runs/{id}/resume"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");
    tokio::time::sleep(Duration::from_millis(200)).await;
    assert_eq!(wait_for(&app, &id, |_| true).await.rounds.len(), state.rounds.len());
}

#[tokio::test]
async fn memory_overruns_surface_as_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let mut simulation = common::simulation(2, 800, 5);
    simulation.federation.privacy.accountant = flip_core::federation::AccountantKind::PoissonRdp;
    let requirements: Requirements = serde_json::from_value(json!({
        "privacy_goal": {"kind": "regulatory-epsilon", "value": 8.0},
        "clients": 2,
        "memory_budget": 6 + 50,
        "model_units": 6,
        "dataset_size": 640
    }))
    .unwrap();
    let spec = RunSpec { simulation, requirements: Some(requirements) };
    let (_, created) = send_json(&app, Method::POST, "/runs", Some(serde_json::to_value(spec).unwrap())).await;
    let id = created["id"].as_str().unwrap().to_string();
    let state = wait_for(&app, &id, |s| s.status.is_terminal()).await;
    assert_eq!(state.status, RunStatus::Done);
    let (_, warnings) = send_json(&app, Method::GET, &format!("/runs/{id}/warnings"), None).await;
    let warnings = warnings.as_array().unwrap();
    assert!(!warnings.is_empty());
    assert!(warnings.iter().all(|w| w["kind"] == "memory-overrun"));
    let rounds: Vec<u64> = warnings.iter().map(|w| w["round"].as_u64().unwrap()).collect();
    assert!(rounds.windows(2).all(|w| w[0] < w[1]));
}

#[tokio::test]
async fn calibration_failures_abort_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let mut simulation = common::simulation(2, 800, 5);
    simulation.federation.privacy.noise = flip_core::federation::NoiseSpec::Target { epsilon: 1e-9, delta: None };
    let spec = RunSpec { simulation, requirements: None };
    let (_, created) = send_json(&app, Method::POST, "/runs", Some(serde_json::to_value(spec).unwrap())).await;
    let id = created["id"].as_str().unwrap().to_string();
    let state = wait_for(&app, &id, |s| s.status.is_terminal()).await;
    assert_eq!(state.status, RunStatus::Aborted);
    assert_eq!(state.warnings.len(), 1);
    assert_eq!(state.warnings[0].kind, flip_core::practitioner::AdherenceKind::CalibrationFailure);
}

#[tokio::test]
async fn bad_run_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, _) = send_json(&app, Method::GET, "/runs/run-000042", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send_json(&app, Method::POST, "/runs/nope/pause", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let mut spec = serde_json::to_value(common::spec(2, 400)).unwrap();
    spec["simulation"]["federation"]["rounds"] = json!(0);
    let (status, body) = send_json(&app, Method::POST, "/runs", Some(spec)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["message"].as_str().unwrap().contains("round"));
    let (status, _) = send_json(&app, Method::POST, "/runs", Some(json!({"simulation": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, list) = send_json(&app, Method::GET, "/runs", None).await;
    assert_eq!(list, json!([]));
}
