use std::path::Path;
use std::process::{Command, Output};

use flip_service::calibration::{calibrate, CalibrateRequest, Epsilons, SchemeName};
use serde_json::Value;

fn flip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flip")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn partition_prints_reference_sizes() {
    let o = flip(&["partition", "--n", "104743", "--clients", "4", "--policy", "linear"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "10474 20948 31422 41899\n");
    let o = flip(&["partition", "--n", "104743", "--clients", "4", "--policy", "linear", "--emit", "csv"]);
    assert_eq!(stdout(&o), "client_id,size\n1,10474\n2,20948\n3,31422\n4,41899\n");
    let o = flip(&["partition", "--n", "10", "--clients", "4", "--policy", "exponential"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "bad-request");
}

#[test]
fn calibrate_agrees_with_the_library() {
    let args = [
        "calibrate", "--epsilon", "10", "--delta", "1e-6", "--scheme", "fixed", "--batch", "550", "--dataset-size",
        "90962", "--rounds", "5",
    ];
    let o = flip(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let expected = calibrate(&CalibrateRequest {
        epsilon: Epsilons::One(10.0),
        delta: 1e-6,
        scheme: SchemeName::Fixed,
        batch: 550,
        dataset_size: 90962,
        rounds: 5,
        epochs: 1,
        adjacency: None,
        orders: None,
    })
    .unwrap();
    let p = &expected.results[0];
    assert_eq!(
        stdout(&o),
        format!(
            "sigma {:.6} alpha {} epsilon {:.6} (target 10, {} steps)\n",
            p.sigma, p.order, p.achieved_epsilon, expected.steps
        )
    );
    assert!(p.achieved_epsilon <= 10.0);

    let mut csv_args = args.to_vec();
    csv_args.extend(["--epsilon", "6", "--emit", "csv", "--dataset", "QQP", "--policy", "iid", "--partition", "1"]);
    let o = flip(&csv_args);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "dataset,policy,partition,accountant,epsilon,sigma");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("QQP,iid,1,fixed-size-rdp,10,"));
    assert!(lines[2].starts_with("QQP,iid,1,fixed-size-rdp,6,"));
}

#[test]
fn usage_and_input_errors_exit_2() {
    assert_eq!(flip(&["partition", "--bogus"]).status.code(), Some(2));
    assert_eq!(flip(&["frobnicate"]).status.code(), Some(2));
    let o = flip(&["simulate", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("missing.cfg"));
    assert_eq!(flip(&["calibrate", "--epsilon", "10", "--delta", "1e-6"]).status.code(), Some(2));
}

const SIMULATION: &str = r#"
[federation]
clients = 2
rounds = 3
learning_rate = 0.5
batch_size = 50
policy = "linear"
seed = 4

[federation.model]
kind = "logistic"

[federation.privacy]
accountant = "poisson-rdp"

[federation.privacy.noise]
mode = "target"
epsilon = 8.0

[data]
samples = 800
dim = 5
seed = 4
"#;

#[test]
fn simulate_writes_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SIMULATION).unwrap();
    let out = dir.path().join("out");
    let o = flip(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("round ")).count(), 3);

    let log = std::fs::read_to_string(out.join("small.jsonl")).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 5);
    assert_eq!(events[0]["type"], "setup");
    assert_eq!(events[4]["type"], "done");
    assert_eq!(events[4]["status"], "done");
    let summary = std::fs::read_to_string(out.join("small.csv")).unwrap();
    assert!(summary.lines().count() > 1);

    // Identical configs give identical artifacts.
    let again = dir.path().join("again");
    flip(&["simulate", "--config", config.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(again.join("small.jsonl")).unwrap(), log);
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn recommend_reads_toml_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let toml = write(
        dir.path(),
        "req.toml",
        r#"
clients = 4
memory_budget = 442
model_units = 42
dataset_size = 67349

[privacy_goal]
kind = "mitigate-mia"
"#,
    );
    let o = flip(&["recommend", "--requirements", &toml]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rec["accountant"], "fixed-size-rdp");
    assert_eq!(rec["epsilon"], 6.0);

    let json = write(
        dir.path(),
        "req.json",
        r#"{"privacy_goal": {"kind": "mitigate-reconstruction"}, "clients": 4, "memory_budget": 100000, "model_units": 42, "dataset_size": 67349}"#,
    );
    let o = flip(&["recommend", "--requirements", &json, "--emit", "text"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("epsilon 10 accountant poisson-rdp"));
    assert_eq!(text.lines().filter(|l| l.starts_with("client ")).count(), 4);

    let o = flip(&["recommend", "--requirements", &write(dir.path(), "bad.toml", "clients = \"x\"")]);
    assert_eq!(o.status.code(), Some(2));
}
