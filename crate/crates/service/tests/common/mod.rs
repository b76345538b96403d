#![allow(dead_code)]
use flip_core::federation::SimulationConfig;
use flip_service::registry::RunSpec;

/// A small private simulation; `samples` controls how long each round takes.
pub fn simulation(rounds: u32, samples: usize, seed: u64) -> SimulationConfig {
    let text = format!(
        r#"
[federation]
clients = 2
rounds = {rounds}
learning_rate = 0.5
batch_size = 50
policy = "iid"
seed = {seed}

[federation.model]
kind = "logistic"

[federation.privacy]
accountant = "fixed-size-rdp"

[federation.privacy.noise]
mode = "target"
epsilon = 8.0

[data]
samples = {samples}
dim = 5
seed = {seed}
"#
    );
    SimulationConfig::from_toml(&text).unwrap()
}

pub fn spec(rounds: u32, samples: usize) -> RunSpec {
    RunSpec { simulation: simulation(rounds, samples, 3), requirements: None }
}
