use serde::{Deserialize, Serialize};

use crate::accountant::SubsamplingScheme;

use super::FederationConfig;

/// Per-client privacy and data setup fixed at the start of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSetup {
    pub client: usize,
    pub partition_size: u64,
    pub sigma: f64,
    pub delta: Option<f64>,
    pub steps_per_round: u64,
    pub scheme: Option<SubsamplingScheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client: usize,
    pub participated: bool,
    pub steps: u64,
    pub skipped_steps: u64,
    pub batch_mean: f64,
    pub batch_min: usize,
    pub batch_max: usize,
    pub memory_peak: u64,
    pub memory_profile: Vec<usize>,
    /// Cumulative ε after this round; `None` for non-private runs.
    pub epsilon: Option<f64>,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: u32,
    pub accuracy: f64,
    pub loss: f64,
    pub clients: Vec<ClientRoundStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: FederationConfig,
    pub clients: Vec<ClientSetup>,
    pub rounds: Vec<RoundMetrics>,
    pub aborted: Option<String>,
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn max_accuracy(&self) -> Option<f64> {
        self.rounds.iter().map(|r| r.accuracy).reduce(f64::max)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.accuracy)
    }

    pub fn is_complete(&self) -> bool {
        self.aborted.is_none() && self.rounds.len() == self.config.rounds as usize
    }

    pub fn summary_header(&self) -> Vec<String> {
        let k = self.clients.len();
        let mut h = vec!["round".to_string(), "accuracy".into(), "loss".into()];
        h.extend((1..=k).map(|i| format!("eps_client_{i}")));
        h.extend((1..=k).map(|i| format!("mem_peak_client_{i}")));
        h
    }

    /// One row per round matching [`summary_header`](Self::summary_header).
    pub fn summary_rows(&self) -> Vec<Vec<String>> {
        self.rounds
            .iter()
            .map(|r| {
                let mut row = vec![r.round.to_string(), r.accuracy.to_string(), r.loss.to_string()];
                row.extend(r.clients.iter().map(|c| {
                    c.epsilon.map(|e| e.to_string()).unwrap_or_default()
                }));
                row.extend(r.clients.iter().map(|c| c.memory_peak.to_string()));
                row
            })
            .collect()
    }
}
