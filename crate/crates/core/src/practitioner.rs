//! Turns privacy requirements and client constraints into training
//! parameters, and flags runs that stop meeting those requirements.
//!
//! The privacy goal maps to a target ε through an editable [`PolicyTable`].
//! The accountant follows memory: when the expected peak of Poisson batches
//! would not fit the client budget, the fixed-size accountant is chosen so
//! memory stays constant. Each client then gets `δᵢ = 1/|Dᵢ|` and a
//! calibrated noise multiplier.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::accountant::{
    accounted_steps, calibrate_sigma, integer_orders, AccountantError, Adjacency, PrivacyTarget,
    SubsamplingScheme,
};
use crate::federation::{AccountantKind, NoiseSpec, PrivacyConfig, RunRecord};
use crate::partition::{partition_sizes, PartitionError, PartitionPolicy};

pub const REMEDY_EXPAND_PARTITION: &str = "expand data partition";
pub const REMEDY_MORE_MEMORY: &str = "increase client memory and switch to the Poisson (RDP) accountant";
pub const REMEDY_RELAX_EPSILON: &str = "relax the target epsilon";
pub const REMEDY_FIXED_SIZE: &str = "switch to the fixed-size accountant for constant memory";
pub const REMEDY_SMALLER_BATCH: &str = "reduce the batch size";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PractitionerError {
    #[error("invalid requirements: {0}")]
    InvalidRequirements(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("cannot calibrate noise for client {client}: {source}; remedies: {}", remedies.join("; "))]
    Calibration {
        client: usize,
        #[source]
        source: AccountantError,
        remedies: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PrivacyGoal {
    /// Defend against membership inference.
    MitigateMia,
    /// Defend against training-data reconstruction.
    MitigateReconstruction,
    /// A mandated ε, used verbatim.
    RegulatoryEpsilon { value: f64 },
}

/// Goal → ε defaults. The mapping is policy, not derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTable {
    #[serde(default = "default_mia")]
    pub mitigate_mia: f64,
    #[serde(default = "default_reconstruction")]
    pub mitigate_reconstruction: f64,
}

fn default_mia() -> f64 {
    6.0
}

fn default_reconstruction() -> f64 {
    10.0
}

impl Default for PolicyTable {
    fn default() -> Self {
        Self {
            mitigate_mia: default_mia(),
            mitigate_reconstruction: default_reconstruction(),
        }
    }
}

impl PolicyTable {
    pub fn from_toml(text: &str) -> Result<Self, PractitionerError> {
        let table: PolicyTable =
            toml::from_str(text).map_err(|e| PractitionerError::InvalidRequirements(e.to_string()))?;
        if !(table.mitigate_mia > 0.0) || !(table.mitigate_reconstruction > 0.0) {
            return Err(PractitionerError::InvalidRequirements(
                "policy table epsilons must be positive".into(),
            ));
        }
        Ok(table)
    }

    pub fn epsilon_for(&self, goal: PrivacyGoal) -> f64 {
        match goal {
            PrivacyGoal::MitigateMia => self.mitigate_mia,
            PrivacyGoal::MitigateReconstruction => self.mitigate_reconstruction,
            PrivacyGoal::RegulatoryEpsilon { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Requirements {
    pub privacy_goal: PrivacyGoal,
    #[serde(default)]
    pub min_accuracy: Option<f64>,
    pub clients: usize,
    /// Per-client memory budget in abstract units (one per parameter, one per batch slot).
    pub memory_budget: u64,
    /// Memory taken by the model itself.
    pub model_units: u64,
    pub dataset_size: u64,
    #[serde(default)]
    pub partition_hint: Option<PartitionPolicy>,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Upper bound on the batch size regardless of memory.
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// Accountant used when memory does not force fixed-size batches.
    #[serde(default = "default_preferred")]
    pub preferred_accountant: AccountantKind,
}

fn default_rounds() -> u32 {
    5
}

fn default_max_batch() -> usize {
    550
}

fn default_preferred() -> AccountantKind {
    AccountantKind::PoissonRdp
}

impl Requirements {
    pub fn validate(&self) -> Result<(), PractitionerError> {
        let bad = |m: String| Err(PractitionerError::InvalidRequirements(m));
        if let PrivacyGoal::RegulatoryEpsilon { value } = self.privacy_goal {
            if !(value > 0.0) || !value.is_finite() {
                return bad(format!("regulatory epsilon must be positive, got {value}"));
            }
        }
        if let Some(a) = self.min_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("minimum accuracy must lie in [0, 1], got {a}"));
            }
        }
        if self.clients == 0 {
            return bad("need at least one client".into());
        }
        if self.memory_budget <= self.model_units {
            return bad(format!(
                "memory budget {} must exceed the model size {}",
                self.memory_budget, self.model_units
            ));
        }
        if self.rounds == 0 || self.max_batch == 0 {
            return bad("rounds and max batch must be positive".into());
        }
        Ok(())
    }

    /// Largest batch that fits in memory next to the model.
    pub fn memory_batch_limit(&self) -> u64 {
        self.memory_budget.saturating_sub(self.model_units)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecommendation {
    pub client: usize,
    pub partition_size: u64,
    pub delta: f64,
    pub sigma: f64,
    pub steps: u64,
    pub achieved_epsilon: f64,
    pub order: f64,
    /// Expected largest Poisson batch over the run at this batch size.
    pub expected_poisson_peak: f64,
    /// Probability that some Poisson batch in the run exceeds the memory budget.
    pub poisson_overrun_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub epsilon: f64,
    pub accountant: AccountantKind,
    pub adjacency: Adjacency,
    pub batch_size: usize,
    pub clients: Vec<ClientRecommendation>,
    pub rationale: Vec<String>,
}

impl Recommendation {
    pub fn sigmas(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.sigma).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.delta).collect()
    }

    /// Largest per-run Poisson overrun probability across clients.
    pub fn poisson_overrun_probability(&self) -> f64 {
        self.clients
            .iter()
            .map(|c| c.poisson_overrun_probability)
            .fold(0.0, f64::max)
    }

    /// Privacy section of a federation config that applies this recommendation.
    pub fn privacy_config(&self, clip: f64) -> PrivacyConfig {
        PrivacyConfig {
            accountant: self.accountant,
            adjacency: Some(self.adjacency),
            clip,
            noise: NoiseSpec::Sigmas {
                sigmas: self.sigmas(),
                delta: None,
            },
            ..PrivacyConfig::non_private(self.accountant)
        }
    }
}

/// `E[max of T draws of Binomial(n, q)]` and `P(max > limit)`.
fn poisson_peak_stats(n: u64, q: f64, draws: u64, limit: u64) -> (f64, f64) {
    if q >= 1.0 {
        return (n as f64, if n > limit { 1.0 } else { 0.0 });
    }
    let dist = Binomial::new(q, n).expect("valid binomial parameters");
    let t = draws as f64;
    let mean = q * n as f64;
    let mut expected = 0.0;
    for k in 0..n {
        let tail = 1.0 - dist.cdf(k).powf(t);
        expected += tail;
        if (k as f64) > mean && tail < 1e-15 {
            break;
        }
    }
    let overrun = if limit >= n {
        0.0
    } else {
        1.0 - dist.cdf(limit).powf(t)
    };
    (expected, overrun.clamp(0.0, 1.0))
}

pub fn recommend(req: &Requirements, table: &PolicyTable) -> Result<Recommendation, PractitionerError> {
    req.validate()?;
    let epsilon = table.epsilon_for(req.privacy_goal);
    let policy = req.partition_hint.unwrap_or(PartitionPolicy::Iid);
    let sizes = partition_sizes(req.dataset_size, req.clients, policy)?;
    let smallest = *sizes.iter().min().expect("at least one client");
    let memory_limit = req.memory_batch_limit();
    let batch = (req.max_batch as u64).min(memory_limit).min(smallest);
    let mut rationale = vec![format!(
        "goal {:?} -> epsilon {epsilon}; batch {batch} = min(max batch {}, memory limit {memory_limit}, smallest partition {smallest})",
        req.privacy_goal, req.max_batch
    )];

    let stats: Vec<(f64, f64)> = sizes
        .iter()
        .map(|&n| {
            let steps = accounted_steps(u64::from(req.rounds), n, batch);
            poisson_peak_stats(n, batch as f64 / n as f64, steps, memory_limit)
        })
        .collect();
    let worst_peak = stats.iter().map(|s| s.0).fold(0.0, f64::max);
    let poisson_peak_units = req.model_units as f64 + worst_peak;
    let accountant = if (req.memory_budget as f64) < poisson_peak_units {
        rationale.push(format!(
            "memory budget {} is below the expected Poisson peak {poisson_peak_units:.1}; \
             fixed-size batches keep memory constant at {}",
            req.memory_budget,
            req.model_units + batch
        ));
        AccountantKind::FixedSizeRdp
    } else {
        rationale.push(format!(
            "memory budget {} covers the expected Poisson peak {poisson_peak_units:.1}; using {:?}",
            req.memory_budget, req.preferred_accountant
        ));
        req.preferred_accountant
    };
    let adjacency = accountant.default_adjacency();
    let orders = integer_orders(2, 256);

    let clients = sizes
        .par_iter()
        .zip(stats.par_iter())
        .enumerate()
        .map(|(i, (&n, &(peak, overrun)))| {
            let delta = 1.0 / n as f64;
            let steps = accounted_steps(u64::from(req.rounds), n, batch);
            let fail = |source: AccountantError| PractitionerError::Calibration {
                client: i + 1,
                source,
                remedies: vec![
                    REMEDY_EXPAND_PARTITION.to_string(),
                    REMEDY_MORE_MEMORY.to_string(),
                    REMEDY_RELAX_EPSILON.to_string(),
                ],
            };
            let target = PrivacyTarget::new(epsilon, delta).map_err(fail)?;
            let scheme = match accountant {
                AccountantKind::PoissonRdp => SubsamplingScheme::poisson(batch as f64 / n as f64, adjacency),
                AccountantKind::FixedSizeRdp => SubsamplingScheme::fixed_size(batch, n, adjacency),
            }
            .map_err(fail)?;
            let cal = calibrate_sigma(&target, &scheme, steps, &orders).map_err(fail)?;
            Ok(ClientRecommendation {
                client: i + 1,
                partition_size: n,
                delta,
                sigma: cal.sigma.get(),
                steps,
                achieved_epsilon: cal.epsilon,
                order: cal.order,
                expected_poisson_peak: peak,
                poisson_overrun_probability: overrun,
            })
        })
        .collect::<Result<Vec<_>, PractitionerError>>()?;

    Ok(Recommendation {
        epsilon,
        accountant,
        adjacency,
        batch_size: batch as usize,
        clients,
        rationale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdherenceKind {
    AccuracyShortfall,
    CalibrationFailure,
    MemoryOverrun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceEvent {
    pub round: u32,
    pub kind: AdherenceKind,
    pub message: String,
    pub remedies: Vec<String>,
}

impl AdherenceEvent {
    pub fn calibration_failure(err: &PractitionerError) -> Self {
        let remedies = match err {
            PractitionerError::Calibration { remedies, .. } => remedies.clone(),
            _ => vec![REMEDY_RELAX_EPSILON.to_string()],
        };
        Self {
            round: 0,
            kind: AdherenceKind::CalibrationFailure,
            message: err.to_string(),
            remedies,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdherenceThresholds {
    /// Mean round-over-round accuracy gain (percentage points) below which
    /// a run is considered stalled.
    pub trend_points: f64,
}

impl Default for AdherenceThresholds {
    fn default() -> Self {
        Self { trend_points: 0.5 }
    }
}

/// Requirement violations visible in `record` so far.
pub fn check_adherence(
    record: &RunRecord,
    req: &Requirements,
    thresholds: &AdherenceThresholds,
) -> Vec<AdherenceEvent> {
    let mut events = Vec::new();
    for r in &record.rounds {
        let over: Vec<String> = r
            .clients
            .iter()
            .filter(|c| c.memory_peak > req.memory_budget)
            .map(|c| format!("client {} peaked at {}", c.client, c.memory_peak))
            .collect();
        if !over.is_empty() {
            events.push(AdherenceEvent {
                round: r.round,
                kind: AdherenceKind::MemoryOverrun,
                message: format!("memory budget {} exceeded: {}", req.memory_budget, over.join(", ")),
                remedies: vec![
                    REMEDY_FIXED_SIZE.to_string(),
                    REMEDY_SMALLER_BATCH.to_string(),
                    "increase client memory".to_string(),
                ],
            });
        }
    }

    if let Some(min_accuracy) = req.min_accuracy {
        let total = record.config.rounds.max(1);
        let half = total.div_ceil(2);
        let acc: Vec<f64> = record.rounds.iter().map(|r| r.accuracy).collect();
        for (idx, r) in record.rounds.iter().enumerate() {
            if r.round < half {
                continue;
            }
            let best = acc[..=idx].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let window = (total / 2).max(1) as usize;
            let from = idx.saturating_sub(window);
            let trend_points = if idx > from {
                100.0 * (acc[idx] - acc[from]) / (idx - from) as f64
            } else {
                0.0
            };
            if best < min_accuracy && trend_points < thresholds.trend_points {
                events.push(AdherenceEvent {
                    round: r.round,
                    kind: AdherenceKind::AccuracyShortfall,
                    message: format!(
                        "best accuracy {:.2}% is below the required {:.2}% and improving \
                         {trend_points:.2} points per round",
                        100.0 * best,
                        100.0 * min_accuracy
                    ),
                    remedies: vec![
                        REMEDY_EXPAND_PARTITION.to_string(),
                        REMEDY_MORE_MEMORY.to_string(),
                        REMEDY_RELAX_EPSILON.to_string(),
                    ],
                });
                break;
            }
        }
    }
    events.sort_by_key(|e| e.round);
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    fn requirements(goal: PrivacyGoal, memory_budget: u64) -> Requirements {
        Requirements {
            privacy_goal: goal,
            min_accuracy: None,
            clients: 4,
            memory_budget,
            model_units: 42,
            dataset_size: 67349,
            partition_hint: Some(PartitionPolicy::Iid),
            rounds: 5,
            max_batch: 550,
            preferred_accountant: AccountantKind::PoissonRdp,
        }
    }

    #[test]
    fn reconstruction_with_ample_memory_uses_poisson() {
        let rec = recommend(&requirements(PrivacyGoal::MitigateReconstruction, 100_000), &PolicyTable::default()).unwrap();
        assert_eq!(rec.epsilon, 10.0);
        assert_eq!(rec.accountant, AccountantKind::PoissonRdp);
        assert_eq!(rec.batch_size, 550);
        for c in &rec.clients {
            assert_eq!(c.delta, 1.0 / c.partition_size as f64);
            assert!(c.achieved_epsilon <= 10.0);
        }
        assert!(rec.poisson_overrun_probability() < 1e-12);
    }

    #[test]
    fn mia_with_tight_memory_uses_fixed_size() {
        let rec = recommend(&requirements(PrivacyGoal::MitigateMia, 42 + 400), &PolicyTable::default()).unwrap();
        assert_eq!(rec.epsilon, 6.0);
        assert_eq!(rec.accountant, AccountantKind::FixedSizeRdp);
        assert_eq!(rec.batch_size, 400);
        assert!(rec.poisson_overrun_probability() > 0.5);
    }

    #[test]
    fn regulatory_epsilon_passes_through() {
        let rec = recommend(
            &requirements(PrivacyGoal::RegulatoryEpsilon { value: 3.7 }, 100_000),
            &PolicyTable::default(),
        )
        .unwrap();
        assert_eq!(rec.epsilon, 3.7);
    }

    #[test]
    fn stricter_goal_needs_more_noise() {
        let t = PolicyTable::default();
        assert!(t.epsilon_for(PrivacyGoal::MitigateMia) < t.epsilon_for(PrivacyGoal::MitigateReconstruction));
        let mia = recommend(&requirements(PrivacyGoal::MitigateMia, 100_000), &t).unwrap();
        let rec = recommend(&requirements(PrivacyGoal::MitigateReconstruction, 100_000), &t).unwrap();
        for (a, b) in mia.sigmas().iter().zip(rec.sigmas()) {
            assert!(*a > b);
        }
    }

    #[test]
    fn invalid_requirements() {
        let t = PolicyTable::default();
        assert!(recommend(&requirements(PrivacyGoal::RegulatoryEpsilon { value: 0.0 }, 1000), &t).is_err());
        assert!(recommend(&requirements(PrivacyGoal::MitigateMia, 42), &t).is_err());
        let mut r = requirements(PrivacyGoal::MitigateMia, 1000);
        r.min_accuracy = Some(1.5);
        assert!(recommend(&r, &t).is_err());
    }

    #[test]
    fn unreachable_target_reports_remedies() {
        let mut r = requirements(PrivacyGoal::RegulatoryEpsilon { value: 1e-4 }, 100_000);
        r.dataset_size = 2000;
        r.max_batch = 500;
        let err = recommend(&r, &PolicyTable::default()).unwrap_err();
        let event = AdherenceEvent::calibration_failure(&err);
        assert_eq!(event.kind, AdherenceKind::CalibrationFailure);
        assert!(event.remedies.iter().any(|m| m == REMEDY_EXPAND_PARTITION));
    }

    #[test]
    fn policy_table_parses() {
        let t = PolicyTable::from_toml("mitigate_mia = 4.0\n").unwrap();
        assert_eq!(t.mitigate_mia, 4.0);
        assert_eq!(t.mitigate_reconstruction, 10.0);
        assert!(PolicyTable::from_toml("mitigate_mia = -1.0\n").is_err());
        assert!(PolicyTable::from_toml("other = 1.0\n").is_err());
    }

    #[test]
    fn peak_statistics() {
        // A single draw: E[max] is the mean.
        let (peak, _) = poisson_peak_stats(1000, 0.1, 1, 1000);
        assert!((peak - 100.0).abs() < 1e-6);
        let (peak, overrun) = poisson_peak_stats(50_000, 120.0 / 50_000.0, 416, 120);
        assert!(peak > 130.0 && peak < 160.0, "{peak}");
        assert!(overrun > 0.99);
        assert_eq!(poisson_peak_stats(10, 1.0, 3, 9), (10.0, 1.0));
    }
}
