//! The three reference corpora and the noise grid over their partitions.
use flip_core::accountant::{
    accounted_steps, calibrate_sigma, integer_orders, PrivacyTarget, SubsamplingScheme,
};
use flip_core::federation::AccountantKind;
use flip_core::partition::{partition_sizes, PartitionPolicy};
use serde::{Deserialize, Serialize};

use crate::calibration::accountant_error;
use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corpus {
    pub name: &'static str,
    /// Record count behind the IID row.
    pub iid_total: u64,
    /// Record count behind the skewed rows.
    pub skewed_total: u64,
    pub delta: f64,
}

impl Corpus {
    pub fn total(&self, policy: PartitionPolicy) -> u64 {
        match policy {
            PartitionPolicy::Iid => self.iid_total,
            _ => self.skewed_total,
        }
    }
}

pub const CORPORA: [Corpus; 3] = [
    Corpus { name: "QQP", iid_total: 363_848, skewed_total: 363_846, delta: 1e-6 },
    Corpus { name: "QNLI", iid_total: 104_743, skewed_total: 104_743, delta: 1e-6 },
    Corpus { name: "SST2", iid_total: 67_349, skewed_total: 67_349, delta: 1e-5 },
];

pub const CLIENTS: usize = 4;
pub const ROUNDS: u64 = 5;
pub const BATCH: u64 = 550;
pub const TARGETS: [f64; 2] = [10.0, 6.0];

pub fn corpus(name: &str) -> Option<Corpus> {
    CORPORA.iter().copied().find(|c| c.name.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub dataset: &'static str,
    pub policy: PartitionPolicy,
    /// 1-based client index.
    pub partition: usize,
    pub partition_size: u64,
    pub accountant: AccountantKind,
    pub epsilon: f64,
    pub delta: f64,
    pub steps: u64,
    pub sigma: f64,
    pub order: f64,
    pub achieved_epsilon: f64,
}

/// Per-client calibration over every corpus, policy, partition, accountant
/// and target, with `T = rounds · ceil(nᵢ / batch)`.
pub fn noise_grid(targets: &[f64], rounds: u64, batch: u64, orders: (u32, u32)) -> Result<Vec<GridCell>, ServiceError> {
    let orders = integer_orders(orders.0, orders.1);
    let mut cells = Vec::new();
    for corpus in CORPORA {
        for policy in PartitionPolicy::ALL {
            let sizes = partition_sizes(corpus.total(policy), CLIENTS, policy)
                .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
            for accountant in [AccountantKind::PoissonRdp, AccountantKind::FixedSizeRdp] {
                for &epsilon in targets {
                    for (i, &n) in sizes.iter().enumerate() {
                        cells.push(calibrate_cell(corpus, policy, i + 1, n, accountant, epsilon, rounds, batch, &orders)?);
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[allow(clippy::too_many_arguments)]
fn calibrate_cell(
    corpus: Corpus,
    policy: PartitionPolicy,
    partition: usize,
    n: u64,
    accountant: AccountantKind,
    epsilon: f64,
    rounds: u64,
    batch: u64,
    orders: &[f64],
) -> Result<GridCell, ServiceError> {
    let adjacency = accountant.default_adjacency();
    let scheme = match accountant {
        AccountantKind::PoissonRdp => SubsamplingScheme::poisson(batch as f64 / n as f64, adjacency),
        AccountantKind::FixedSizeRdp => SubsamplingScheme::fixed_size(batch, n, adjacency),
    }
    .map_err(accountant_error)?;
    let steps = accounted_steps(rounds, n, batch);
    let target = PrivacyTarget::new(epsilon, corpus.delta).map_err(accountant_error)?;
    let cal = calibrate_sigma(&target, &scheme, steps, orders).map_err(accountant_error)?;
    Ok(GridCell {
        dataset: corpus.name,
        policy,
        partition,
        partition_size: n,
        accountant,
        epsilon,
        delta: corpus.delta,
        steps,
        sigma: cal.sigma.get(),
        order: cal.order,
        achieved_epsilon: cal.epsilon,
    })
}

pub const GRID_CSV_HEADER: [&str; 6] = ["dataset", "policy", "partition", "accountant", "epsilon", "sigma"];

pub fn accountant_label(kind: AccountantKind) -> &'static str {
    match kind {
        AccountantKind::PoissonRdp => "poisson-rdp",
        AccountantKind::FixedSizeRdp => "fixed-size-rdp",
    }
}

pub fn parse_accountant_label(s: &str) -> Option<AccountantKind> {
    match s {
        "poisson-rdp" => Some(AccountantKind::PoissonRdp),
        "fixed-size-rdp" => Some(AccountantKind::FixedSizeRdp),
        _ => None,
    }
}

pub fn write_grid_csv<W: std::io::Write>(cells: &[GridCell], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GRID_CSV_HEADER)?;
    for c in cells {
        w.write_record([
            c.dataset.to_string(),
            c.policy.to_string(),
            c.partition.to_string(),
            accountant_label(c.accountant).to_string(),
            c.epsilon.to_string(),
            format!("{:.6}", c.sigma),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_lookup_is_case_insensitive() {
        assert_eq!(corpus("sst2").unwrap().delta, 1e-5);
        assert!(corpus("mnli").is_none());
        assert_eq!(CORPORA[0].total(PartitionPolicy::Linear), 363_846);
    }

    #[test]
    fn accountant_labels_round_trip() {
        for k in [AccountantKind::PoissonRdp, AccountantKind::FixedSizeRdp] {
            assert_eq!(parse_accountant_label(accountant_label(k)), Some(k));
        }
    }
}
