//! Splitting a dataset of `n` records across `k` clients.
//!
//! Non-IID policies weight client `i` (1-based) by `i`, `i²` or `e^i`; each
//! client but the last gets `floor(n · w_i / Σw)` and the last client takes
//! the remainder. The IID policy gives `floor(n/k) + 1` records to the first
//! `n mod k` clients.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("policy {policy} is degenerate for n = {n}, k = {k}: client {client} would receive no records")]
    PolicyDegenerate {
        policy: PartitionPolicy,
        n: u64,
        k: usize,
        client: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionPolicy {
    Iid,
    Linear,
    Square,
    Exponential,
}

impl PartitionPolicy {
    pub const ALL: [PartitionPolicy; 4] = [
        PartitionPolicy::Iid,
        PartitionPolicy::Linear,
        PartitionPolicy::Square,
        PartitionPolicy::Exponential,
    ];

    fn weight(self, id: usize) -> f64 {
        let i = id as f64;
        match self {
            PartitionPolicy::Iid => 1.0,
            PartitionPolicy::Linear => i,
            PartitionPolicy::Square => i * i,
            PartitionPolicy::Exponential => i.exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartitionPolicy::Iid => "iid",
            PartitionPolicy::Linear => "linear",
            PartitionPolicy::Square => "square",
            PartitionPolicy::Exponential => "exponential",
        }
    }
}

impl fmt::Display for PartitionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartitionPolicy {
    type Err = PartitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iid" => Ok(PartitionPolicy::Iid),
            "linear" => Ok(PartitionPolicy::Linear),
            "square" | "squared" => Ok(PartitionPolicy::Square),
            "exponential" | "exp" => Ok(PartitionPolicy::Exponential),
            other => Err(PartitionError::InvalidArgument(format!(
                "unknown partition policy {other:?} (expected iid, linear, square or exponential)"
            ))),
        }
    }
}

/// Per-client partition sizes under `policy`.
pub fn partition_sizes(n: u64, k: usize, policy: PartitionPolicy) -> Result<Vec<u64>, PartitionError> {
    if k == 0 {
        return Err(PartitionError::InvalidArgument("need at least one client".into()));
    }
    if n < k as u64 {
        return Err(PartitionError::InvalidArgument(format!(
            "cannot split {n} records across {k} clients"
        )));
    }
    let sizes = match policy {
        PartitionPolicy::Iid => {
            let base = n / k as u64;
            let extra = (n % k as u64) as usize;
            (0..k).map(|i| base + u64::from(i < extra)).collect::<Vec<_>>()
        }
        _ => {
            let weights: Vec<f64> = (1..=k).map(|i| policy.weight(i)).collect();
            let total: f64 = weights.iter().sum();
            let mut sizes: Vec<u64> = weights[..k - 1]
                .iter()
                .map(|w| (n as f64 * w / total).floor() as u64)
                .collect();
            let assigned: u64 = sizes.iter().sum();
            sizes.push(n - assigned);
            sizes
        }
    };
    if let Some(client) = sizes.iter().position(|&s| s == 0) {
        return Err(PartitionError::PolicyDegenerate {
            policy,
            n,
            k,
            client: client + 1,
        });
    }
    Ok(sizes)
}

/// Sizes plus the concrete record indices each client holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub sizes: Vec<u64>,
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> u64 {
        self.sizes.iter().sum()
    }
}

/// Seeded uniform shuffle of `0..n` sliced into consecutive runs of `sizes`.
pub fn assign_indices(n: usize, sizes: &[u64], seed: u64) -> Result<PartitionPlan, PartitionError> {
    let total: u64 = sizes.iter().sum();
    if total != n as u64 {
        return Err(PartitionError::InvalidArgument(format!(
            "partition sizes sum to {total}, expected {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = order.as_slice();
    let assignments = sizes
        .iter()
        .map(|&s| {
            let (head, tail) = rest.split_at(s as usize);
            rest = tail;
            head.to_vec()
        })
        .collect();
    Ok(PartitionPlan {
        sizes: sizes.to_vec(),
        assignments,
        seed,
    })
}

/// `partition_sizes` followed by `assign_indices`.
pub fn plan(n: usize, k: usize, policy: PartitionPolicy, seed: u64) -> Result<PartitionPlan, PartitionError> {
    let sizes = partition_sizes(n as u64, k, policy)?;
    assign_indices(n, &sizes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn reference_rows() {
        assert_eq!(
            partition_sizes(363846, 4, PartitionPolicy::Linear).unwrap(),
            vec![36384, 72769, 109153, 145540]
        );
        assert_eq!(
            partition_sizes(67349, 4, PartitionPolicy::Exponential).unwrap(),
            vec![2159, 5869, 15953, 43368]
        );
        assert_eq!(
            partition_sizes(104743, 4, PartitionPolicy::Iid).unwrap(),
            vec![26186, 26186, 26186, 26185]
        );
    }

    #[test]
    fn degenerate_small_n() {
        match partition_sizes(8, 4, PartitionPolicy::Linear) {
            Err(PartitionError::PolicyDegenerate { client, .. }) => assert_eq!(client, 1),
            other => panic!("expected degenerate policy, got {other:?}"),
        }
    }

    #[test]
    fn too_few_records() {
        assert!(matches!(
            partition_sizes(3, 4, PartitionPolicy::Iid),
            Err(PartitionError::InvalidArgument(_))
        ));
        assert!(partition_sizes(3, 0, PartitionPolicy::Iid).is_err());
    }

    #[test]
    fn single_client_holds_everything() {
        let plan = assign_indices(4, &[4], 99).unwrap();
        let set: BTreeSet<_> = plan.assignments[0].iter().copied().collect();
        assert_eq!(set, (0..4).collect());
    }

    #[test]
    fn seeded_plans_are_deterministic() {
        assert_eq!(assign_indices(10, &[5, 5], 7).unwrap(), assign_indices(10, &[5, 5], 7).unwrap());
    }

    #[test]
    fn disjoint_and_exhaustive_over_many_seeds() {
        for seed in 0..1000 {
            let plan = assign_indices(10, &[5, 5], seed).unwrap();
            let a: BTreeSet<_> = plan.assignments[0].iter().copied().collect();
            let b: BTreeSet<_> = plan.assignments[1].iter().copied().collect();
            assert_eq!(a.len(), 5);
            assert_eq!(b.len(), 5);
            assert!(a.is_disjoint(&b));
            assert_eq!(a.union(&b).count(), 10);
        }
    }

    #[test]
    fn size_mismatch() {
        assert!(assign_indices(10, &[5, 4], 0).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("Square".parse::<PartitionPolicy>().unwrap(), PartitionPolicy::Square);
        assert!("dirichlet".parse::<PartitionPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn sizes_conserve_records(n in 4u64..1_000_000, k in 1usize..5, p in 0usize..4) {
            let policy = PartitionPolicy::ALL[p];
            let k = k.min(n as usize);
            match partition_sizes(n, k, policy) {
                Ok(sizes) => {
                    prop_assert_eq!(sizes.len(), k);
                    prop_assert_eq!(sizes.iter().sum::<u64>(), n);
                    prop_assert!(sizes.iter().all(|&s| s > 0));
                }
                Err(PartitionError::PolicyDegenerate { .. }) => prop_assert!(policy != PartitionPolicy::Iid),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn non_iid_sizes_grow(k in 2usize..8, extra in 0u64..100_000, p in 1usize..4) {
            let policy = PartitionPolicy::ALL[p];
            let n = 30 * k as u64 + extra;
            // Exponential weights for large k can starve client 1 at n = 30k.
            if let Ok(sizes) = partition_sizes(n, k, policy) {
                prop_assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{:?}", sizes);
            } else {
                prop_assert!(policy == PartitionPolicy::Exponential);
            }
        }
    }
}
