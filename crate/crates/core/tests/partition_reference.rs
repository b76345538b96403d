use flip_core::partition::{partition_sizes, plan, PartitionPolicy};
use proptest::prelude::*;

use PartitionPolicy::*;

/// (dataset, total, policy, sizes) for the three reference corpora.
const ROWS: [(&str, u64, PartitionPolicy, [u64; 4]); 12] = [
    ("QQP", 363848, Iid, [90962, 90962, 90962, 90962]),
    ("QQP", 363846, Linear, [36384, 72769, 109153, 145540]),
    ("QQP", 363846, Square, [12128, 48512, 109153, 194053]),
    ("QQP", 363846, Exponential, [11664, 31707, 86188, 234287]),
    ("QNLI", 104743, Iid, [26186, 26186, 26186, 26185]),
    ("QNLI", 104743, Linear, [10474, 20948, 31422, 41899]),
    ("QNLI", 104743, Square, [3491, 13965, 31422, 55865]),
    ("QNLI", 104743, Exponential, [3357, 9127, 24811, 67448]),
    ("SST2", 67349, Iid, [16838, 16837, 16837, 16837]),
    ("SST2", 67349, Linear, [6734, 13469, 20204, 26942]),
    ("SST2", 67349, Square, [2244, 8979, 20204, 35922]),
    ("SST2", 67349, Exponential, [2159, 5869, 15953, 43368]),
];

#[test]
fn reference_rows_match_exactly() {
    for (name, n, policy, expected) in ROWS {
        let sizes = partition_sizes(n, 4, policy).unwrap();
        assert_eq!(sizes, expected, "{name} {policy}");
        assert_eq!(sizes.iter().sum::<u64>(), n);
    }
}

#[test]
fn qqp_totals_differ_between_iid_and_skewed_rows() {
    // The IID row only reproduces with two more records than the skewed rows.
    assert_ne!(partition_sizes(363846, 4, Iid).unwrap(), [90962; 4]);
    assert_ne!(partition_sizes(363848, 4, Linear).unwrap(), ROWS[1].3);
}

#[test]
fn small_datasets_degenerate_under_skew() {
    assert!(partition_sizes(10, 4, Exponential).is_err());
    assert!(partition_sizes(3, 4, Iid).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn plans_cover_every_record_once(n in 40usize..3000, k in 1usize..6, seed: u64, p in 0usize..4) {
        let policy = PartitionPolicy::ALL[p];
        if let Ok(plan) = plan(n, k, policy, seed) {
            let mut seen = vec![false; n];
            for (client, idx) in plan.assignments.iter().enumerate() {
                prop_assert_eq!(idx.len() as u64, plan.sizes[client]);
                for &i in idx {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }
    }

    #[test]
    fn skewed_sizes_are_nondecreasing(n in 1000u64..10_000_000, k in 2usize..8, p in 1usize..4) {
        let policy = PartitionPolicy::ALL[p];
        if let Ok(sizes) = partition_sizes(n, k, policy) {
            prop_assert_eq!(sizes.iter().sum::<u64>(), n);
            prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
