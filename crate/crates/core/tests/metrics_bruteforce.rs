mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use setexp::corpus::EntityId;
use setexp::metrics::{average_precision_at_k, kendall_tau, precision_at_k};

use common::{brute_ap, brute_kendall, brute_precision};

fn universe() -> Vec<EntityId> {
    (0..30).map(|i| EntityId::new(format!("x{i:02}"))).collect()
}

prop_compose! {
    fn triple()(ranked in Just(universe()).prop_shuffle(), len in 0usize..30,
                truth in proptest::sample::subsequence(universe(), 1..20), k in 1usize..40)
        -> (Vec<EntityId>, HashSet<EntityId>, usize) {
        (ranked.into_iter().take(len).collect(), truth.into_iter().collect(), k)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_agree_with_brute_force((ranked, truth, k) in triple()) {
        prop_assert_eq!(average_precision_at_k::<_, f64>(&ranked, &truth, k), brute_ap(&ranked, &truth, k));
        prop_assert_eq!(precision_at_k::<_, f64>(&ranked, &truth, k), brute_precision(&ranked, &truth, k));
    }

    #[test]
    fn metrics_stay_in_unit_interval((ranked, truth, k) in triple()) {
        let ap: f64 = average_precision_at_k(&ranked, &truth, k);
        let p: f64 = precision_at_k(&ranked, &truth, k);
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn kendall_agrees_with_pair_enumeration(a in Just(universe()).prop_shuffle(), b in Just(universe()).prop_shuffle()) {
        prop_assert_eq!(kendall_tau::<_, f64>(&a, &b), brute_kendall(&a, &b));
        prop_assert_eq!(kendall_tau::<_, f64>(&a, &a), 1.0);
    }
}
