mod common;

use common::*;
use gat_mamba::graph_build::{positional_encoding, TileGraph, TileNode, DEFAULT_K};
use gat_mamba::ssm::{hold_factor, scan_kernel, Discretization};
use gat_mamba::survival::{
    c_index, cox_loss_and_grad, km_curve, logrank_test, stratify_by_median, RiskGroup,
    SurvivalBatch, TieMethod,
};
use proptest::prelude::*;

fn survival_data(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2..max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(1u32..40, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn nodes(max_n: usize) -> impl Strategy<Value = Vec<TileNode>> {
    prop::collection::btree_set((0u32..12, 0u32..12), 1..max_n).prop_flat_map(|cells| {
        let n = cells.len();
        (
            Just(cells),
            prop::collection::vec(0u8..6, n),
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), n),
        )
            .prop_map(|(cells, subtypes, feats)| {
                cells
                    .into_iter()
                    .zip(subtypes)
                    .zip(feats)
                    .enumerate()
                    .map(|(i, (((row, col), subtype), features))| TileNode {
                        node_id: i,
                        row,
                        col,
                        subtype,
                        features,
                    })
                    .collect()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn c_index_of_negated_risks_is_complement((risks, times, mut events) in survival_data(60)) {
        events[0] = true;
        let a = SurvivalBatch::new(risks.clone(), times.clone(), events.clone()).unwrap();
        let b = SurvivalBatch::new(risks.iter().map(|r| -r).collect(), times, events).unwrap();
        if let (Ok(ca), Ok(cb)) = (c_index(&a), c_index(&b)) {
            prop_assert!((0.0..=1.0).contains(&ca));
            prop_assert!((ca + cb - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn c_index_ignores_monotone_rescaling((risks, times, mut events) in survival_data(60)) {
        events[0] = true;
        let a = SurvivalBatch::new(risks.clone(), times.clone(), events.clone()).unwrap();
        let b = SurvivalBatch::new(risks.iter().map(|r| (2.0 * r).exp()).collect(), times, events).unwrap();
        prop_assert_eq!(c_index(&a).ok(), c_index(&b).ok());
    }

    #[test]
    fn cox_loss_is_shift_invariant((risks, times, mut events) in survival_data(60), shift in -5.0..5.0f64) {
        events[0] = true;
        let (l0, g0) = cox_loss_and_grad(&risks, &times, &events, TieMethod::Breslow).unwrap();
        let shifted: Vec<f64> = risks.iter().map(|r| r + shift).collect();
        let (l1, _) = cox_loss_and_grad(&shifted, &times, &events, TieMethod::Breslow).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-10);
        prop_assert!(g0.iter().sum::<f64>().abs() < 1e-10);
        prop_assert!((l0 - naive_cox(&risks, &times, &events)).abs() < 1e-10);
    }

    #[test]
    fn efron_equals_breslow_without_tied_events(risks in prop::collection::vec(-2.0..2.0f64, 2..30)) {
        let n = risks.len();
        let times: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let events: Vec<bool> = (0..n).map(|i| i % 3 != 2).collect();
        let (b, _) = cox_loss_and_grad(&risks, &times, &events, TieMethod::Breslow).unwrap();
        let (e, _) = cox_loss_and_grad(&risks, &times, &events, TieMethod::Efron).unwrap();
        prop_assert!((b - e).abs() < 1e-12);
    }

    #[test]
    fn km_is_monotone_and_bounded((_, times, events) in survival_data(80)) {
        let km = km_curve(&times, &events).unwrap();
        prop_assert_eq!(km[0].survival, 1.0);
        for w in km.windows(2) {
            prop_assert!(w[1].survival <= w[0].survival);
            prop_assert!(w[1].time > w[0].time || w[0].time == 0.0);
        }
        prop_assert!(km.last().unwrap().survival >= 0.0);
    }

    #[test]
    fn logrank_p_value_is_a_probability((_, times, mut events) in survival_data(80)) {
        events[0] = true;
        let half = times.len() / 2;
        if half > 0 {
            if let Ok(lr) = logrank_test((&times[..half], &events[..half]), (&times[half..], &events[half..])) {
                prop_assert!((0.0..=1.0).contains(&lr.p_value));
                prop_assert!(lr.statistic >= 0.0);
            }
        }
    }

    #[test]
    fn median_split_uses_training_threshold(train in prop::collection::vec(-3.0..3.0f64, 1..40),
                                            test in prop::collection::vec(-3.0..3.0f64, 1..40)) {
        let (thr, groups) = stratify_by_median(&train, &test).unwrap();
        for (r, g) in test.iter().zip(&groups) {
            prop_assert_eq!(*g == RiskGroup::High, *r > thr);
        }
    }

    #[test]
    fn built_graph_is_valid_and_order_free(nodes in nodes(40)) {
        let g = TileGraph::build(nodes.clone(), DEFAULT_K).unwrap();
        g.check_invariants().unwrap();
        let mut rev = nodes;
        rev.reverse();
        prop_assert_eq!(TileGraph::build(rev, DEFAULT_K).unwrap(), g);
    }

    #[test]
    fn positional_encoding_is_bounded(row in 0u32..100_000, col in 0u32..100_000) {
        prop_assert!(positional_encoding(row, col).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn hold_factor_is_smooth_through_zero(z in -1e-6..1e-6f64) {
        prop_assert!((hold_factor(z) - (1.0 + z / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn scan_segments_are_independent(l1 in 1usize..10, l2 in 1usize..10, seed in 0u64..1000) {
        let mut r = rng(seed);
        let (d, s) = (3, 4);
        let l = l1 + l2;
        let u = random_mat(&mut r, l, d, 1.0);
        let dt = random_mat(&mut r, l, d, 1.0).mapv(|v| v.abs() + 0.01);
        let a = random_mat(&mut r, d, s, 1.0).mapv(|v| -v.abs() - 0.1);
        let b = random_mat(&mut r, l, s, 1.0);
        let c = random_mat(&mut r, l, s, 1.0);
        let (y, _) = scan_kernel(&u, &dt, &a, &b, &c, &[(0, l1), (l1, l)], Discretization::ZeroOrderHold).unwrap();
        let tail = |m: &Mat| m.slice(ndarray::s![l1.., ..]).to_owned();
        let want = naive_scan(&tail(&u), &tail(&dt), &a, &tail(&b), &tail(&c));
        prop_assert!(max_rel_err(&tail(&y), &want) < 1e-10);
    }
}
