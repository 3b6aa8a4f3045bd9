mod common;

use common::planner_cases::{check_case, cost_model_of, random_instance, table_of};
use hetsplit::model::WeightId;
use hetsplit::planner::{adapter_cost, greedy_assign, sort_candidates, threshold_update, RankSet};
use proptest::prelude::*;

#[test]
fn matches_naive_reference_on_random_instances() {
    let mut base_feasible = 0;
    for seed in 0..1500u64 {
        let inst = random_instance(seed);
        let out = check_case(&inst);
        assert!(out.greedy_matches, "greedy mismatch, seed {seed}: {inst:?}");
        assert!(out.select_matches, "split selection mismatch, seed {seed}: {inst:?}");
        if out.base_feasible {
            base_feasible += 1;
            assert!(out.plan_within_budget, "budget violated, seed {seed}: {inst:?}");
        }
    }
    assert!(base_feasible >= 1000, "only {base_feasible} feasible instances");
}

proptest! {
    #[test]
    fn skipped_weights_could_not_afford_the_smallest_rank(seed in any::<u64>(), budget in 0.0f64..2000.0) {
        let inst = random_instance(seed);
        let table = table_of(&inst);
        let cm = cost_model_of(&inst);
        let q = RankSet::new(inst.ranks.clone()).unwrap();
        let order = sort_candidates(WeightId::all(inst.n_blocks), &table, &q, &cm);
        let assigned = greedy_assign(budget, &order, &q, &cm);
        let mut left = budget;
        let mut total = 0.0;
        for id in &order {
            match assigned.get(id) {
                Some(&r) => {
                    let c = adapter_cost(*id, r, &cm);
                    prop_assert!(c <= left);
                    // nothing larger would have fit
                    if let Some(&bigger) = q.as_slice().iter().find(|&&x| x > r) {
                        prop_assert!(adapter_cost(*id, bigger, &cm) > left);
                    }
                    left -= c;
                    total += c;
                }
                None => prop_assert!(adapter_cost(*id, q.min(), &cm) > left),
            }
        }
        prop_assert!(total <= budget);
    }

    #[test]
    fn threshold_stays_positive(tau0 in 1e-6f64..10.0, eps in 1e-6f64..1.0, deltas in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let mut tau = tau0;
        for d in deltas {
            tau = threshold_update(tau, d, eps);
            prop_assert!(tau > 0.0);
        }
    }
}
