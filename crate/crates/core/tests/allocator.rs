use bidfcl_core::data::{Dataset, PredictionMatrix, Sample, Source};
use bidfcl_core::mckp::{
    brute_force_mckp, dual_assignment, eom_evaluate, ipw_per_capita, solve_allocation, BudgetSpec,
    CostModel,
};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    (1usize..=10, 1usize..=4).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..10.0, m), n),
            prop::collection::vec(prop::collection::vec(0.1f64..5.0, m), n),
            0.0f64..1.0,
        )
            .prop_map(|(r, c, t)| {
                // budgets between the cheapest and the most expensive plan
                let lo: f64 = c
                    .iter()
                    .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
                    .sum();
                let hi: f64 = c
                    .iter()
                    .map(|row| row.iter().cloned().fold(0.0, f64::max))
                    .sum();
                (r, c, lo + t * (hi - lo))
            })
    })
}

fn primal(choice: &[usize], r: &[Vec<f64>], c: &[Vec<f64>]) -> (f64, f64) {
    choice
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(rv, cv), (i, &j)| (rv + r[i][j], cv + c[i][j]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lagrangian_gap_is_bounded_by_largest_revenue((r, c, budget) in instance()) {
        let preds = PredictionMatrix::from_rows(&r, &c).unwrap();
        let spec = BudgetSpec::new(budget);
        let sol = solve_allocation(&preds, CostModel::Predicted, &spec).unwrap();
        let (_, opt) = brute_force_mckp(&r, &c, budget).unwrap();
        let (value, cost) = primal(&sol.choice, &r, &c);
        let max_r = r.iter().flatten().cloned().fold(0.0, f64::max);
        prop_assert!(value >= opt - max_r - 1e-9, "value {value} opt {opt} max_r {max_r}");
        prop_assert!(cost <= budget + spec.epsilon * r.len() as f64 + 1e-9, "cost {cost} budget {budget}");
        prop_assert!(sol.converged);
    }

    #[test]
    fn dual_choice_revenue_and_cost_fall_with_lambda((r, c, _) in instance(), l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
        let preds = PredictionMatrix::from_rows(&r, &c).unwrap();
        let low = dual_assignment(&preds, l1);
        let high = dual_assignment(&preds, l1 + dl);
        for i in 0..r.len() {
            prop_assert!(c[i][low[i]] >= c[i][high[i]] - 1e-12);
            prop_assert!(r[i][low[i]] >= r[i][high[i]] - 1e-12);
        }
    }

    #[test]
    fn dual_choice_is_scale_invariant((r, c, _) in instance(), lambda in 0.0f64..5.0, e in -8i32..8) {
        let k = 2f64.powi(e);
        let preds = PredictionMatrix::from_rows(&r, &c).unwrap();
        prop_assert_eq!(dual_assignment(&preds.scaled(k), lambda), dual_assignment(&preds, lambda));
    }

    #[test]
    fn unlimited_budget_is_the_revenue_argmax((r, c, _) in instance()) {
        let preds = PredictionMatrix::from_rows(&r, &c).unwrap();
        let sol = solve_allocation(&preds, CostModel::Predicted, &BudgetSpec::new(1e9)).unwrap();
        prop_assert_eq!(sol.lambda_star, 0.0);
        prop_assert_eq!(sol.choice, dual_assignment(&preds, 0.0));
    }

    #[test]
    fn constant_policy_ipw_is_the_group_mean(
        rows in prop::collection::vec((0usize..3, 0.0f64..10.0, 0.0f64..2.0), 6..40),
        arm in 0usize..3,
    ) {
        let mut samples: Vec<Sample> = rows.iter().map(|&(t, r, c)| Sample { features: vec![0.0], treatment: t, revenue: r, cost: c }).collect();
        // make sure every arm is present
        for t in 0..3 {
            samples.push(Sample { features: vec![0.0], treatment: t, revenue: 1.0, cost: 0.5 });
        }
        let ds = Dataset::new(samples, 3, Source::Rct).unwrap();
        let group: Vec<&Sample> = ds.samples().iter().filter(|s| s.treatment == arm).collect();
        let mean_r = group.iter().map(|s| s.revenue).sum::<f64>() / group.len() as f64;
        let mean_c = group.iter().map(|s| s.cost).sum::<f64>() / group.len() as f64;
        let (r, c) = ipw_per_capita(&vec![arm; ds.len()], &ds);
        prop_assert!((r - mean_r).abs() < 1e-9 && (c - mean_c).abs() < 1e-9);
        let p: f64 = ds.propensities().iter().sum();
        prop_assert!((p - 1.0).abs() < 1e-12);
        prop_assert!((ds.propensities()[arm] - group.len() as f64 / ds.len() as f64).abs() < 1e-15);
    }
}

#[test]
fn eom_reports_budget_status() {
    let samples: Vec<Sample> = (0..8)
        .map(|i| Sample {
            features: vec![i as f64],
            treatment: i % 2,
            revenue: if i % 2 == 1 { 3.0 } else { 0.0 },
            cost: if i % 2 == 1 { 1.0 } else { 0.0 },
        })
        .collect();
    let ds = Dataset::new(samples, 2, Source::Rct).unwrap();
    let good =
        PredictionMatrix::from_rows(&vec![vec![0.0, 3.0]; 8], &vec![vec![0.0, 1.0]; 8]).unwrap();
    let res = eom_evaluate(&good, &ds, &BudgetSpec::per_capita(2.0, 8)).unwrap();
    assert!(res.within_budget);
    assert_eq!(res.revenue, 3.0);
    // treatment predicted cheaper than control: no multiplier can stop it
    let bad =
        PredictionMatrix::from_rows(&vec![vec![0.0, 3.0]; 8], &vec![vec![2.0, 1.0]; 8]).unwrap();
    let res = eom_evaluate(&bad, &ds, &BudgetSpec::per_capita(0.5, 8)).unwrap();
    assert!(!res.within_budget);
}
