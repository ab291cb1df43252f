//! Budget allocation over multiple treatments (a multi-choice knapsack).
//!
//! The budget constraint is dualized with a multiplier `λ`; for fixed `λ`
//! each individual independently takes `argmax_j r̂_ij − λ ĉ_ij`. The
//! multiplier is located by bisection on the estimated per-capita cost.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PredictionMatrix};
use crate::error::{validation, Error, Result};

/// Lower bound applied to predicted costs before the allocator uses them.
pub const COST_FLOOR: f64 = 1e-6;

/// Hard limit on `M^N` for [`brute_force_mckp`].
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Total budget `B` over the whole population.
    pub total_budget: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl BudgetSpec {
    pub fn new(total_budget: f64) -> Self {
        Self {
            total_budget,
            epsilon: 1e-4,
            max_iters: 60,
        }
    }

    /// Budget expressed per capita, scaled to `n` individuals.
    pub fn per_capita(per_capita: f64, n: usize) -> Self {
        Self::new(per_capita * n as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_budget >= 0.0) || !self.total_budget.is_finite() {
            return Err(validation("budget must be finite and non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(validation("epsilon must be positive"));
        }
        if self.max_iters == 0 {
            return Err(validation("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// How the bisection estimates the per-capita cost of a candidate policy.
#[derive(Debug, Clone, Copy)]
pub enum CostModel<'a> {
    /// Inverse-propensity estimate from factual RCT costs.
    Rct(&'a Dataset),
    /// Mean predicted cost of the chosen treatments; used when no labels exist.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    /// Chosen treatment per row; `z_ij = 1` iff `choice[i] == j`.
    pub choice: Vec<usize>,
    pub num_treatments: usize,
    pub lambda_star: f64,
    pub estimated_per_capita_cost: f64,
    pub estimated_per_capita_revenue: f64,
    pub iterations: usize,
    /// False when `max_iters` ran out before the terminal condition was met.
    pub converged: bool,
}

impl AllocationSolution {
    pub fn z(&self, i: usize, j: usize) -> bool {
        self.choice[i] == j
    }

    pub fn assignment_matrix(&self) -> Vec<Vec<u8>> {
        self.choice
            .iter()
            .map(|&c| (0..self.num_treatments).map(|j| u8::from(j == c)).collect())
            .collect()
    }
}

#[inline]
pub(crate) fn argmax_lowest(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, s) in scores.enumerate() {
        if s > best_val {
            best = j;
            best_val = s;
        }
    }
    best
}

/// Per-row `argmax_j (r̂_ij − λ ĉ_ij)`, ties to the lowest index.
pub fn dual_assignment(preds: &PredictionMatrix, lambda: f64) -> Vec<usize> {
    (0..preds.rows())
        .map(|i| {
            let r = preds.revenue_row(i);
            let c = preds.cost_row(i);
            argmax_lowest(r.iter().zip(c).map(|(r, c)| r - lambda * c))
        })
        .collect()
}

/// IPW per-capita totals `(r̄, c̄)` of a policy on RCT data:
/// `(1/N) Σ_i 1{t_i = choice_i} · y_i / p_{t_i}`.
pub fn ipw_per_capita(choice: &[usize], rct: &Dataset) -> (f64, f64) {
    let p = rct.propensities();
    let (mut r, mut c) = (0.0, 0.0);
    for (s, &k) in rct.samples().iter().zip(choice) {
        if s.treatment == k {
            r += s.revenue / p[k];
            c += s.cost / p[k];
        }
    }
    let n = rct.len() as f64;
    (r / n, c / n)
}

fn predicted_per_capita(choice: &[usize], preds: &PredictionMatrix) -> (f64, f64) {
    let (mut r, mut c) = (0.0, 0.0);
    for (i, &k) in choice.iter().enumerate() {
        r += preds.r(i, k);
        c += preds.c(i, k);
    }
    let n = preds.rows() as f64;
    (r / n, c / n)
}

fn per_capita(choice: &[usize], preds: &PredictionMatrix, model: CostModel<'_>) -> (f64, f64) {
    match model {
        CostModel::Rct(ds) => ipw_per_capita(choice, ds),
        CostModel::Predicted => predicted_per_capita(choice, preds),
    }
}

/// Upper end of the multiplier bracket, `max_ij r̂_ij / ĉ_ij` on floored costs.
pub fn lambda_upper_bound(preds: &PredictionMatrix) -> f64 {
    let floored = preds.with_cost_floor(COST_FLOOR);
    floored
        .revenues()
        .iter()
        .zip(floored.costs())
        .map(|(r, c)| r / c)
        .fold(0.0, f64::max)
}

/// Largest multiplier at which some row still switches to a costlier arm:
/// the maximum over rows and arm pairs of `(r̂_j − r̂_k) / (ĉ_j − ĉ_k)` with
/// `ĉ_j > ĉ_k`. Above it every row sits on its cheapest arm.
pub fn saturation_lambda(preds: &PredictionMatrix) -> f64 {
    let floored = preds.with_cost_floor(COST_FLOOR);
    let mut best: f64 = 0.0;
    for i in 0..floored.rows() {
        let (r, c) = (floored.revenue_row(i), floored.cost_row(i));
        for j in 0..r.len() {
            for k in 0..r.len() {
                if c[j] > c[k] && r[j] > r[k] {
                    best = best.max((r[j] - r[k]) / (c[j] - c[k]));
                }
            }
        }
    }
    best
}

/// Lagrangian-relaxation allocation with bisection on `λ`.
///
/// The search stops as soon as `|B/N − c̄(λ)| < ε`. If it instead runs out
/// of bracket (or iterations), the upper end of the bracket is returned,
/// which is the smallest multiplier known to keep the policy within budget.
///
/// The bracket starts at [`lambda_upper_bound`]. If that end still overspends
/// it is moved just past [`saturation_lambda`], beyond which no assignment
/// changes; if even that overspends, the budget is infeasible for these
/// predictions and that multiplier is returned with `converged = false`.
pub fn solve_allocation(
    preds: &PredictionMatrix,
    model: CostModel<'_>,
    budget: &BudgetSpec,
) -> Result<AllocationSolution> {
    budget.validate()?;
    if !preds.all_finite() {
        return Err(Error::NonFinite("prediction matrix".into()));
    }
    if let CostModel::Rct(ds) = model {
        if ds.len() != preds.rows() || ds.num_treatments() != preds.cols() {
            return Err(validation(format!(
                "predictions are {}x{} but dataset is {}x{}",
                preds.rows(),
                preds.cols(),
                ds.len(),
                ds.num_treatments()
            )));
        }
        ds.require_full_support()?;
    }
    let preds = preds.with_cost_floor(COST_FLOOR);
    let target = budget.total_budget / preds.rows() as f64;
    let eps = budget.epsilon;
    let finish = |lambda: f64, iterations: usize, converged: bool| {
        let choice = dual_assignment(&preds, lambda);
        let (r, c) = per_capita(&choice, &preds, model);
        AllocationSolution {
            choice,
            num_treatments: preds.cols(),
            lambda_star: lambda,
            estimated_per_capita_cost: c,
            estimated_per_capita_revenue: r,
            iterations,
            converged,
        }
    };

    let (_, cost_at_zero) = per_capita(&dual_assignment(&preds, 0.0), &preds, model);
    if cost_at_zero <= target + eps {
        return Ok(finish(0.0, 0, true));
    }

    let mut lo: f64 = 0.0;
    let mut hi = lambda_upper_bound(&preds).max(eps);
    let mut cost_at_hi = per_capita(&dual_assignment(&preds, hi), &preds, model).1;
    if cost_at_hi > target + eps {
        let past = saturation_lambda(&preds) * (1.0 + 1e-9) + eps;
        if past > hi {
            lo = hi;
            hi = past;
            cost_at_hi = per_capita(&dual_assignment(&preds, hi), &preds, model).1;
        }
    }
    if cost_at_hi > target + eps {
        warn!("budget {target} per capita is infeasible: cost at λ={hi} is {cost_at_hi}");
        return Ok(finish(hi, 0, false));
    }
    let mut iterations = 0;
    while hi - lo > eps {
        if iterations == budget.max_iters {
            warn!(
                "allocation bisection hit max_iters={} with bracket [{lo}, {hi}]",
                budget.max_iters
            );
            return Ok(finish(hi, iterations, false));
        }
        iterations += 1;
        let lambda = 0.5 * (lo + hi);
        let choice = dual_assignment(&preds, lambda);
        let (_, cost) = per_capita(&choice, &preds, model);
        let gap = target - cost;
        if gap.abs() < eps {
            return Ok(finish(lambda, iterations, true));
        }
        if gap > 0.0 {
            hi = lambda;
        } else {
            lo = lambda;
        }
    }
    Ok(finish(hi, iterations, true))
}

/// Exact optimum of the primal program by enumerating all `M^N` assignments.
pub fn brute_force_mckp(
    revenues: &[Vec<f64>],
    costs: &[Vec<f64>],
    budget: f64,
) -> Result<(Vec<usize>, f64)> {
    let n = revenues.len();
    if n == 0 || costs.len() != n {
        return Err(validation(
            "brute force needs matching non-empty revenue and cost rows",
        ));
    }
    let m = revenues[0].len();
    if m == 0 || revenues.iter().chain(costs).any(|row| row.len() != m) {
        return Err(validation("ragged revenue/cost rows"));
    }
    let combinations = (m as f64).powi(n as i32);
    if combinations > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            combinations,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let tol = 1e-12 * (1.0 + budget.abs());
    let mut current = vec![0usize; n];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let (mut value, mut cost) = (0.0, 0.0);
        for (i, &j) in current.iter().enumerate() {
            value += revenues[i][j];
            cost += costs[i][j];
        }
        if cost <= budget + tol && best.as_ref().map_or(true, |(_, v)| value > *v) {
            best = Some((current.clone(), value));
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == n {
                return best.ok_or_else(|| validation("no assignment satisfies the budget"));
            }
            current[pos] += 1;
            if current[pos] < m {
                break;
            }
            current[pos] = 0;
            pos += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EomResult {
    pub revenue: f64,
    pub cost: f64,
    pub lambda_star: f64,
    /// Whether the IPW cost stays within `B/N + ε`.
    pub within_budget: bool,
}

/// Expected outcome metric: IPW per-capita revenue and cost on RCT data of
/// the policy the predictions induce at the given budget.
pub fn eom_evaluate(
    preds: &PredictionMatrix,
    rct: &Dataset,
    budget: &BudgetSpec,
) -> Result<EomResult> {
    eom_allocation(preds, rct, budget).map(|(res, _)| res)
}

/// [`eom_evaluate`] together with the allocation it scored.
pub fn eom_allocation(
    preds: &PredictionMatrix,
    rct: &Dataset,
    budget: &BudgetSpec,
) -> Result<(EomResult, Vec<usize>)> {
    rct.require_rct()?;
    let sol = solve_allocation(preds, CostModel::Rct(rct), budget)?;
    let (revenue, cost) = ipw_per_capita(&sol.choice, rct);
    let res = EomResult {
        revenue,
        cost,
        lambda_star: sol.lambda_star,
        within_budget: cost <= budget.total_budget / rct.len() as f64 + budget.epsilon,
    };
    Ok((res, sol.choice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, Source};

    fn preds(r: &[Vec<f64>], c: &[Vec<f64>]) -> PredictionMatrix {
        PredictionMatrix::from_rows(r, c).unwrap()
    }

    #[test]
    fn dual_assignment_cases() {
        let p = preds(&[vec![1.0, 3.0, 2.0]], &[vec![0.0, 0.0, 0.0]]);
        assert_eq!(dual_assignment(&p, 0.0), vec![1]);
        let p = preds(&[vec![1.0, 1.0, 1.0]], &[vec![0.1, 1.0, 2.0]]);
        assert_eq!(dual_assignment(&p, 1e9), vec![0]);
        let p = preds(&[vec![2.0, 2.0]], &[vec![1.0, 1.0]]);
        assert_eq!(dual_assignment(&p, 0.5), vec![0]);
    }

    #[test]
    fn unconstrained_budget_takes_revenue_argmax() {
        let p = preds(
            &[vec![1.0, 4.0, 2.0], vec![5.0, 1.0, 0.0]],
            &[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]],
        );
        let sol = solve_allocation(&p, CostModel::Predicted, &BudgetSpec::new(2.0 * 3.0)).unwrap();
        assert_eq!(sol.lambda_star, 0.0);
        assert_eq!(sol.choice, vec![1, 0]);
    }

    #[test]
    fn three_row_instance_matches_enumeration() {
        // The optimum treats rows 0 and 1 at total cost 10.01.
        let r = vec![vec![0.0, 10.0], vec![0.0, 6.0], vec![0.0, 1.0]];
        let c = vec![vec![0.01, 5.0]; 3];
        let (best, value) = brute_force_mckp(&r, &c, 10.02).unwrap();
        assert_eq!(best, vec![1, 1, 0]);
        assert_eq!(value, 16.0);
        let sol = solve_allocation(
            &preds(&r, &c),
            CostModel::Predicted,
            &BudgetSpec::new(10.02),
        )
        .unwrap();
        assert_eq!(sol.choice, vec![1, 1, 0]);
        // at exactly B = 10 the two-treatment plan is over budget by 0.01
        let (_, value) = brute_force_mckp(&r, &c, 10.0).unwrap();
        assert_eq!(value, 10.0);
    }

    #[test]
    fn infeasible_budget_is_flagged() {
        // the treatment is predicted cheaper than control, so no multiplier helps
        let r = vec![vec![0.0, 3.0]; 4];
        let c = vec![vec![2.0, 1.0]; 4];
        let sol =
            solve_allocation(&preds(&r, &c), CostModel::Predicted, &BudgetSpec::new(1.0)).unwrap();
        assert!(!sol.converged);
        assert!(sol.estimated_per_capita_cost > 0.25);
        assert!(sol.lambda_star.is_finite() && sol.lambda_star <= 3.0);
    }

    #[test]
    fn bracket_extends_past_the_ratio_bound() {
        // max r/c is 9.09 but the switch to the cheaper arm happens at λ = 10
        let r = vec![vec![0.9, 1.0]];
        let c = vec![vec![0.1, 0.11]];
        assert!(lambda_upper_bound(&preds(&r, &c)) < 10.0);
        assert!((saturation_lambda(&preds(&r, &c)) - 10.0).abs() < 1e-9);
        let sol =
            solve_allocation(&preds(&r, &c), CostModel::Predicted, &BudgetSpec::new(0.1)).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.choice, vec![0]);
        assert!(sol.lambda_star > 10.0 && sol.lambda_star < 10.01);
    }

    #[test]
    fn zero_budget_assigns_free_control() {
        let r = vec![vec![1.0, 5.0, 7.0], vec![0.5, 2.0, 9.0]];
        let c = vec![vec![0.0, 2.0, 3.0], vec![0.0, 1.0, 4.0]];
        let sol =
            solve_allocation(&preds(&r, &c), CostModel::Predicted, &BudgetSpec::new(0.0)).unwrap();
        assert_eq!(sol.choice, vec![0, 0]);
    }

    #[test]
    fn brute_force_single_row() {
        let r = vec![vec![1.0, 5.0]];
        let c = vec![vec![0.0, 3.0]];
        assert_eq!(brute_force_mckp(&r, &c, 3.0).unwrap().1, 5.0);
        assert_eq!(brute_force_mckp(&r, &c, 2.0).unwrap().1, 1.0);
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let r = vec![vec![1.0; 4]; 12];
        assert!(matches!(
            brute_force_mckp(&r, &r, 1.0),
            Err(Error::InstanceTooLarge { .. })
        ));
    }

    fn rct(rows: &[(usize, f64, f64)], m: usize) -> Dataset {
        let samples = rows
            .iter()
            .map(|&(t, r, c)| Sample {
                features: vec![0.0],
                treatment: t,
                revenue: r,
                cost: c,
            })
            .collect();
        Dataset::new(samples, m, Source::Rct).unwrap()
    }

    #[test]
    fn eom_forced_treatment_is_group_mean() {
        let ds = rct(
            &[(0, 1.0, 0.0), (1, 4.0, 1.0), (0, 3.0, 0.0), (1, 2.0, 1.0)],
            2,
        );
        // everybody prefers treatment 1, budget unconstrained
        let p = preds(&vec![vec![0.0, 1.0]; 4], &vec![vec![0.0, 0.0]; 4]);
        let res = eom_evaluate(&p, &ds, &BudgetSpec::new(100.0)).unwrap();
        assert!((res.revenue - 3.0).abs() < 1e-12);
        assert!((res.cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eom_single_treatment_is_sample_mean() {
        let ds = rct(&[(0, 1.0, 0.5), (0, 2.0, 1.5), (0, 6.0, 1.0)], 1);
        let p = preds(&vec![vec![1.0]; 3], &vec![vec![1.0]; 3]);
        let res = eom_evaluate(&p, &ds, &BudgetSpec::new(0.1)).unwrap();
        assert!((res.revenue - 3.0).abs() < 1e-12);
        assert!((res.cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eom_rejects_empty_group() {
        let ds = rct(&[(0, 1.0, 0.5), (0, 2.0, 1.5)], 2);
        let p = preds(&vec![vec![1.0, 2.0]; 2], &vec![vec![1.0, 2.0]; 2]);
        assert!(matches!(
            eom_evaluate(&p, &ds, &BudgetSpec::new(1.0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn invalid_budget_spec() {
        let p = preds(&[vec![1.0]], &[vec![1.0]]);
        let mut b = BudgetSpec::new(1.0);
        b.epsilon = 0.0;
        assert!(solve_allocation(&p, CostModel::Predicted, &b).is_err());
    }
}
