//! Training objectives over prediction matrices.
//!
//! Differentiable losses return their value together with the gradient with
//! respect to the predictions (and gates, where applicable); the network
//! reverse pass maps those onto parameters. The decision loss itself and the
//! finite-difference gradient tables are plain `f64` computations whose
//! results are frozen before entering a differentiable surrogate.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PredictionMatrix, Sample};
use crate::error::{validation, Result};
use crate::mckp::{argmax_lowest, solve_allocation, BudgetSpec, CostModel, COST_FLOOR};
use crate::scalar::Scalar;

/// Smallest score gap a finite-difference table divides by.
pub const H_FLOOR: f64 = 1e-6;

pub const DEFAULT_TAU: f64 = 1.0;

/// Sigmoid gates blending teacher and target predictions, one pair per (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeGates<T = f64> {
    gates: PredictionMatrix<T>,
}

impl<T: Scalar> BridgeGates<T> {
    /// Builds gates from raw `(revenue, cost)` values already in (0, 1).
    pub fn new(n: usize, m: usize, w_r: Vec<T>, w_c: Vec<T>) -> Result<Self> {
        Ok(Self {
            gates: PredictionMatrix::new(n, m, w_r, w_c)?,
        })
    }

    pub fn constant(n: usize, m: usize, w_r: f64, w_c: f64) -> Self {
        Self {
            gates: PredictionMatrix::new(
                n,
                m,
                vec![T::from_f64(w_r); n * m],
                vec![T::from_f64(w_c); n * m],
            )
            .expect("shape is consistent"),
        }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            gates: PredictionMatrix::zeros(n, m),
        }
    }

    #[inline]
    pub fn w_r(&self, i: usize, j: usize) -> T {
        self.gates.r(i, j)
    }

    #[inline]
    pub fn w_c(&self, i: usize, j: usize) -> T {
        self.gates.c(i, j)
    }

    pub fn rows(&self) -> usize {
        self.gates.rows()
    }

    pub fn cols(&self) -> usize {
        self.gates.cols()
    }

    pub fn w_r_mut(&mut self, i: usize, j: usize) -> &mut T {
        self.gates.revenue_mut(i, j)
    }

    pub fn w_c_mut(&mut self, i: usize, j: usize) -> &mut T {
        self.gates.cost_mut(i, j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualLabels {
    pub r_cf: Vec<f64>,
    pub c_cf: Vec<f64>,
}

/// `r_cf = teacher · w_r + target · (1 − w_r)`, likewise for costs.
pub fn counterfactual_labels(
    target: &PredictionMatrix,
    teacher: &PredictionMatrix,
    gates: &BridgeGates,
) -> CounterfactualLabels {
    let n = target.rows();
    let m = target.cols();
    let mut r_cf = Vec::with_capacity(n * m);
    let mut c_cf = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let wr = gates.w_r(i, j);
            let wc = gates.w_c(i, j);
            r_cf.push(teacher.r(i, j) * wr + target.r(i, j) * (1.0 - wr));
            c_cf.push(teacher.c(i, j) * wc + target.c(i, j) * (1.0 - wc));
        }
    }
    CounterfactualLabels { r_cf, c_cf }
}

/// Frozen `∂L_DL/∂z'_ij` entries and the multiplier they were computed at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateGradientTable {
    pub n: usize,
    pub m: usize,
    pub dl_dz: Vec<f64>,
    pub lambda: f64,
}

impl SurrogateGradientTable {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dl_dz[i * self.m + j]
    }
}

fn check_shape<T: Copy>(preds: &PredictionMatrix<T>, ds: &Dataset) -> Result<()> {
    if preds.rows() != ds.len() || preds.cols() != ds.num_treatments() {
        return Err(validation(format!(
            "predictions are {}x{} but dataset is {}x{}",
            preds.rows(),
            preds.cols(),
            ds.len(),
            ds.num_treatments()
        )));
    }
    Ok(())
}

/// Factual mean squared error: `(1/N) Σ_i (r_i − r̂_{i t_i})² + (c_i − ĉ_{i t_i})²`.
pub fn prediction_loss_rct<T: Scalar>(
    preds: &PredictionMatrix<T>,
    ds: &Dataset,
) -> Result<(T, PredictionMatrix<T>)> {
    check_shape(preds, ds)?;
    let n = ds.len() as f64;
    let mut grad = PredictionMatrix::zeros(preds.rows(), preds.cols());
    let mut loss = T::zero();
    for (i, s) in ds.samples().iter().enumerate() {
        let t = s.treatment;
        let er = T::from_f64(s.revenue) - preds.r(i, t);
        let ec = T::from_f64(s.cost) - preds.c(i, t);
        loss += er * er + ec * ec;
        *grad.revenue_mut(i, t) = er.scale(-2.0 / n);
        *grad.cost_mut(i, t) = ec.scale(-2.0 / n);
    }
    Ok((loss.scale(1.0 / n), grad))
}

/// Gradients of the parameterized prediction loss.
pub struct ParameterizedLossGrad<T> {
    pub target: PredictionMatrix<T>,
    pub gates: BridgeGates<T>,
}

/// Factual MSE plus the counterfactual term against gated pseudo-labels.
///
/// The counterfactual residual is `r_cf − r̂ = w_r · (teacher − r̂)`; both the
/// gate and the target prediction stay differentiable. The factual part is a
/// mean over `N`, the counterfactual part a mean over the `N (M − 1)` pairs
/// with `j ≠ t_i`.
pub fn parameterized_prediction_loss<T: Scalar>(
    target: &PredictionMatrix<T>,
    teacher: &PredictionMatrix,
    gates: &BridgeGates<T>,
    ds: &Dataset,
) -> Result<(T, ParameterizedLossGrad<T>)> {
    check_shape(target, ds)?;
    if teacher.rows() != target.rows()
        || teacher.cols() != target.cols()
        || gates.rows() != target.rows()
        || gates.cols() != target.cols()
    {
        return Err(validation("teacher, gate and target shapes differ"));
    }
    let n = target.rows();
    let m = target.cols();
    let factual_scale = 1.0 / n as f64;
    let cf_scale = if m > 1 {
        1.0 / (n * (m - 1)) as f64
    } else {
        0.0
    };
    let mut g_target = PredictionMatrix::zeros(n, m);
    let mut g_gates = BridgeGates::zeros(n, m);
    let mut factual = T::zero();
    let mut counterfactual = T::zero();
    for (i, s) in ds.samples().iter().enumerate() {
        for j in 0..m {
            if j == s.treatment {
                let er = T::from_f64(s.revenue) - target.r(i, j);
                let ec = T::from_f64(s.cost) - target.c(i, j);
                factual += er * er + ec * ec;
                *g_target.revenue_mut(i, j) = er.scale(-2.0 * factual_scale);
                *g_target.cost_mut(i, j) = ec.scale(-2.0 * factual_scale);
            } else {
                let wr = gates.w_r(i, j);
                let wc = gates.w_c(i, j);
                let dr = T::from_f64(teacher.r(i, j)) - target.r(i, j);
                let dc = T::from_f64(teacher.c(i, j)) - target.c(i, j);
                let rr = wr * dr;
                let rc = wc * dc;
                counterfactual += rr * rr + rc * rc;
                *g_target.revenue_mut(i, j) = (rr * wr).scale(-2.0 * cf_scale);
                *g_target.cost_mut(i, j) = (rc * wc).scale(-2.0 * cf_scale);
                *g_gates.w_r_mut(i, j) = (rr * dr).scale(2.0 * cf_scale);
                *g_gates.w_c_mut(i, j) = (rc * dc).scale(2.0 * cf_scale);
            }
        }
    }
    let loss = factual.scale(factual_scale) + counterfactual.scale(cf_scale);
    Ok((
        loss,
        ParameterizedLossGrad {
            target: g_target,
            gates: g_gates,
        },
    ))
}

/// Unbiased decision loss of a fixed policy: `−Σ_i 1{t_i = choice_i} r_i / N_{t_i}`.
pub fn decision_loss_of_policy(choice: &[usize], rct: &Dataset) -> f64 {
    let counts = rct.group_counts();
    -rct.samples()
        .iter()
        .zip(choice)
        .filter(|(s, &k)| s.treatment == k)
        .map(|(s, _)| s.revenue / counts[s.treatment] as f64)
        .sum::<f64>()
}

/// Decision loss of the allocation the predictions induce under `budget`.
pub fn decision_loss_unbiased(
    preds: &PredictionMatrix,
    rct: &Dataset,
    budget: &BudgetSpec,
) -> Result<f64> {
    rct.require_rct()?;
    check_shape(preds, rct)?;
    let sol = solve_allocation(preds, CostModel::Rct(rct), budget)?;
    Ok(decision_loss_of_policy(&sol.choice, rct))
}

/// Dual decision loss summed over a multiplier grid.
pub fn dual_decision_loss(preds: &PredictionMatrix, rct: &Dataset, lambdas: &[f64]) -> Result<f64> {
    rct.require_rct()?;
    check_shape(preds, rct)?;
    let floored = preds.with_cost_floor(COST_FLOOR);
    let counts = rct.group_counts();
    let mut total = 0.0;
    for &lambda in lambdas {
        let choice = crate::mckp::dual_assignment(&floored, lambda);
        for (s, &k) in rct.samples().iter().zip(&choice) {
            if s.treatment == k {
                total -= (s.revenue - lambda * s.cost) / counts[k] as f64;
            }
        }
    }
    Ok(total)
}

fn softmax_into<T: Scalar>(scores: &[T], out: &mut Vec<T>) {
    let max = scores
        .iter()
        .map(|s| s.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = T::from_f64(max);
    out.clear();
    out.extend(scores.iter().map(|&s| (s - shift).exp()));
    let sum = out.iter().fold(T::zero(), |a, &b| a + b);
    for q in out.iter_mut() {
        *q = *q / sum;
    }
}

fn scores_into<T: Scalar>(
    preds: &PredictionMatrix<T>,
    i: usize,
    lambda: f64,
    tau: f64,
    out: &mut Vec<T>,
) {
    let inv_tau = 1.0 / tau;
    out.clear();
    out.extend(
        preds
            .revenue_row(i)
            .iter()
            .zip(preds.cost_row(i))
            .map(|(&r, &c)| (r - c.scale(lambda)).scale(inv_tau)),
    );
}

/// `−(1/N) Σ_i (1/p_{t_i}) softmax_j((r̂_ij − λĉ_ij)/τ)[t_i] · payoff_i`, accumulated into `grad`.
fn softmax_policy_term<T: Scalar>(
    preds: &PredictionMatrix<T>,
    rct: &Dataset,
    lambda: f64,
    tau: f64,
    payoff: impl Fn(&Sample) -> f64,
    grad: &mut PredictionMatrix<T>,
) -> T {
    let counts = rct.group_counts();
    let m = preds.cols();
    let mut loss = T::zero();
    let mut scores = Vec::with_capacity(m);
    let mut q = Vec::with_capacity(m);
    for (i, s) in rct.samples().iter().enumerate() {
        let t = s.treatment;
        let coef = -payoff(s) / counts[t] as f64;
        if coef == 0.0 {
            continue;
        }
        scores_into(preds, i, lambda, tau, &mut scores);
        softmax_into(&scores, &mut q);
        let qt = q[t];
        loss += qt.scale(coef);
        for j in 0..m {
            let indicator = if j == t { T::one() } else { T::zero() };
            let ds = (qt * (indicator - q[j])).scale(coef / tau);
            *grad.revenue_mut(i, j) += ds;
            *grad.cost_mut(i, j) -= ds.scale(lambda);
        }
    }
    loss
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(validation(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Softmax-relaxed primal policy loss at a solved multiplier.
pub fn ppl_loss<T: Scalar>(
    preds: &PredictionMatrix<T>,
    rct: &Dataset,
    lambda_star: f64,
    tau: f64,
) -> Result<(T, PredictionMatrix<T>)> {
    check_tau(tau)?;
    rct.require_rct()?;
    check_shape(preds, rct)?;
    let mut grad = PredictionMatrix::zeros(preds.rows(), preds.cols());
    let loss = softmax_policy_term(preds, rct, lambda_star, tau, |s| s.revenue, &mut grad);
    Ok((loss, grad))
}

/// Dual policy loss summed over a grid of user-chosen multipliers.
pub fn dpl_loss<T: Scalar>(
    preds: &PredictionMatrix<T>,
    rct: &Dataset,
    lambdas: &[f64],
    tau: f64,
) -> Result<(T, PredictionMatrix<T>)> {
    check_tau(tau)?;
    if lambdas.is_empty() {
        return Err(validation(
            "dual policy loss needs a non-empty multiplier grid",
        ));
    }
    rct.require_rct()?;
    check_shape(preds, rct)?;
    let mut grad = PredictionMatrix::zeros(preds.rows(), preds.cols());
    let mut loss = T::zero();
    for &lambda in lambdas {
        loss += softmax_policy_term(
            preds,
            rct,
            lambda,
            tau,
            |s| s.revenue - lambda * s.cost,
            &mut grad,
        );
    }
    Ok((loss, grad))
}

/// Ten evenly spaced multipliers on `[0, 2λ*]`.
pub fn default_lambda_grid(lambda_star: f64) -> Vec<f64> {
    let hi = 2.0 * lambda_star.max(0.0);
    (0..10).map(|k| hi * k as f64 / 9.0).collect()
}

#[inline]
fn floor_gap(h: f64, sign_if_zero: f64) -> f64 {
    if h.abs() >= H_FLOOR {
        h
    } else if h == 0.0 {
        sign_if_zero * H_FLOOR
    } else {
        h.signum() * H_FLOOR
    }
}

/// Improved finite-difference table for one multiplier and per-sample payoff.
///
/// For a sample whose observed treatment is the one the policy picks, every
/// entry is the payoff lost by the smallest score perturbation that changes
/// the pick, divided by that perturbation. For a sample whose observed
/// treatment is not picked, only the observed and picked entries are nonzero:
/// they carry the payoff gained by swapping the two.
fn ifd_table(
    preds: &PredictionMatrix,
    rct: &Dataset,
    lambda: f64,
    payoff: impl Fn(&Sample) -> f64,
) -> SurrogateGradientTable {
    let floored = preds.with_cost_floor(COST_FLOOR);
    let n = preds.rows();
    let m = preds.cols();
    let counts = rct.group_counts();
    let mut dl_dz = vec![0.0; n * m];
    let mut a = Vec::with_capacity(m);
    for (i, s) in rct.samples().iter().enumerate() {
        if m < 2 {
            break;
        }
        let t = s.treatment;
        // y / (N p_t)
        let w = payoff(s) / counts[t] as f64;
        if w == 0.0 {
            continue;
        }
        a.clear();
        a.extend(
            floored
                .revenue_row(i)
                .iter()
                .zip(floored.cost_row(i))
                .map(|(r, c)| r - lambda * c),
        );
        let pick = argmax_lowest(a.iter().copied());
        let row = &mut dl_dz[i * m..(i + 1) * m];
        if pick == t {
            let runner_up = a
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != t)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let h_t = floor_gap(runner_up - a[t], -1.0);
            row[t] = w / h_t;
            for j in (0..m).filter(|&j| j != t) {
                let h_j = floor_gap(a[t] - a[j], 1.0);
                row[j] = w / h_j;
            }
        } else {
            let h_t = floor_gap(a[pick] - a[t], 1.0);
            let h_pick = -h_t;
            row[t] = -w / h_t;
            row[pick] = -w / h_pick;
        }
    }
    SurrogateGradientTable {
        n,
        m,
        dl_dz,
        lambda,
    }
}

/// PIFD gradient table at the multiplier solved for `budget`.
pub fn pifd_gradient_table(
    preds: &PredictionMatrix,
    rct: &Dataset,
    budget: &BudgetSpec,
) -> Result<SurrogateGradientTable> {
    rct.require_rct()?;
    check_shape(preds, rct)?;
    let sol = solve_allocation(preds, CostModel::Rct(rct), budget)?;
    Ok(pifd_gradient_table_at(preds, rct, sol.lambda_star))
}

pub fn pifd_gradient_table_at(
    preds: &PredictionMatrix,
    rct: &Dataset,
    lambda_star: f64,
) -> SurrogateGradientTable {
    ifd_table(preds, rct, lambda_star, |s| s.revenue)
}

/// DIFD gradient table at a caller-supplied multiplier; payoff `r − λc`.
pub fn difd_gradient_table(
    preds: &PredictionMatrix,
    rct: &Dataset,
    lambda: f64,
) -> Result<SurrogateGradientTable> {
    rct.require_rct()?;
    check_shape(preds, rct)?;
    Ok(ifd_table(preds, rct, lambda, |s| {
        s.revenue - lambda * s.cost
    }))
}

/// `(1/NM) Σ_ij table_ij · z'_ij` with the table held constant.
pub fn pifd_loss<T: Scalar>(
    preds: &PredictionMatrix<T>,
    table: &SurrogateGradientTable,
    tau: f64,
) -> Result<(T, PredictionMatrix<T>)> {
    check_tau(tau)?;
    let mut grad = PredictionMatrix::zeros(preds.rows(), preds.cols());
    let loss = table_term(preds, table, tau, &mut grad)?;
    Ok((loss, grad))
}

/// Sum of [`pifd_loss`]-style terms over one table per multiplier.
pub fn difd_loss<T: Scalar>(
    preds: &PredictionMatrix<T>,
    tables: &[SurrogateGradientTable],
    tau: f64,
) -> Result<(T, PredictionMatrix<T>)> {
    check_tau(tau)?;
    if tables.is_empty() {
        return Err(validation(
            "dual finite-difference loss needs at least one table",
        ));
    }
    let mut grad = PredictionMatrix::zeros(preds.rows(), preds.cols());
    let mut loss = T::zero();
    for table in tables {
        loss += table_term(preds, table, tau, &mut grad)?;
    }
    Ok((loss, grad))
}

fn table_term<T: Scalar>(
    preds: &PredictionMatrix<T>,
    table: &SurrogateGradientTable,
    tau: f64,
    grad: &mut PredictionMatrix<T>,
) -> Result<T> {
    if table.n != preds.rows() || table.m != preds.cols() {
        return Err(validation(
            "gradient table shape does not match predictions",
        ));
    }
    let n = preds.rows();
    let m = preds.cols();
    let scale = 1.0 / (n * m) as f64;
    let mut loss = T::zero();
    let mut scores = Vec::with_capacity(m);
    let mut q = Vec::with_capacity(m);
    for i in 0..n {
        let row = &table.dl_dz[i * m..(i + 1) * m];
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        scores_into(preds, i, table.lambda, tau, &mut scores);
        softmax_into(&scores, &mut q);
        let expected = q
            .iter()
            .zip(row)
            .fold(T::zero(), |acc, (&qj, &g)| acc + qj.scale(g));
        loss += expected.scale(scale);
        for k in 0..m {
            let ds = (q[k] * (T::from_f64(row[k]) - expected)).scale(scale / tau);
            *grad.revenue_mut(i, k) += ds;
            *grad.cost_mut(i, k) -= ds.scale(table.lambda);
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Source;

    fn ds(rows: &[(usize, f64, f64)], m: usize) -> Dataset {
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

    fn pm(r: &[Vec<f64>], c: &[Vec<f64>]) -> PredictionMatrix {
        PredictionMatrix::from_rows(r, c).unwrap()
    }

    #[test]
    fn prediction_loss_basic_cases() {
        let d = ds(&[(0, 1.0, 0.5)], 2);
        let perfect = pm(&[vec![1.0, 9.0]], &[vec![0.5, 9.0]]);
        assert_eq!(prediction_loss_rct(&perfect, &d).unwrap().0, 0.0);
        let off = pm(&[vec![0.0, 9.0]], &[vec![0.5, 9.0]]);
        assert_eq!(prediction_loss_rct(&off, &d).unwrap().0, 1.0);
        let off2 = pm(&[vec![-1.0, 9.0]], &[vec![0.5, 9.0]]);
        assert_eq!(prediction_loss_rct(&off2, &d).unwrap().0, 4.0);
    }

    #[test]
    fn gates_half_with_teacher_equal_target() {
        let d = ds(&[(0, 1.0, 0.5), (1, 2.0, 1.0)], 2);
        let p = pm(
            &[vec![0.5, 3.0], vec![0.2, 1.0]],
            &[vec![0.5, 1.0], vec![0.1, 0.7]],
        );
        let gates = BridgeGates::constant(2, 2, 0.5, 0.5);
        let (loss, _) = parameterized_prediction_loss(&p, &p, &gates, &d).unwrap();
        let (factual, _) = prediction_loss_rct(&p, &d).unwrap();
        assert!((loss - factual).abs() < 1e-15);
    }

    #[test]
    fn gate_limits() {
        let d = ds(&[(0, 1.0, 0.5), (1, 2.0, 1.0)], 2);
        let target = pm(
            &[vec![0.5, 3.0], vec![0.2, 1.0]],
            &[vec![0.5, 1.0], vec![0.1, 0.7]],
        );
        let teacher = pm(
            &[vec![0.0, 2.0], vec![1.2, 0.0]],
            &[vec![0.0, 1.5], vec![0.4, 0.0]],
        );
        let (factual, _) = prediction_loss_rct(&target, &d).unwrap();

        let ones = BridgeGates::constant(2, 2, 1.0, 1.0);
        let labels = counterfactual_labels(&target, &teacher, &ones);
        assert_eq!(labels.r_cf[1], teacher.r(0, 1));
        let (loss, _) = parameterized_prediction_loss(&target, &teacher, &ones, &d).unwrap();
        // counterfactual entries: (0,1) and (1,0)
        let distill = ((2.0f64 - 3.0).powi(2)
            + (1.5f64 - 1.0).powi(2)
            + (1.2f64 - 0.2).powi(2)
            + (0.4f64 - 0.1).powi(2))
            / 2.0;
        assert!((loss - factual - distill).abs() < 1e-12);

        let zeros = BridgeGates::constant(2, 2, 0.0, 0.0);
        let labels = counterfactual_labels(&target, &teacher, &zeros);
        assert_eq!(labels.r_cf[1], target.r(0, 1));
        let (loss, _) = parameterized_prediction_loss(&target, &teacher, &zeros, &d).unwrap();
        assert!((loss - factual).abs() < 1e-15);
    }

    #[test]
    fn decision_loss_single_treatment_is_negative_mean() {
        let d = ds(&[(0, 1.0, 0.5), (0, 2.0, 1.0), (0, 6.0, 1.0)], 1);
        let p = pm(&vec![vec![1.0]; 3], &vec![vec![1.0]; 3]);
        let l = decision_loss_unbiased(&p, &d, &BudgetSpec::new(0.5)).unwrap();
        assert!((l + 3.0).abs() < 1e-12);
    }

    #[test]
    fn decision_loss_all_control_with_zero_control_revenue() {
        let d = ds(
            &[(0, 0.0, 0.0), (1, 2.0, 1.0), (0, 0.0, 0.0), (1, 3.0, 1.0)],
            2,
        );
        let p = pm(&vec![vec![5.0, 1.0]; 4], &vec![vec![0.0, 1.0]; 4]);
        let l = decision_loss_unbiased(&p, &d, &BudgetSpec::new(10.0)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn ppl_uniform_softmax() {
        let d = ds(
            &[
                (0, 1.0, 0.5),
                (1, 4.0, 1.0),
                (0, 3.0, 0.0),
                (1, 2.0, 1.0),
                (2, 6.0, 2.0),
            ],
            3,
        );
        let p = pm(&vec![vec![1.0, 1.0, 1.0]; 5], &vec![vec![0.0, 0.0, 0.0]; 5]);
        let (l, _) = ppl_loss(&p, &d, 0.7, 1.0).unwrap();
        // −(1/M) Σ_t mean_t(r)
        let expected = -(2.0 + 3.0 + 6.0) / 3.0;
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn ppl_rejects_bad_tau() {
        let d = ds(&[(0, 1.0, 0.5), (1, 4.0, 1.0)], 2);
        let p = pm(&vec![vec![1.0, 1.0]; 2], &vec![vec![0.0, 0.0]; 2]);
        assert!(ppl_loss(&p, &d, 0.0, 0.0).is_err());
        assert!(ppl_loss(&p, &d, 0.0, -1.0).is_err());
    }

    #[test]
    fn pifd_hand_trace() {
        // a = r̂ − λĉ = (2, 1) at λ = 0, observed treatment 0, revenue 4
        let d = ds(&[(0, 4.0, 0.0)], 2);
        let p = pm(&[vec![2.0, 1.0]], &[vec![0.0, 0.0]]);
        let table = pifd_gradient_table_at(&p, &d, 0.0);
        // ∂(−L)/∂z'_00 = 4, so the stored ∂L/∂z'_00 is −4
        assert_eq!(-table.get(0, 0), 4.0);
        assert_eq!(-table.get(0, 1), -4.0);
    }

    #[test]
    fn pifd_zero_revenue_row_is_zero() {
        let d = ds(&[(0, 0.0, 1.0), (1, 3.0, 1.0)], 2);
        let p = pm(
            &[vec![2.0, 1.0], vec![0.5, 1.5]],
            &[vec![0.1, 0.2], vec![0.1, 0.2]],
        );
        let t = pifd_gradient_table_at(&p, &d, 0.5);
        assert_eq!(t.get(0, 0), 0.0);
        assert_eq!(t.get(0, 1), 0.0);
    }

    #[test]
    fn pifd_mismatch_entries_are_opposite() {
        let d = ds(&[(0, 2.0, 1.0), (1, 3.0, 1.0), (2, 1.0, 2.0)], 3);
        // row 0: pick is 2, observed 0
        let p = pm(
            &[
                vec![0.1, 0.5, 2.0],
                vec![0.5, 1.5, 0.1],
                vec![1.0, 0.0, 0.2],
            ],
            &vec![vec![0.1, 0.2, 0.3]; 3],
        );
        let t = pifd_gradient_table_at(&p, &d, 0.0);
        assert!(t.get(0, 0) != 0.0);
        assert_eq!(t.get(0, 0), -t.get(0, 2));
        assert_eq!(t.get(0, 1), 0.0);
    }

    #[test]
    fn pifd_loss_cases() {
        let p = pm(&[vec![1.0, 1.0]], &[vec![0.0, 0.0]]);
        let zero = SurrogateGradientTable {
            n: 1,
            m: 2,
            dl_dz: vec![0.0, 0.0],
            lambda: 0.3,
        };
        let (l, g) = pifd_loss(&p, &zero, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.revenues().iter().all(|&x| x == 0.0));
        let pm1 = SurrogateGradientTable {
            dl_dz: vec![1.0, -1.0],
            ..zero
        };
        assert_eq!(pifd_loss(&p, &pm1, 1.0).unwrap().0, 0.0);
    }

    #[test]
    fn dpl_reductions() {
        let d = ds(
            &[(0, 1.0, 0.0), (1, 4.0, 0.0), (0, 3.0, 0.0), (1, 2.0, 0.0)],
            2,
        );
        let p = pm(
            &[
                vec![1.0, 0.2],
                vec![0.1, 0.9],
                vec![0.4, 0.3],
                vec![2.0, 0.0],
            ],
            &[
                vec![0.1, 0.5],
                vec![0.3, 0.2],
                vec![0.0, 0.4],
                vec![0.2, 0.2],
            ],
        );
        let (dpl, _) = dpl_loss(&p, &d, &[0.8], 1.0).unwrap();
        let (ppl, _) = ppl_loss(&p, &d, 0.8, 1.0).unwrap();
        assert!((dpl - ppl).abs() < 1e-15);
        assert!(dpl_loss(&p, &d, &[], 1.0).is_err());

        let d1 = ds(&[(0, 1.0, 0.5), (0, 3.0, 1.5)], 1);
        let p1 = pm(&[vec![0.3], vec![0.1]], &[vec![0.2], vec![0.9]]);
        let (v, _) = dpl_loss(&p1, &d1, &[0.0, 1.0], 1.0).unwrap();
        // Σ_λ −mean(r − λc) = −2 − (2 − 1)
        assert!((v + 3.0).abs() < 1e-12);
    }

    #[test]
    fn difd_reduces_to_pifd_without_costs() {
        let d = ds(&[(0, 1.0, 0.0), (1, 4.0, 0.0), (0, 3.0, 0.0)], 2);
        let p = pm(
            &[vec![1.0, 0.2], vec![0.1, 0.9], vec![0.4, 0.3]],
            &[vec![0.1, 0.5], vec![0.3, 0.2], vec![0.0, 0.4]],
        );
        let a = difd_gradient_table(&p, &d, 0.37).unwrap();
        let b = pifd_gradient_table_at(&p, &d, 0.37);
        assert_eq!(a, b);
    }

    #[test]
    fn difd_zero_payoff_row() {
        let d = ds(&[(0, 2.0, 4.0), (1, 4.0, 1.0)], 2);
        let p = pm(
            &[vec![1.0, 0.2], vec![0.1, 0.9]],
            &[vec![0.1, 0.5], vec![0.3, 0.2]],
        );
        let t = difd_gradient_table(&p, &d, 0.5).unwrap();
        assert_eq!(t.get(0, 0), 0.0);
        assert_eq!(t.get(0, 1), 0.0);
        assert!(t.get(1, 1) != 0.0);
    }
}
