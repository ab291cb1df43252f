//! Trainers: two-stage baselines, single-level decision-focused training and
//! the bi-level loop with a bridge network.
//!
//! The bi-level loop trains a target network on OBS mini-batches against
//! factual labels plus gated counterfactual pseudo-labels. Every `k`-th batch
//! the bridge parameters `φ` take a hypergradient step: `θ*(φ)` is probed by
//! `k` assumed gradient steps on a copy of `θ`, the surrogate decision loss is
//! differentiated at `θ*` on the full RCT set, and the implicit function
//! theorem turns that gradient into a gradient over `φ` through one CG solve.

use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inner_grad, inner_hvp, mixed_vjp, JointObjective, Objective};
use crate::data::{Dataset, PredictionMatrix};
use crate::error::{validation, Error, Result};
use crate::losses::{
    default_lambda_grid, difd_gradient_table, difd_loss, dpl_loss, parameterized_prediction_loss,
    pifd_gradient_table_at, pifd_loss, ppl_loss, prediction_loss_rct, BridgeGates,
    SurrogateGradientTable, DEFAULT_TAU,
};
use crate::mckp::{eom_evaluate, solve_allocation, BudgetSpec, CostModel};
use crate::net::{merge_heads, split_heads, Mlp, NetworkSpec, ParamVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surrogate {
    Ppl,
    Pifd,
    Dpl,
    Difd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMode {
    Implicit,
    Explicit,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Mini-batch settings for factual-MSE training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 3e-3,
            batch_size: 128,
        }
    }
}

fn check_net(net: &Mlp, ds: &Dataset) -> Result<()> {
    let spec = net.spec();
    if spec.input_dim != ds.feature_dim() || spec.output_dim != 2 * ds.num_treatments() {
        return Err(validation(format!(
            "network maps {} -> {} but data has {} features and {} treatments",
            spec.input_dim,
            spec.output_dim,
            ds.feature_dim(),
            ds.num_treatments()
        )));
    }
    Ok(())
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Factual MSE of a response model on one dataset.
struct MseObjective<'a> {
    net: &'a Mlp,
    ds: &'a Dataset,
}

impl Objective for MseObjective<'_> {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn value_and_grad<T: Scalar>(&self, params: &[T]) -> (T, Vec<T>) {
        let x = self.ds.feature_batch();
        let (out, tape) = self.net.forward(params, &x).expect("validated shapes");
        let preds =
            split_heads(&out, x.len(), self.net.spec().output_dim).expect("validated shapes");
        let (loss, g) = prediction_loss_rct(&preds, self.ds).expect("validated shapes");
        let mut grad = vec![T::zero(); params.len()];
        self.net
            .backward(params, &x, &tape, &merge_heads(&g), &mut grad);
        (loss, grad)
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Tracks the checkpoint with the highest validation EOM among those whose
/// allocation respects the budget.
struct Selector<'a> {
    net: &'a Mlp,
    val: Option<&'a Dataset>,
    budget: Option<BudgetSpec>,
    best: Option<(f64, Vec<f64>)>,
}

impl<'a> Selector<'a> {
    fn new(net: &'a Mlp, val: Option<&'a Dataset>, per_capita_budget: f64) -> Self {
        Self {
            net,
            val,
            budget: val.map(|v| BudgetSpec::per_capita(per_capita_budget, v.len())),
            best: None,
        }
    }

    /// Validation EOM of `params`, recorded if it is the best so far.
    fn offer(&mut self, params: &[f64]) -> Result<Option<f64>> {
        let (Some(val), Some(budget)) = (self.val, self.budget) else {
            return Ok(None);
        };
        let preds = self.net.predict(params, &val.feature_batch())?;
        let res = eom_evaluate(&preds, val, &budget)?;
        let eom = res.revenue;
        if res.within_budget && self.best.as_ref().is_none_or(|(b, _)| eom > *b) {
            self.best = Some((eom, params.to_vec()));
        }
        Ok(Some(eom))
    }

    fn finish(self, last: Vec<f64>) -> Vec<f64> {
        self.best.map(|(_, p)| p).unwrap_or(last)
    }
}

fn fit_mse(
    ds: &Dataset,
    spec: &NetworkSpec,
    opts: &FitOptions,
    seed: u64,
    selector: Option<(&Dataset, f64)>,
) -> Result<ParamVector> {
    if ds.is_empty() {
        return Err(validation("cannot train on an empty dataset"));
    }
    let net = Mlp::new(spec.clone())?;
    check_net(&net, ds)?;
    let mut params = net.init(seed).values;
    let mut adam = Adam::new(params.len(), opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
    let mut sel = Selector::new(&net, selector.map(|s| s.0), selector.map_or(0.0, |s| s.1));
    sel.offer(&params)?;
    for _ in 0..opts.epochs {
        for idx in batches(ds.len(), opts.batch_size, &mut rng) {
            let batch = ds.subset(&idx)?;
            let (_, g) = MseObjective {
                net: &net,
                ds: &batch,
            }
            .value_and_grad(&params);
            adam.step(&mut params, &g);
        }
        check_finite("response model parameters", &params)?;
        sel.offer(&params)?;
    }
    Ok(ParamVector::new(sel.finish(params)))
}

/// Factual-MSE training with Adam; no decision loss.
pub fn train_baseline_tsm(
    ds: &Dataset,
    spec: &NetworkSpec,
    opts: &FitOptions,
    seed: u64,
) -> Result<ParamVector> {
    fit_mse(ds, spec, opts, seed, None)
}

/// As [`train_baseline_tsm`], keeping the epoch with the best validation EOM.
pub fn train_baseline_tsm_selected(
    ds: &Dataset,
    val: &Dataset,
    per_capita_budget: f64,
    spec: &NetworkSpec,
    opts: &FitOptions,
    seed: u64,
) -> Result<ParamVector> {
    val.require_rct()?;
    fit_mse(ds, spec, opts, seed, Some((val, per_capita_budget)))
}

/// The frozen teacher: factual-MSE training on RCT data.
pub fn pretrain_teacher(
    rct: &Dataset,
    spec: &NetworkSpec,
    opts: &FitOptions,
    seed: u64,
) -> Result<ParamVector> {
    rct.require_rct()?;
    train_baseline_tsm(rct, spec, opts, seed)
}

/// Frozen quantities of a surrogate decision loss, computed at one `θ`.
#[derive(Debug, Clone)]
pub enum FrozenSurrogate {
    Ppl { lambda_star: f64 },
    Pifd { table: SurrogateGradientTable },
    Dpl { lambdas: Vec<f64> },
    Difd { tables: Vec<SurrogateGradientTable> },
}

impl FrozenSurrogate {
    /// Solves `λ*` on `rct` for the predictions and freezes what the
    /// surrogate needs at that point.
    pub fn at(
        kind: Surrogate,
        preds: &PredictionMatrix,
        rct: &Dataset,
        budget: &BudgetSpec,
    ) -> Result<Self> {
        let lambda_star = solve_allocation(preds, CostModel::Rct(rct), budget)?.lambda_star;
        Ok(match kind {
            Surrogate::Ppl => FrozenSurrogate::Ppl { lambda_star },
            Surrogate::Pifd => FrozenSurrogate::Pifd {
                table: pifd_gradient_table_at(preds, rct, lambda_star),
            },
            Surrogate::Dpl => FrozenSurrogate::Dpl {
                lambdas: default_lambda_grid(lambda_star),
            },
            Surrogate::Difd => FrozenSurrogate::Difd {
                tables: default_lambda_grid(lambda_star)
                    .into_iter()
                    .map(|l| difd_gradient_table(preds, rct, l))
                    .collect::<Result<_>>()?,
            },
        })
    }

    pub fn lambda_star(&self) -> f64 {
        match self {
            FrozenSurrogate::Ppl { lambda_star } => *lambda_star,
            FrozenSurrogate::Pifd { table } => table.lambda,
            FrozenSurrogate::Dpl { lambdas } => lambdas.last().copied().unwrap_or(0.0) / 2.0,
            FrozenSurrogate::Difd { tables } => tables.last().map_or(0.0, |t| t.lambda) / 2.0,
        }
    }
}

/// Surrogate decision loss on RCT data plus `α` times factual MSE.
pub struct SurrogateObjective<'a> {
    pub net: &'a Mlp,
    pub rct: &'a Dataset,
    pub frozen: FrozenSurrogate,
    pub tau: f64,
    pub alpha: f64,
}

impl<'a> SurrogateObjective<'a> {
    pub fn new(
        net: &'a Mlp,
        rct: &'a Dataset,
        theta: &[f64],
        kind: Surrogate,
        budget: &BudgetSpec,
        tau: f64,
        alpha: f64,
    ) -> Result<Self> {
        rct.require_rct()?;
        check_net(net, rct)?;
        let preds = net.predict(theta, &rct.feature_batch())?;
        Ok(Self {
            net,
            rct,
            frozen: FrozenSurrogate::at(kind, &preds, rct, budget)?,
            tau,
            alpha,
        })
    }
}

impl Objective for SurrogateObjective<'_> {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn value_and_grad<T: Scalar>(&self, params: &[T]) -> (T, Vec<T>) {
        let x = self.rct.feature_batch();
        let (out, tape) = self.net.forward(params, &x).expect("validated shapes");
        let preds =
            split_heads(&out, x.len(), self.net.spec().output_dim).expect("validated shapes");
        let (mut loss, mut g) = match &self.frozen {
            FrozenSurrogate::Ppl { lambda_star } => {
                ppl_loss(&preds, self.rct, *lambda_star, self.tau)
            }
            FrozenSurrogate::Pifd { table } => pifd_loss(&preds, table, self.tau),
            FrozenSurrogate::Dpl { lambdas } => dpl_loss(&preds, self.rct, lambdas, self.tau),
            FrozenSurrogate::Difd { tables } => difd_loss(&preds, tables, self.tau),
        }
        .expect("validated shapes");
        if self.alpha > 0.0 {
            let (mse, gm) = prediction_loss_rct(&preds, self.rct).expect("validated shapes");
            loss += mse.scale(self.alpha);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    *g.revenue_mut(i, j) += gm.r(i, j).scale(self.alpha);
                    *g.cost_mut(i, j) += gm.c(i, j).scale(self.alpha);
                }
            }
        }
        let mut grad = vec![T::zero(); params.len()];
        self.net
            .backward(params, &x, &tape, &merge_heads(&g), &mut grad);
        (loss, grad)
    }
}

/// The lower-level loss on one OBS batch as a joint function of the bridge
/// parameters (outer) and target parameters (inner).
pub struct PlObjective<'a> {
    target: &'a Mlp,
    bridge: &'a Mlp,
    batch: &'a Dataset,
    teacher: PredictionMatrix,
    bridge_inputs: Vec<Vec<f64>>,
}

impl<'a> PlObjective<'a> {
    pub fn new(
        target: &'a Mlp,
        bridge: &'a Mlp,
        batch: &'a Dataset,
        teacher: PredictionMatrix,
    ) -> Result<Self> {
        check_net(target, batch)?;
        let m = batch.num_treatments();
        if bridge.spec().input_dim != batch.feature_dim() + m || bridge.spec().output_dim != 2 {
            return Err(validation(
                "bridge network must map features ⊕ one-hot(treatment) to two gates",
            ));
        }
        if teacher.rows() != batch.len() || teacher.cols() != m {
            return Err(validation("teacher predictions do not match the batch"));
        }
        let mut bridge_inputs = Vec::with_capacity(batch.len() * m);
        for s in batch.samples() {
            for j in 0..m {
                let mut x = s.features.clone();
                x.extend((0..m).map(|k| if k == j { 1.0 } else { 0.0 }));
                bridge_inputs.push(x);
            }
        }
        Ok(Self {
            target,
            bridge,
            batch,
            teacher,
            bridge_inputs,
        })
    }

    fn gates<T: Scalar>(&self, phi: &[T]) -> (BridgeGates<T>, Vec<&[f64]>, crate::net::Tape<T>) {
        let inputs: Vec<&[f64]> = self.bridge_inputs.iter().map(|x| x.as_slice()).collect();
        let (out, tape) = self.bridge.forward(phi, &inputs).expect("validated shapes");
        let n = self.batch.len();
        let m = self.batch.num_treatments();
        let w_r = out.iter().step_by(2).copied().collect();
        let w_c = out.iter().skip(1).step_by(2).copied().collect();
        (
            BridgeGates::new(n, m, w_r, w_c).expect("validated shapes"),
            inputs,
            tape,
        )
    }

    /// Gate values at `φ`, for logging and label inspection.
    pub fn gate_values(&self, phi: &[f64]) -> BridgeGates {
        self.gates(phi).0
    }

    fn target_pass<T: Scalar>(
        &self,
        theta: &[T],
        gates: &BridgeGates<T>,
    ) -> (T, Vec<T>, BridgeGates<T>) {
        let x = self.batch.feature_batch();
        let (out, tape) = self.target.forward(theta, &x).expect("validated shapes");
        let preds =
            split_heads(&out, x.len(), self.target.spec().output_dim).expect("validated shapes");
        let (loss, g) = parameterized_prediction_loss(&preds, &self.teacher, gates, self.batch)
            .expect("validated shapes");
        let mut grad = vec![T::zero(); theta.len()];
        self.target
            .backward(theta, &x, &tape, &merge_heads(&g.target), &mut grad);
        (loss, grad, g.gates)
    }
}

impl JointObjective for PlObjective<'_> {
    fn outer_dim(&self) -> usize {
        self.bridge.num_params()
    }

    fn inner_dim(&self) -> usize {
        self.target.num_params()
    }

    fn value_and_grads<T: Scalar>(&self, outer: &[T], inner: &[T]) -> (T, Vec<T>, Vec<T>) {
        let (gates, inputs, tape) = self.gates(outer);
        let (loss, g_inner, g_gates) = self.target_pass(inner, &gates);
        let n = self.batch.len();
        let m = self.batch.num_treatments();
        let mut d_out = Vec::with_capacity(2 * n * m);
        for i in 0..n {
            for j in 0..m {
                d_out.push(g_gates.w_r(i, j));
                d_out.push(g_gates.w_c(i, j));
            }
        }
        let mut g_outer = vec![T::zero(); outer.len()];
        self.bridge
            .backward(outer, &inputs, &tape, &d_out, &mut g_outer);
        (loss, g_outer, g_inner)
    }

    fn inner_value_and_grad<T: Scalar>(&self, outer: &[f64], inner: &[T]) -> (T, Vec<T>) {
        let (g, _, _) = self.gates::<f64>(outer);
        let lifted = BridgeGates::new(
            g.rows(),
            g.cols(),
            (0..g.rows() * g.cols())
                .map(|k| T::from_f64(g.w_r(k / g.cols(), k % g.cols())))
                .collect(),
            (0..g.rows() * g.cols())
                .map(|k| T::from_f64(g.w_c(k / g.cols(), k % g.cols())))
                .collect(),
        )
        .expect("validated shapes");
        let (loss, grad, _) = self.target_pass(inner, &lifted);
        (loss, grad)
    }
}

/// `k` plain gradient steps on the inner loss, applied to a copy of `θ`.
pub fn inner_assumed_update<J: JointObjective>(
    inner: &J,
    theta: &[f64],
    phi: &[f64],
    k: usize,
    lr: f64,
) -> Vec<f64> {
    let mut t = theta.to_vec();
    for _ in 0..k {
        let (_, g) = inner_grad(inner, phi, &t);
        for (p, gi) in t.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖A x − b‖`, recomputed from the returned iterate.
    pub residual_norm: f64,
    pub converged: bool,
    /// Set when a direction with non-positive curvature stopped the solve.
    pub indefinite: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradient for `A x = b` from `x₀ = 0`, given only `v ↦ A v`.
pub fn cg_solve(
    mut op: impl FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    n_cg: usize,
    tol: f64,
) -> Result<CgReport> {
    if n_cg == 0 {
        return Err(validation("n_cg must be at least 1"));
    }
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut iterations = 0;
    let mut converged = norm(&r) < tol;
    let mut indefinite = false;
    while !converged && iterations < n_cg {
        let ap = op(&p);
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() {
            return Err(Error::CgBreakdown {
                iteration: iterations,
                message: "non-finite curvature".into(),
            });
        }
        if curvature <= 0.0 {
            warn!("cg stopped on non-positive curvature {curvature:e} at iteration {iterations}");
            indefinite = true;
            break;
        }
        iterations += 1;
        let rr = dot(&r, &r);
        let alpha = rr / curvature;
        for k in 0..n {
            x[k] += alpha * p[k];
        }
        let r_new: Vec<f64> = r
            .iter()
            .zip(&ap)
            .map(|(ri, api)| ri - alpha * api)
            .collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::CgBreakdown {
                iteration: iterations,
                message: "non-finite iterate".into(),
            });
        }
        if norm(&r_new) < tol {
            converged = true;
            break;
        }
        let beta = dot(&r_new, &r_new) / rr;
        for k in 0..n {
            p[k] = r_new[k] + beta * p[k];
        }
        r = r_new;
    }
    let ax = op(&x);
    let residual_norm = norm(&ax.iter().zip(b).map(|(a, bi)| a - bi).collect::<Vec<_>>());
    if !converged {
        debug!("cg finished {iterations} iterations with residual {residual_norm:e}");
    }
    Ok(CgReport {
        x,
        iterations,
        residual_norm,
        converged: residual_norm < tol,
        indefinite,
    })
}

/// Settings of the linear solve inside the implicit hypergradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub n_cg: usize,
    pub cg_tol: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergradient {
    pub grad: Vec<f64>,
    pub cg: Option<CgReport>,
}

/// `−(∂²L/∂φ∂θ)ᵀ (H + δI)⁻¹ g` at `(φ, θ*)`, with the inverse applied by CG.
pub fn hypergradient_implicit<J: JointObjective>(
    inner: &J,
    theta_star: &[f64],
    phi: &[f64],
    g: &[f64],
    opts: &SolveOptions,
) -> Result<Hypergradient> {
    let damping = opts.damping;
    let report = cg_solve(
        |v| {
            let mut hv = inner_hvp(inner, phi, theta_star, v);
            for (h, vi) in hv.iter_mut().zip(v) {
                *h += damping * vi;
            }
            hv
        },
        g,
        opts.n_cg,
        opts.cg_tol,
    )?;
    if !report.converged {
        warn!(
            "cg residual {:e} above tolerance {:e}",
            report.residual_norm, opts.cg_tol
        );
    }
    let grad = mixed_vjp(inner, phi, theta_star, &report.x)
        .into_iter()
        .map(|v| -v)
        .collect();
    Ok(Hypergradient {
        grad,
        cg: Some(report),
    })
}

/// One-step unrolled hypergradient: `−α_θ (∂²L/∂φ∂θ)ᵀ g`.
pub fn hypergradient_explicit<J: JointObjective>(
    inner: &J,
    theta: &[f64],
    phi: &[f64],
    g: &[f64],
    lr_theta: f64,
) -> Hypergradient {
    let grad = if lr_theta == 0.0 {
        vec![0.0; inner.outer_dim()]
    } else {
        mixed_vjp(inner, phi, theta, g)
            .into_iter()
            .map(|v| -lr_theta * v)
            .collect()
    };
    Hypergradient { grad, cg: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilevelConfig {
    pub k: usize,
    pub n_cg: usize,
    pub cg_tol: f64,
    pub damping: f64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    /// Learning rate of the plain GD assumed updates.
    pub assumed_lr: f64,
    pub warm_start_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub surrogate: Surrogate,
    pub diff_mode: DiffMode,
    pub tau: f64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_cg: 50,
            cg_tol: 1e-8,
            damping: 1e-3,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            assumed_lr: 1e-3,
            warm_start_epochs: 20,
            epochs: 100,
            batch_size: 256,
            surrogate: Surrogate::Ppl,
            diff_mode: DiffMode::Implicit,
            tau: DEFAULT_TAU,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(validation("k must be at least 1"));
        }
        if self.n_cg == 0 {
            return Err(validation("n_cg must be at least 1"));
        }
        if !(self.damping >= 0.0)
            || !(self.lr_theta >= 0.0)
            || !(self.lr_phi >= 0.0)
            || !(self.assumed_lr >= 0.0)
        {
            return Err(validation(
                "damping and learning rates must be non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(validation("batch_size must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(validation("tau must be positive"));
        }
        Ok(())
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            n_cg: self.n_cg,
            cg_tol: self.cg_tol,
            damping: self.damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub theta: ParamVector,
    pub phi: ParamVector,
    pub psi: ParamVector,
    pub epoch: usize,
    /// Lower-level batches processed, the `b` of the schedule.
    pub batch: usize,
    pub upper_steps: usize,
    pub adam_theta: Adam,
    pub adam_phi: Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lower_loss: f64,
    pub upper_steps: usize,
    pub val_eom: Option<f64>,
    pub lambda_star: Option<f64>,
    pub mean_cg_residual: Option<f64>,
    pub cg_warnings: usize,
    pub mean_gate: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Batches on which the upper level ran.
    pub upper_batches: Vec<usize>,
    pub best_val_eom: Option<f64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BilevelRun {
    pub state: TrainerState,
    /// Parameters of the best validation checkpoint (the final ones without validation data).
    pub best_theta: ParamVector,
    pub log: TrainingLog,
}

/// Networks and data of a bi-level training run.
pub struct BilevelProblem<'a> {
    pub target: &'a Mlp,
    pub bridge: &'a Mlp,
    pub obs: &'a Dataset,
    pub rct: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub per_capita_budget: f64,
    /// Frozen teacher parameters for `target`'s architecture.
    pub psi: &'a ParamVector,
    /// Starting target parameters; the teacher's when `None`.
    pub theta0: Option<&'a ParamVector>,
}

/// The bi-level schedule: every `k`-th OBS batch (after the warm start) the
/// bridge takes one hypergradient step, then the target takes one Adam step
/// on the lower-level loss with the latest gates.
pub fn train_bidfcl(
    problem: &BilevelProblem<'_>,
    cfg: &BilevelConfig,
    seed: u64,
) -> Result<BilevelRun> {
    cfg.validate()?;
    let BilevelProblem {
        target,
        bridge,
        obs,
        rct,
        val,
        per_capita_budget,
        psi,
        theta0,
    } = *problem;
    check_net(target, obs)?;
    check_net(target, rct)?;
    rct.require_rct()?;
    if psi.len() != target.num_params() {
        return Err(validation(
            "teacher parameters do not fit the target architecture",
        ));
    }
    let rct_budget = BudgetSpec::per_capita(per_capita_budget, rct.len());
    let teacher_all = target.predict(psi.as_slice(), &obs.feature_batch())?;

    let theta = theta0.unwrap_or(psi).clone();
    let phi = bridge.init(seed ^ 0xb41d9e);
    let mut state = TrainerState {
        adam_theta: Adam::new(theta.len(), cfg.lr_theta),
        adam_phi: Adam::new(phi.len(), cfg.lr_phi),
        theta,
        phi,
        psi: psi.clone(),
        epoch: 0,
        batch: 0,
        upper_steps: 0,
    };
    let mut log = TrainingLog {
        epochs: Vec::new(),
        upper_batches: Vec::new(),
        best_val_eom: None,
        aborted: None,
    };
    let mut sel = Selector::new(target, val, per_capita_budget);
    sel.offer(state.theta.as_slice())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5);
    let solve = cfg.solve_options();

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        state.epoch = epoch;
        let upper_on = epoch >= cfg.warm_start_epochs && cfg.lr_phi > 0.0;
        let mut lower_total = 0.0;
        let mut lower_batches = 0usize;
        let mut cg_residuals = Vec::new();
        let mut cg_warnings = 0;
        let mut gate_total = 0.0;
        let mut gate_count = 0usize;
        let mut last_lambda = None;
        for idx in batches(obs.len(), cfg.batch_size, &mut rng) {
            let batch = obs.subset(&idx)?;
            let pl = PlObjective::new(target, bridge, &batch, teacher_all.select_rows(&idx))?;

            if upper_on && state.batch % cfg.k == 0 {
                let theta = state.theta.as_slice();
                let phi = state.phi.as_slice();
                let hyper = match cfg.diff_mode {
                    DiffMode::Implicit => {
                        let theta_star =
                            inner_assumed_update(&pl, theta, phi, cfg.k, cfg.assumed_lr);
                        let upper = SurrogateObjective::new(
                            target,
                            rct,
                            &theta_star,
                            cfg.surrogate,
                            &rct_budget,
                            cfg.tau,
                            0.0,
                        )?;
                        last_lambda = Some(upper.frozen.lambda_star());
                        let g = upper.value_and_grad(theta_star.as_slice()).1;
                        hypergradient_implicit(&pl, &theta_star, phi, &g, &solve)?
                    }
                    DiffMode::Explicit => {
                        let theta_one = inner_assumed_update(&pl, theta, phi, 1, cfg.assumed_lr);
                        let upper = SurrogateObjective::new(
                            target,
                            rct,
                            &theta_one,
                            cfg.surrogate,
                            &rct_budget,
                            cfg.tau,
                            0.0,
                        )?;
                        last_lambda = Some(upper.frozen.lambda_star());
                        let g = upper.value_and_grad(theta_one.as_slice()).1;
                        hypergradient_explicit(&pl, theta, phi, &g, cfg.assumed_lr)
                    }
                };
                if let Some(r) = &hyper.cg {
                    cg_residuals.push(r.residual_norm);
                    if !r.converged {
                        cg_warnings += 1;
                    }
                }
                if hyper.grad.iter().any(|v| !v.is_finite()) {
                    log.aborted =
                        Some(format!("non-finite hypergradient at batch {}", state.batch));
                    break 'epochs;
                }
                state.adam_phi.step(&mut state.phi.values, &hyper.grad);
                state.upper_steps += 1;
                log.upper_batches.push(state.batch);
            }

            let (loss, g) = inner_grad(&pl, state.phi.as_slice(), state.theta.as_slice());
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                log.aborted = Some(format!(
                    "non-finite lower-level loss at batch {}",
                    state.batch
                ));
                break 'epochs;
            }
            state.adam_theta.step(&mut state.theta.values, &g);
            if !state.theta.is_finite() || !state.phi.is_finite() {
                log.aborted = Some(format!("non-finite parameters after batch {}", state.batch));
                break 'epochs;
            }
            let gates = pl.gate_values(state.phi.as_slice());
            for i in 0..gates.rows() {
                for j in 0..gates.cols() {
                    gate_total += gates.w_r(i, j);
                    gate_count += 1;
                }
            }
            lower_total += loss;
            lower_batches += 1;
            state.batch += 1;
        }
        let val_eom = sel.offer(state.theta.as_slice())?;
        log.epochs.push(EpochLog {
            epoch,
            lower_loss: lower_total / lower_batches.max(1) as f64,
            upper_steps: state.upper_steps,
            val_eom,
            lambda_star: last_lambda,
            mean_cg_residual: (!cg_residuals.is_empty())
                .then(|| cg_residuals.iter().sum::<f64>() / cg_residuals.len() as f64),
            cg_warnings,
            mean_gate: gate_total / gate_count.max(1) as f64,
            wall_ms: started.elapsed().as_millis(),
        });
    }
    if let Some(why) = &log.aborted {
        warn!("bi-level training aborted: {why}");
    }
    log.best_val_eom = sel.best.as_ref().map(|(e, _)| *e);
    let last = state.theta.values.clone();
    let best_theta = if log.aborted.is_some() && sel.best.is_none() {
        return Err(Error::NonFinite(log.aborted.unwrap_or_default()));
    } else {
        ParamVector::new(sel.finish(last))
    };
    Ok(BilevelRun {
        state,
        best_theta,
        log,
    })
}

/// Settings of single-level decision-focused training on RCT data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfclConfig {
    pub surrogate: Surrogate,
    /// Weight of the factual MSE term.
    pub alpha: f64,
    /// Full-batch Adam steps.
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    /// Validation is checked every this many steps.
    pub eval_every: usize,
}

impl Default for DfclConfig {
    fn default() -> Self {
        Self {
            surrogate: Surrogate::Ppl,
            alpha: 1.0,
            steps: 200,
            lr: 1e-3,
            tau: DEFAULT_TAU,
            eval_every: 5,
        }
    }
}

/// Minimizes surrogate + `α`·MSE on RCT data with full-batch Adam; `λ*` and
/// any finite-difference tables are refreshed at every step.
pub fn train_dfcl(
    net: &Mlp,
    rct: &Dataset,
    val: Option<&Dataset>,
    per_capita_budget: f64,
    init: &ParamVector,
    cfg: &DfclConfig,
) -> Result<ParamVector> {
    rct.require_rct()?;
    check_net(net, rct)?;
    if !(cfg.alpha >= 0.0) {
        return Err(validation("alpha must be non-negative"));
    }
    if init.len() != net.num_params() {
        return Err(validation("initial parameters do not fit the network"));
    }
    let budget = BudgetSpec::per_capita(per_capita_budget, rct.len());
    let mut params = init.values.clone();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut sel = Selector::new(net, val, per_capita_budget);
    sel.offer(&params)?;
    let every = cfg.eval_every.max(1);
    for step in 0..cfg.steps {
        let obj = SurrogateObjective::new(
            net,
            rct,
            &params,
            cfg.surrogate,
            &budget,
            cfg.tau,
            cfg.alpha,
        )?;
        let (loss, g) = obj.value_and_grad(params.as_slice());
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            warn!("decision-focused training stopped on a non-finite loss at step {step}");
            break;
        }
        adam.step(&mut params, &g);
        if (step + 1) % every == 0 {
            sel.offer(&params)?;
        }
    }
    check_finite("decision-focused parameters", &params).or_else(|e| {
        if sel.best.is_some() {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    Ok(ParamVector::new(sel.finish(params)))
}
