//! Training every (method, seed) cell and evaluating it on the test split.

use std::time::Instant;

use bidfcl_core::bilevel::{
    train_baseline_tsm_selected, train_bidfcl, train_dfcl, BilevelConfig, BilevelProblem,
    DfclConfig,
};
use bidfcl_core::data::{Dataset, FullOutcomeTable, Source};
use bidfcl_core::mckp::{eom_allocation, BudgetSpec};
use bidfcl_core::net::{Mlp, NetworkSpec, OutputActivation, ParamVector};
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::data::{prepare_data, ExperimentData};
use crate::error::{config_error, HarnessError, Result};
use crate::report::{summarize, CellResult, CellStatus, CurvePoint, MetricsReport, TrainNotes};

/// Target and bridge architectures for one dataset.
#[derive(Debug, Clone)]
pub struct Models {
    pub target: Mlp,
    pub bridge: Mlp,
}

impl Models {
    pub fn new(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Self> {
        let (d, m) = (data.feature_dim(), data.num_treatments());
        let target = NetworkSpec::response_model(
            d,
            cfg.model.hidden.clone(),
            m,
            cfg.model.activation,
            OutputActivation::Softplus,
        );
        let bridge =
            NetworkSpec::bridge(d, m, cfg.model.bridge_hidden.clone(), cfg.model.activation);
        Ok(Self {
            target: Mlp::new(target)?,
            bridge: Mlp::new(bridge)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParamVector,
    pub notes: TrainNotes,
}

/// The RCT teacher of one seed, which is also the TSM-SL(RCT) model.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    models: &Models,
    seed: u64,
    budget: f64,
) -> Result<ParamVector> {
    Ok(train_baseline_tsm_selected(
        &data.rct_train,
        &data.rct_val,
        budget,
        models.target.spec(),
        &cfg.teacher,
        seed,
    )?)
}

/// Trains one method. Methods that start from the teacher require it.
pub fn train_method(
    method: Method,
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    models: &Models,
    seed: u64,
    budget: f64,
    teacher: Option<&ParamVector>,
) -> Result<Trained> {
    let teacher = || teacher.ok_or_else(|| config_error(format!("{method} needs the RCT teacher")));
    let plain = |params| Trained {
        params,
        notes: TrainNotes::default(),
    };
    let spec = models.target.spec();
    match method {
        Method::TsmSlRct => Ok(plain(teacher()?.clone())),
        Method::TsmSlObs => Ok(plain(train_baseline_tsm_selected(
            &data.obs,
            &data.rct_val,
            budget,
            spec,
            &cfg.obs_fit,
            seed,
        )?)),
        Method::TsmSlBoth => {
            let pooled = data.obs.concat(&data.rct_train, Source::Obs)?;
            Ok(plain(train_baseline_tsm_selected(
                &pooled,
                &data.rct_val,
                budget,
                spec,
                &cfg.obs_fit,
                seed,
            )?))
        }
        Method::DfclPpl | Method::DfclPifd | Method::DfclDpl | Method::DfclDifd => {
            let dcfg = DfclConfig {
                surrogate: method.surrogate().expect("decision-focused method"),
                ..cfg.dfcl.clone()
            };
            let params = train_dfcl(
                &models.target,
                &data.rct_train,
                Some(&data.rct_val),
                budget,
                teacher()?,
                &dcfg,
            )?;
            Ok(plain(params))
        }
        Method::BidfclPpl
        | Method::BidfclPifd
        | Method::BidfclPplExplicit
        | Method::BidfclPifdExplicit => {
            let bcfg = BilevelConfig {
                surrogate: method.surrogate().expect("decision-focused method"),
                diff_mode: method.diff_mode(),
                ..cfg.bilevel.clone()
            };
            let problem = BilevelProblem {
                target: &models.target,
                bridge: &models.bridge,
                obs: &data.obs,
                rct: &data.rct_train,
                val: Some(&data.rct_val),
                per_capita_budget: budget,
                psi: teacher()?,
                theta0: None,
            };
            let run = train_bidfcl(&problem, &bcfg, seed)?;
            Ok(Trained {
                params: run.best_theta,
                notes: TrainNotes {
                    best_val_eom: run.log.best_val_eom,
                    upper_steps: Some(run.state.upper_steps),
                    cg_warnings: Some(run.log.epochs.iter().map(|e| e.cg_warnings).sum()),
                    aborted: run.log.aborted,
                },
            })
        }
    }
}

/// EOM of a fixed model at every budget, with truth values when available.
///
/// Each point is exactly what `eom_evaluate` returns for that budget.
pub fn budget_sweep(
    net: &Mlp,
    params: &ParamVector,
    rct: &Dataset,
    budgets: &[f64],
    truth: Option<&FullOutcomeTable>,
) -> Result<Vec<CurvePoint>> {
    if budgets.windows(2).any(|w| w[1] < w[0]) {
        return Err(config_error("sweep budgets must be ascending"));
    }
    let preds = net.predict(params.as_slice(), &rct.feature_batch())?;
    budgets
        .iter()
        .map(|&budget| {
            let (res, choice) =
                eom_allocation(&preds, rct, &BudgetSpec::per_capita(budget, rct.len()))?;
            let (true_revenue, true_cost) = match truth {
                Some(t) => {
                    let n = choice.len() as f64;
                    let (r, c) = choice
                        .iter()
                        .enumerate()
                        .fold((0.0, 0.0), |(r, c), (i, &j)| {
                            (r + t.revenue(i, j), c + t.cost(i, j))
                        });
                    (Some(r / n), Some(c / n))
                }
                None => (None, None),
            };
            Ok(CurvePoint {
                budget,
                revenue: res.revenue,
                cost: res.cost,
                lambda_star: res.lambda_star,
                within_budget: res.within_budget,
                true_revenue,
                true_cost,
            })
        })
        .collect()
}

/// A unit of work: one method and seed, trained at one budget and
/// evaluated at the listed budgets.
#[derive(Debug, Clone)]
struct Job {
    method: Method,
    seed: u64,
    train_budget: f64,
    eval_budgets: Vec<f64>,
}

fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            if cfg.retrain_per_budget {
                for &b in &cfg.budgets {
                    out.push(Job {
                        method,
                        seed,
                        train_budget: b,
                        eval_budgets: vec![b],
                    });
                }
            } else {
                out.push(Job {
                    method,
                    seed,
                    train_budget: cfg.training_budget(),
                    eval_budgets: cfg.budgets.clone(),
                });
            }
        }
    }
    out
}

/// Seed and the bit pattern of the training budget.
type TeacherKey = (u64, u64);

type TeacherResult = std::result::Result<ParamVector, String>;

fn teacher_key(seed: u64, budget: f64) -> TeacherKey {
    (seed, budget.to_bits())
}

fn run_job(
    job: &Job,
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    models: &Models,
    teachers: &[(TeacherKey, TeacherResult)],
) -> CellResult {
    let started = Instant::now();
    let teacher = teachers
        .iter()
        .find(|(k, _)| *k == teacher_key(job.seed, job.train_budget))
        .map(|(_, t)| t);
    let outcome = (|| -> Result<(Vec<CurvePoint>, TrainNotes)> {
        let teacher = match teacher {
            Some(Ok(p)) => Some(p),
            Some(Err(e)) => {
                return Err(HarnessError::Config(format!(
                    "teacher training failed: {e}"
                )))
            }
            None => None,
        };
        let trained = train_method(
            job.method,
            cfg,
            data,
            models,
            job.seed,
            job.train_budget,
            teacher,
        )?;
        let curve = budget_sweep(
            &models.target,
            &trained.params,
            &data.rct_test,
            &job.eval_budgets,
            data.test_truth.as_ref(),
        )?;
        Ok((curve, trained.notes))
    })();
    let wall_ms = started.elapsed().as_millis() as u64;
    match outcome {
        Ok((curve, notes)) => {
            info!("{} seed {} done in {wall_ms} ms", job.method, job.seed);
            CellResult {
                method: job.method,
                seed: job.seed,
                train_budget: job.train_budget,
                status: CellStatus::Ok,
                error: None,
                curve,
                notes,
                wall_ms,
            }
        }
        Err(e) => {
            warn!("{} seed {} failed: {e}", job.method, job.seed);
            CellResult {
                method: job.method,
                seed: job.seed,
                train_budget: job.train_budget,
                status: CellStatus::Failed,
                error: Some(e.to_string()),
                curve: Vec::new(),
                notes: TrainNotes::default(),
                wall_ms,
            }
        }
    }
}

/// Runs the grid on already-loaded data.
pub fn run_on(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<MetricsReport> {
    cfg.validate()?;
    let started = Instant::now();
    let models = Models::new(cfg, data)?;
    let all = jobs(cfg);
    let mut keys: Vec<TeacherKey> = all
        .iter()
        .filter(|j| j.method.needs_teacher())
        .map(|j| teacher_key(j.seed, j.train_budget))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| config_error(format!("cannot start worker pool: {e}")))?;
    let cells = pool.install(|| {
        let teachers: Vec<(TeacherKey, TeacherResult)> = keys
            .par_iter()
            .map(|&(seed, bits)| {
                let t = train_teacher(cfg, data, &models, seed, f64::from_bits(bits))
                    .map_err(|e| e.to_string());
                ((seed, bits), t)
            })
            .collect();
        all.par_iter()
            .map(|job| run_job(job, cfg, data, &models, &teachers))
            .collect::<Vec<CellResult>>()
    });
    let summary = summarize(&cells, &cfg.methods, &cfg.budgets, cfg.reference);
    Ok(MetricsReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        reference: cfg.reference,
        cells,
        summary,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Loads the configured data and runs the grid.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_on(cfg, &data)
}
