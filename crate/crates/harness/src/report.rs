//! Per-cell results, seed aggregation and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::error::Result;

/// One point of an EOM curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: f64,
    pub revenue: f64,
    pub cost: f64,
    pub lambda_star: f64,
    pub within_budget: bool,
    /// Noiseless per-capita revenue and cost of the same allocation, on synthetic data.
    pub true_revenue: Option<f64>,
    pub true_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Training diagnostics of one cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainNotes {
    pub best_val_eom: Option<f64>,
    pub upper_steps: Option<usize>,
    pub cg_warnings: Option<usize>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub train_budget: f64,
    pub status: CellStatus,
    pub error: Option<String>,
    pub curve: Vec<CurvePoint>,
    pub notes: TrainNotes,
    /// Wall time; excluded from reproducibility comparisons.
    pub wall_ms: u64,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }

    pub fn point(&self, budget: f64) -> Option<&CurvePoint> {
        self.curve.iter().find(|p| p.budget == budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget: f64,
    /// Seeds of the successful cells, aligned with `values`.
    pub seeds: Vec<u64>,
    /// Per-seed test EOM revenue.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// `mean / reference mean − 1`.
    pub improvement: Option<f64>,
    /// Seeds whose allocation exceeded the budget on the test split.
    pub over_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub failed_seeds: Vec<u64>,
    pub budgets: Vec<BudgetSummary>,
}

impl MethodSummary {
    pub fn at(&self, budget: f64) -> Option<&BudgetSummary> {
        self.budgets.iter().find(|b| b.budget == budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub reference: Option<Method>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<MethodSummary>,
    /// Wall time of the whole run; excluded from reproducibility comparisons.
    pub wall_ms: u64,
}

impl MetricsReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(CellResult::is_ok)
    }

    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }

    /// A copy with every wall-time field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_ms = 0;
        for c in &mut r.cells {
            c.wall_ms = 0;
        }
        r
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let mut curves = csv::Writer::from_path(dir.join("curves.csv"))?;
        curves.write_record([
            "method",
            "seed",
            "train_budget",
            "budget",
            "revenue",
            "cost",
            "lambda_star",
            "within_budget",
            "true_revenue",
            "true_cost",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in self.cells.iter().filter(|c| c.is_ok()) {
            for p in &c.curve {
                curves.write_record([
                    c.method.key(),
                    c.seed.to_string(),
                    c.train_budget.to_string(),
                    p.budget.to_string(),
                    p.revenue.to_string(),
                    p.cost.to_string(),
                    p.lambda_star.to_string(),
                    p.within_budget.to_string(),
                    opt(p.true_revenue),
                    opt(p.true_cost),
                ])?;
            }
        }
        curves.flush()?;
        let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
        summary.write_record([
            "method",
            "budget",
            "n",
            "mean",
            "std",
            "improvement",
            "over_budget",
        ])?;
        for s in &self.summary {
            for b in &s.budgets {
                summary.write_record([
                    s.method.key(),
                    b.budget.to_string(),
                    b.values.len().to_string(),
                    b.mean.to_string(),
                    b.std.to_string(),
                    opt(b.improvement),
                    b.over_budget.to_string(),
                ])?;
            }
        }
        summary.flush()?;
        Ok(())
    }
}

/// Mean and sample standard deviation; the deviation is 0 below two values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups cells by method and budget, in config order.
pub fn summarize(
    cells: &[CellResult],
    methods: &[Method],
    budgets: &[f64],
    reference: Option<Method>,
) -> Vec<MethodSummary> {
    let mut out: Vec<MethodSummary> = methods
        .iter()
        .map(|&method| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.method == method).collect();
            let failed_seeds = mine.iter().filter(|c| !c.is_ok()).map(|c| c.seed).collect();
            let budgets = budgets
                .iter()
                .map(|&budget| {
                    let points: Vec<(u64, &CurvePoint)> = mine
                        .iter()
                        .filter(|c| c.is_ok())
                        .filter_map(|c| c.point(budget).map(|p| (c.seed, p)))
                        .collect();
                    let values: Vec<f64> = points.iter().map(|(_, p)| p.revenue).collect();
                    let (mean, std) = mean_std(&values);
                    BudgetSummary {
                        budget,
                        seeds: points.iter().map(|(s, _)| *s).collect(),
                        values,
                        mean,
                        std,
                        improvement: None,
                        over_budget: points.iter().filter(|(_, p)| !p.within_budget).count(),
                    }
                })
                .collect();
            MethodSummary {
                method,
                failed_seeds,
                budgets,
            }
        })
        .collect();
    if let Some(r) = reference {
        let base: Vec<f64> = out
            .iter()
            .find(|s| s.method == r)
            .map(|s| s.budgets.iter().map(|b| b.mean).collect())
            .unwrap_or_default();
        for s in &mut out {
            for (b, &rm) in s.budgets.iter_mut().zip(&base) {
                b.improvement =
                    (rm != 0.0 && rm.is_finite() && b.mean.is_finite()).then(|| b.mean / rm - 1.0);
            }
        }
    }
    out
}
