use std::path::PathBuf;
use std::process::ExitCode;

use bidfcl_core::net::{load_checkpoint, save_checkpoint, Mlp};
use bidfcl_harness::config::{DataConfig, ExperimentConfig, Method};
use bidfcl_harness::data::{prepare_data, write_benchmark};
use bidfcl_harness::runner::{budget_sweep, train_method, train_teacher, Models};
use bidfcl_harness::{run_experiment, HarnessError, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

#[derive(Parser)]
#[command(
    name = "bidfcl",
    version,
    about = "Decision-focused budget allocation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (.toml or .json).
    #[arg(short, long)]
    config: PathBuf,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic benchmark and write its splits as CSV.
    Generate(Common),
    /// Train one method for the first seed and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        method: Method,
    },
    /// Evaluate a checkpoint on the test split at the training budget.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the test split at every configured budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the full (method, seed, budget) grid and write the report.
    Experiment(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_path(&common.config)?
        .with_overrides(common.seed, common.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: PathBuf, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn evaluate(common: &Common, checkpoint: &PathBuf, all_budgets: bool) -> Result<()> {
    let cfg = load(common)?;
    let data = prepare_data(&cfg)?;
    let (spec, params) = load_checkpoint(checkpoint)?;
    let net = Mlp::new(spec)?;
    let budgets = if all_budgets {
        cfg.budgets.clone()
    } else {
        vec![cfg.training_budget()]
    };
    let curve = budget_sweep(
        &net,
        &params,
        &data.rct_test,
        &budgets,
        data.test_truth.as_ref(),
    )?;
    for p in &curve {
        println!(
            "budget {:.4}  eom {:.6}  cost {:.6}  lambda {:.6}",
            p.budget, p.revenue, p.cost, p.lambda_star
        );
    }
    let name = if all_budgets {
        "sweep.json"
    } else {
        "evaluation.json"
    };
    write_json(cfg.out_dir.join(name), &curve)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = load(&common)?;
            let DataConfig::Synthetic(spec) = &cfg.data else {
                return Err(HarnessError::Config("generate needs synthetic data".into()));
            };
            let mut spec = spec.clone();
            if let Some(s) = common.seed {
                spec.generator.seed = s;
            }
            let manifest = write_benchmark(&spec, &cfg.out_dir)?;
            println!(
                "wrote benchmark to {} (obs ROI {:.4}, random ROI {:.4})",
                cfg.out_dir.display(),
                manifest.obs_roi,
                manifest.random_roi
            );
            Ok(true)
        }
        Command::Train { common, method } => {
            let cfg = load(&common)?;
            let data = prepare_data(&cfg)?;
            let models = Models::new(&cfg, &data)?;
            let seed = cfg.seeds[0];
            let budget = cfg.training_budget();
            let teacher = method
                .needs_teacher()
                .then(|| train_teacher(&cfg, &data, &models, seed, budget))
                .transpose()?;
            let trained =
                train_method(method, &cfg, &data, &models, seed, budget, teacher.as_ref())?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg
                .out_dir
                .join(format!("{}_seed{seed}.json", method.key().to_lowercase()));
            save_checkpoint(&path, models.target.spec(), &trained.params)?;
            println!("saved {method} checkpoint to {}", path.display());
            Ok(true)
        }
        Command::Evaluate { common, checkpoint } => {
            evaluate(&common, &checkpoint, false).map(|_| true)
        }
        Command::Sweep { common, checkpoint } => evaluate(&common, &checkpoint, true).map(|_| true),
        Command::Experiment(common) => {
            let cfg = load(&common)?;
            let report = run_experiment(&cfg)?;
            report.write(&cfg.out_dir)?;
            for s in &report.summary {
                for b in &s.budgets {
                    let imp = b
                        .improvement
                        .map(|v| format!("{:+.2}%", 100.0 * v))
                        .unwrap_or_default();
                    println!(
                        "{:<24} B={:<6} EOM {:.4} ± {:.4} {imp}",
                        s.method.label(),
                        b.budget,
                        b.mean,
                        b.std
                    );
                }
                if !s.failed_seeds.is_empty() {
                    println!("{:<24} failed seeds {:?}", s.method.label(), s.failed_seeds);
                }
            }
            println!("report written to {}", cfg.out_dir.display());
            Ok(report.all_ok())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            error!("some cells failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
