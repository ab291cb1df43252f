//! Experiment configuration, loaded from one TOML or JSON file.

use std::fmt;
use std::path::{Path, PathBuf};

use bidfcl_core::bilevel::{BilevelConfig, DfclConfig, DiffMode, FitOptions, Surrogate};
use bidfcl_core::net::Activation;
use bidfcl_core::synth::BenchmarkSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    TsmSlRct,
    TsmSlObs,
    TsmSlBoth,
    DfclPpl,
    DfclPifd,
    DfclDpl,
    DfclDifd,
    BidfclPpl,
    BidfclPifd,
    BidfclPplExplicit,
    BidfclPifdExplicit,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::TsmSlRct,
        Method::TsmSlObs,
        Method::TsmSlBoth,
        Method::DfclPpl,
        Method::DfclPifd,
        Method::DfclDpl,
        Method::DfclDifd,
        Method::BidfclPpl,
        Method::BidfclPifd,
        Method::BidfclPplExplicit,
        Method::BidfclPifdExplicit,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::TsmSlRct => "TSM-SL(RCT)",
            Method::TsmSlObs => "TSM-SL(OBS)",
            Method::TsmSlBoth => "TSM-SL(RCT+OBS)",
            Method::DfclPpl => "DFCL-PPL",
            Method::DfclPifd => "DFCL-PIFD",
            Method::DfclDpl => "DFCL-DPL",
            Method::DfclDifd => "DFCL-DIFD",
            Method::BidfclPpl => "Bi-DFCL-PPL",
            Method::BidfclPifd => "Bi-DFCL-PIFD",
            Method::BidfclPplExplicit => "Bi-DFCL-PPL(explicit)",
            Method::BidfclPifdExplicit => "Bi-DFCL-PIFD(explicit)",
        }
    }

    /// Name used in config files and CSV output.
    pub fn key(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }

    pub fn surrogate(self) -> Option<Surrogate> {
        match self {
            Method::DfclPpl | Method::BidfclPpl | Method::BidfclPplExplicit => Some(Surrogate::Ppl),
            Method::DfclPifd | Method::BidfclPifd | Method::BidfclPifdExplicit => {
                Some(Surrogate::Pifd)
            }
            Method::DfclDpl => Some(Surrogate::Dpl),
            Method::DfclDifd => Some(Surrogate::Difd),
            _ => None,
        }
    }

    pub fn is_bilevel(self) -> bool {
        matches!(
            self,
            Method::BidfclPpl
                | Method::BidfclPifd
                | Method::BidfclPplExplicit
                | Method::BidfclPifdExplicit
        )
    }

    pub fn diff_mode(self) -> DiffMode {
        match self {
            Method::BidfclPplExplicit | Method::BidfclPifdExplicit => DiffMode::Explicit,
            _ => DiffMode::Implicit,
        }
    }

    /// Whether training starts from the RCT teacher of the same seed.
    pub fn needs_teacher(self) -> bool {
        !matches!(self, Method::TsmSlObs | Method::TsmSlBoth)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.key() == key)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// CSV files of a prepared benchmark, as written by `bidfcl generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub obs: PathBuf,
    pub rct_train: PathBuf,
    pub rct_val: PathBuf,
    pub rct_test: PathBuf,
    /// Noiseless outcomes of the test rows, when known.
    #[serde(default)]
    pub test_truth: Option<PathBuf>,
    pub num_treatments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(BenchmarkSpec),
    Files(FileData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(BenchmarkSpec::standard())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bridge_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            activation: Activation::Tanh,
            bridge_hidden: vec![16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub methods: Vec<Method>,
    /// Method the improvement column is relative to.
    pub reference: Option<Method>,
    /// Per-capita budgets at which every trained model is evaluated; ascending.
    pub budgets: Vec<f64>,
    /// Per-capita budget used while training; the first evaluation budget when unset.
    pub train_budget: Option<f64>,
    /// Train a separate model at every budget and evaluate it there only.
    pub retrain_per_budget: bool,
    /// Standardize every feature column with statistics fitted on `rct_train`.
    pub standardize_features: bool,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    /// Factual-MSE training of the RCT teacher and TSM-SL(RCT).
    pub teacher: FitOptions,
    /// Factual-MSE training of the OBS and pooled TSM-SL baselines.
    pub obs_fit: FitOptions,
    /// Single-level settings; the surrogate comes from the method.
    pub dfcl: DfclConfig,
    /// Bi-level settings; surrogate and differentiation mode come from the method.
    pub bilevel: BilevelConfig,
    pub out_dir: PathBuf,
    /// Cells trained concurrently.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataConfig::default(),
            methods: vec![Method::TsmSlRct, Method::BidfclPpl],
            reference: Some(Method::TsmSlRct),
            budgets: vec![0.3],
            train_budget: None,
            retrain_per_budget: false,
            standardize_features: false,
            seeds: vec![0],
            model: ModelConfig::default(),
            teacher: FitOptions::default(),
            obs_fit: FitOptions {
                epochs: 30,
                ..FitOptions::default()
            },
            dfcl: DfclConfig::default(),
            bilevel: BilevelConfig::default(),
            out_dir: PathBuf::from("runs/experiment"),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    /// Loads a `.toml` or `.json` file; anything else is parsed as TOML.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(config_error("at least one method is required"));
        }
        for (k, m) in self.methods.iter().enumerate() {
            if self.methods[..k].contains(m) {
                return Err(config_error(format!("method {m} is listed twice")));
            }
        }
        if self.budgets.is_empty() {
            return Err(config_error("at least one budget is required"));
        }
        if self.budgets.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
            return Err(config_error("budgets must be positive and finite"));
        }
        if self.budgets.windows(2).any(|w| w[1] < w[0]) {
            return Err(config_error("budgets must be ascending"));
        }
        if let Some(b) = self.train_budget {
            if !(b > 0.0) || !b.is_finite() {
                return Err(config_error("train_budget must be positive and finite"));
            }
        }
        if let Some(r) = self.reference {
            if !self.methods.contains(&r) {
                return Err(config_error(format!(
                    "reference method {r} is not among the methods"
                )));
            }
        }
        if self.workers == 0 {
            return Err(config_error("workers must be at least 1"));
        }
        self.bilevel.validate()?;
        Ok(())
    }

    pub fn training_budget(&self) -> f64 {
        self.train_budget.unwrap_or(self.budgets[0])
    }

    /// Applies the command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        self
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
