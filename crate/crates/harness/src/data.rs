//! Resolving the configured data into train, validation and test splits.

use std::path::{Path, PathBuf};

use bidfcl_core::data::{
    load_dataset, load_outcome_table, save_dataset, save_outcome_table, ColumnSpec, Dataset,
    FeatureScaler, FullOutcomeTable, Source,
};
use bidfcl_core::synth::{build_benchmark, Benchmark, BenchmarkSpec};
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig, FileData};
use crate::error::{config_error, Result};

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub obs: Dataset,
    pub rct_train: Dataset,
    pub rct_val: Dataset,
    pub rct_test: Dataset,
    /// Noiseless outcomes aligned with `rct_test`.
    pub test_truth: Option<FullOutcomeTable>,
}

impl ExperimentData {
    pub fn from_benchmark(b: &Benchmark) -> Self {
        Self {
            obs: b.obs.clone(),
            rct_train: b.rct_train.clone(),
            rct_val: b.rct_val.clone(),
            rct_test: b.rct_test.clone(),
            test_truth: Some(b.population.outcomes.select_rows(&b.test_rows)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.rct_train.feature_dim()
    }

    pub fn num_treatments(&self) -> usize {
        self.rct_train.num_treatments()
    }

    /// Rescales all splits with a scaler fitted on `rct_train`.
    pub fn standardized(self) -> Result<Self> {
        let scaler = FeatureScaler::fit(&self.rct_train);
        Ok(Self {
            obs: scaler.transform(&self.obs)?,
            rct_train: scaler.transform(&self.rct_train)?,
            rct_val: scaler.transform(&self.rct_val)?,
            rct_test: scaler.transform(&self.rct_test)?,
            test_truth: self.test_truth,
        })
    }

    fn check(&self) -> Result<()> {
        let (d, m) = (self.feature_dim(), self.num_treatments());
        for (name, ds) in [
            ("obs", &self.obs),
            ("rct_val", &self.rct_val),
            ("rct_test", &self.rct_test),
        ] {
            if ds.feature_dim() != d || ds.num_treatments() != m {
                return Err(config_error(format!(
                    "{name} has a different shape than rct_train"
                )));
            }
        }
        for ds in [&self.rct_train, &self.rct_val, &self.rct_test] {
            ds.require_rct()?;
        }
        if let Some(t) = &self.test_truth {
            if t.rows() != self.rct_test.len() || t.cols() != m {
                return Err(config_error("test truth table does not match rct_test"));
            }
        }
        Ok(())
    }
}

pub fn load_data(cfg: &DataConfig) -> Result<ExperimentData> {
    let data = match cfg {
        DataConfig::Synthetic(spec) => ExperimentData::from_benchmark(&build_benchmark(spec)?),
        DataConfig::Files(files) => load_files(files)?,
    };
    data.check()?;
    Ok(data)
}

/// The data an experiment trains on, after optional feature scaling.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let data = load_data(&cfg.data)?;
    if cfg.standardize_features {
        data.standardized()
    } else {
        Ok(data)
    }
}

fn load_files(f: &FileData) -> Result<ExperimentData> {
    let schema = |source| ColumnSpec {
        num_treatments: f.num_treatments,
        source,
        feature_dim: None,
    };
    Ok(ExperimentData {
        obs: load_dataset(&f.obs, schema(Source::Obs))?,
        rct_train: load_dataset(&f.rct_train, schema(Source::Rct))?,
        rct_val: load_dataset(&f.rct_val, schema(Source::Rct))?,
        rct_test: load_dataset(&f.rct_test, schema(Source::Rct))?,
        test_truth: f.test_truth.as_ref().map(load_outcome_table).transpose()?,
    })
}

/// Summary written next to generated CSVs.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratedManifest {
    pub spec: BenchmarkSpec,
    pub files: FileData,
    pub obs_roi: f64,
    pub random_roi: f64,
}

/// Builds the synthetic benchmark and writes its splits as CSV under `dir`.
pub fn write_benchmark(spec: &BenchmarkSpec, dir: &Path) -> Result<GeneratedManifest> {
    std::fs::create_dir_all(dir)?;
    let b = build_benchmark(spec)?;
    let data = ExperimentData::from_benchmark(&b);
    let path = |name: &str| -> PathBuf { dir.join(name) };
    save_dataset(&data.obs, path("obs.csv"))?;
    save_dataset(&data.rct_train, path("rct_train.csv"))?;
    save_dataset(&data.rct_val, path("rct_val.csv"))?;
    save_dataset(&data.rct_test, path("rct_test.csv"))?;
    if let Some(t) = &data.test_truth {
        save_outcome_table(t, path("rct_test_truth.csv"))?;
    }
    let manifest = GeneratedManifest {
        spec: spec.clone(),
        files: FileData {
            obs: path("obs.csv"),
            rct_train: path("rct_train.csv"),
            rct_val: path("rct_val.csv"),
            rct_test: path("rct_test.csv"),
            test_truth: Some(path("rct_test_truth.csv")),
            num_treatments: data.num_treatments(),
        },
        obs_roi: b.obs_roi,
        random_roi: b.random_roi,
    };
    std::fs::write(
        path("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
