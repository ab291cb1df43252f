//! Samples, datasets, prediction matrices and CSV ingestion.
//!
//! A dataset file has the header `f0,..,f{d-1},treatment,revenue,cost` and
//! one row per individual. Synthetic datasets may carry a sidecar with the
//! full potential-outcome table, header `r0,..,r{M-1},c0,..,c{M-1}`, one row
//! per sample in the same order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Rct,
    Obs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub treatment: usize,
    pub revenue: f64,
    pub cost: f64,
}

/// An immutable collection of factual observations.
///
/// Group counts and propensities are computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_treatments: usize,
    feature_dim: usize,
    source: Source,
    group_counts: Vec<usize>,
    propensities: Vec<f64>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_treatments: usize, source: Source) -> Result<Self> {
        if samples.is_empty() {
            return Err(validation("empty dataset"));
        }
        if num_treatments == 0 {
            return Err(validation("num_treatments must be at least 1"));
        }
        let feature_dim = samples[0].features.len();
        let mut group_counts = vec![0usize; num_treatments];
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(validation(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.treatment >= num_treatments {
                return Err(validation(format!(
                    "sample {i} has treatment {} outside [0, {num_treatments})",
                    s.treatment
                )));
            }
            if !s.revenue.is_finite()
                || !s.cost.is_finite()
                || s.features.iter().any(|x| !x.is_finite())
            {
                return Err(validation(format!("sample {i} has non-finite values")));
            }
            group_counts[s.treatment] += 1;
        }
        let n = samples.len() as f64;
        let propensities = group_counts.iter().map(|&c| c as f64 / n).collect();
        Ok(Self {
            samples,
            num_treatments,
            feature_dim,
            source,
            group_counts,
            propensities,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_treatments(&self) -> usize {
        self.num_treatments
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn group_counts(&self) -> &[usize] {
        &self.group_counts
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    /// Fails unless every treatment arm has at least one sample.
    pub fn require_full_support(&self) -> Result<()> {
        match self.group_counts.iter().position(|&c| c == 0) {
            Some(t) => Err(validation(format!("treatment group {t} is empty"))),
            None => Ok(()),
        }
    }

    pub fn require_rct(&self) -> Result<()> {
        if self.source != Source::Rct {
            return Err(validation("operation requires an RCT dataset"));
        }
        self.require_full_support()
    }

    /// Features as a contiguous row-major batch.
    pub fn feature_batch(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(samples, self.num_treatments, self.source)
    }

    pub fn with_source(&self, source: Source) -> Dataset {
        Dataset {
            source,
            ..self.clone()
        }
    }

    /// Concatenation of two datasets over the same treatment set.
    pub fn concat(&self, other: &Dataset, source: Source) -> Result<Dataset> {
        if self.num_treatments != other.num_treatments || self.feature_dim != other.feature_dim {
            return Err(validation(
                "cannot concatenate datasets with different shapes",
            ));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Dataset::new(samples, self.num_treatments, source)
    }

    pub fn map_features(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                features: f(&s.features),
                ..s.clone()
            })
            .collect();
        Dataset::new(samples, self.num_treatments, self.source)
    }
}

/// Per-column standardization fitted on one dataset and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.feature_dim();
        let n = ds.len() as f64;
        let mut mean = vec![0.0; d];
        for s in ds.samples() {
            for (m, x) in mean.iter_mut().zip(&s.features) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in ds.samples() {
            for ((v, x), m) in var.iter_mut().zip(&s.features).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        ds.map_features(|x| {
            x.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
    }
}

/// Predicted revenue and cost for every (individual, treatment) pair, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix<T = f64> {
    n: usize,
    m: usize,
    revenues: Vec<T>,
    costs: Vec<T>,
}

impl<T: Copy> PredictionMatrix<T> {
    pub fn new(n: usize, m: usize, revenues: Vec<T>, costs: Vec<T>) -> Result<Self> {
        if revenues.len() != n * m || costs.len() != n * m {
            return Err(validation(format!(
                "prediction matrix expects {n}x{m} entries, got {} revenues and {} costs",
                revenues.len(),
                costs.len()
            )));
        }
        Ok(Self {
            n,
            m,
            revenues,
            costs,
        })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn r(&self, i: usize, j: usize) -> T {
        self.revenues[i * self.m + j]
    }

    #[inline]
    pub fn c(&self, i: usize, j: usize) -> T {
        self.costs[i * self.m + j]
    }

    pub fn revenues(&self) -> &[T] {
        &self.revenues
    }

    pub fn costs(&self) -> &[T] {
        &self.costs
    }

    pub fn revenue_row(&self, i: usize) -> &[T] {
        &self.revenues[i * self.m..(i + 1) * self.m]
    }

    pub fn cost_row(&self, i: usize) -> &[T] {
        &self.costs[i * self.m..(i + 1) * self.m]
    }

    pub fn into_parts(self) -> (Vec<T>, Vec<T>) {
        (self.revenues, self.costs)
    }
}

impl<T: Scalar> PredictionMatrix<T> {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            revenues: vec![T::zero(); n * m],
            costs: vec![T::zero(); n * m],
        }
    }

    pub fn revenue_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.revenues[i * self.m + j]
    }

    pub fn cost_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.costs[i * self.m + j]
    }

    /// Primal values, dropping any tangent information.
    pub fn values(&self) -> PredictionMatrix<f64> {
        PredictionMatrix {
            n: self.n,
            m: self.m,
            revenues: self.revenues.iter().map(|x| x.value()).collect(),
            costs: self.costs.iter().map(|x| x.value()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.revenues
            .iter()
            .chain(&self.costs)
            .all(|x| x.value().is_finite())
    }
}

impl PredictionMatrix<f64> {
    pub fn from_rows(revenues: &[Vec<f64>], costs: &[Vec<f64>]) -> Result<Self> {
        let n = revenues.len();
        let m = revenues.first().map_or(0, Vec::len);
        if costs.len() != n || revenues.iter().chain(costs).any(|r| r.len() != m) {
            return Err(validation("ragged prediction rows"));
        }
        Self::new(n, m, revenues.concat(), costs.concat())
    }

    /// Copy with every cost entry raised to at least `floor`.
    pub fn with_cost_floor(&self, floor: f64) -> Self {
        Self {
            costs: self.costs.iter().map(|&c| c.max(floor)).collect(),
            ..self.clone()
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            n: self.n,
            m: self.m,
            revenues: self.revenues.iter().map(|x| x * k).collect(),
            costs: self.costs.iter().map(|x| x * k).collect(),
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut revenues = Vec::with_capacity(indices.len() * self.m);
        let mut costs = Vec::with_capacity(indices.len() * self.m);
        for &i in indices {
            revenues.extend_from_slice(self.revenue_row(i));
            costs.extend_from_slice(self.cost_row(i));
        }
        Self {
            n: indices.len(),
            m: self.m,
            revenues,
            costs,
        }
    }
}

/// Ground-truth potential outcomes, known only for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct FullOutcomeTable {
    pub table: PredictionMatrix<f64>,
}

impl FullOutcomeTable {
    pub fn new(table: PredictionMatrix<f64>) -> Self {
        Self { table }
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn cols(&self) -> usize {
        self.table.cols()
    }

    pub fn revenue(&self, i: usize, j: usize) -> f64 {
        self.table.r(i, j)
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.table.c(i, j)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self::new(self.table.select_rows(indices))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSpec {
    pub num_treatments: usize,
    pub source: Source,
    /// Expected number of feature columns; inferred from the header when `None`.
    pub feature_dim: Option<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: ColumnSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let ncols = headers.len();
    if ncols < 3
        || &headers[ncols - 3] != "treatment"
        || &headers[ncols - 2] != "revenue"
        || &headers[ncols - 1] != "cost"
    {
        return Err(parse_err(
            1,
            "header must end with treatment,revenue,cost".into(),
        ));
    }
    let d = ncols - 3;
    for (k, name) in headers.iter().take(d).enumerate() {
        if name != format!("f{k}") {
            return Err(parse_err(
                1,
                format!("expected feature column f{k}, found {name:?}"),
            ));
        }
    }
    if let Some(expected) = schema.feature_dim {
        if expected != d {
            return Err(validation(format!(
                "expected {expected} feature columns, found {d}"
            )));
        }
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            record[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", &headers[k])))
        };
        let features = (0..d).map(num).collect::<Result<Vec<_>>>()?;
        let treatment = record[d]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("treatment: {e}")))?;
        if treatment >= schema.num_treatments {
            return Err(validation(format!(
                "line {line}: treatment {treatment} outside [0, {})",
                schema.num_treatments
            )));
        }
        samples.push(Sample {
            features,
            treatment,
            revenue: num(d + 1)?,
            cost: num(d + 2)?,
        });
    }
    Dataset::new(samples, schema.num_treatments, schema.source)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..ds.feature_dim())
        .map(|k| format!("f{k}"))
        .chain(["treatment".into(), "revenue".into(), "cost".into()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for s in ds.samples() {
        for x in &s.features {
            write!(w, "{x},")?;
        }
        writeln!(w, "{},{},{}", s.treatment, s.revenue, s.cost)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_outcome_table(table: &FullOutcomeTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let m = table.cols();
    let header: Vec<String> = (0..m)
        .map(|j| format!("r{j}"))
        .chain((0..m).map(|j| format!("c{j}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..table.rows() {
        let row: Vec<String> = table
            .table
            .revenue_row(i)
            .iter()
            .chain(table.table.cost_row(i))
            .map(|x| x.to_string())
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_outcome_table(path: impl AsRef<Path>) -> Result<FullOutcomeTable> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let ncols = reader.headers()?.len();
    if ncols == 0 || ncols % 2 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "outcome table needs r0..r{M-1},c0..c{M-1} columns".into(),
        });
    }
    let m = ncols / 2;
    let mut revenues = Vec::new();
    let mut costs = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column {k}: {e}"),
            })?;
            if k < m {
                revenues.push(v);
            } else {
                costs.push(v);
            }
        }
    }
    let n = revenues.len() / m;
    Ok(FullOutcomeTable::new(PredictionMatrix::new(
        n, m, revenues, costs,
    )?))
}

/// Partition `ds` into disjoint parts with the given size fractions.
///
/// Sizes are `floor(f_k * N)` with the remainder handed to the leading parts,
/// and rows are drawn from a seeded permutation.
pub fn split_dataset(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    Ok(split_indices(ds.len(), fractions, seed)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect::<Result<Vec<_>>>()?)
}

pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(validation("split fractions must be non-negative"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(validation(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (f * n as f64).floor() as usize)
        .collect();
    let mut remainder = n - sizes.iter().sum::<usize>();
    for s in sizes.iter_mut() {
        if remainder == 0 {
            break;
        }
        *s += 1;
        remainder -= 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let mut part = order[start..start + size].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += size;
    }
    Ok(parts)
}
