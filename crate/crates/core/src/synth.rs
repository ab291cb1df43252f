//! Synthetic marketing populations with known potential outcomes.
//!
//! A population is a feature matrix plus the noiseless revenue and cost of
//! every (individual, treatment) pair. RCT data are drawn by randomizing
//! treatments independently of features; OBS data are drawn by keeping only
//! the randomized individuals whose draw agrees with a targeting policy, so
//! treatment ends up correlated with features.
//!
//! Randomness is keyed per individual: each individual owns a ChaCha stream
//! selected by its population id, so results do not depend on traversal
//! order or on which slice of the population is being processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bilevel::{train_baseline_tsm, FitOptions};
use crate::data::{split_indices, Dataset, FullOutcomeTable, PredictionMatrix, Sample, Source};
use crate::error::{validation, Result};
use crate::mckp::{solve_allocation, BudgetSpec, CostModel};
use crate::net::{Activation, Mlp, NetworkSpec, OutputActivation, ParamVector};

const SALT_SURFACE: u64 = 0x5eed_0001;
const SALT_FEATURES: u64 = 0x5eed_0002;
const SALT_ASSIGN: u64 = 0x5eed_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFamily {
    Linear,
    Logistic,
    Piecewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub family: ResponseFamily,
    /// Standard deviation of additive revenue noise.
    pub noise_std: f64,
    /// Log-scale standard deviation of multiplicative cost noise.
    pub cost_noise_std: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(validation("generator needs at least 2 features"));
        }
        if self.m == 0 || self.n == 0 {
            return Err(validation(
                "generator needs at least one treatment and one individual",
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.cost_noise_std >= 0.0) {
            return Err(validation("noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Random directions that define one response surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    family: ResponseFamily,
    m: usize,
    base: Vec<f64>,
    uplift: Vec<f64>,
    cost: Vec<f64>,
    wiggle: Vec<f64>,
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Surface {
    pub fn from_spec(spec: &GeneratorSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ SALT_SURFACE);
        Self {
            family: spec.family,
            m: spec.m,
            base: unit_direction(&mut rng, spec.d),
            uplift: unit_direction(&mut rng, spec.d),
            cost: unit_direction(&mut rng, spec.d),
            wiggle: unit_direction(&mut rng, spec.d),
        }
    }

    /// Diminishing uplift level of treatment `j`: 0 for control, rising to 1.
    fn level(&self, j: usize) -> f64 {
        if self.m < 2 {
            return 0.0;
        }
        let top = (self.m - 1) as f64;
        let j = j as f64;
        (j / (j + 1.0)) * (top + 1.0) / top
    }

    /// Linear cost level of treatment `j`: 0 for control, 1 for the largest.
    fn intensity(&self, j: usize) -> f64 {
        if self.m < 2 {
            0.0
        } else {
            j as f64 / (self.m - 1) as f64
        }
    }

    /// Noiseless `(revenue, cost)` of treatment `j` at features `x`.
    pub fn outcome(&self, x: &[f64], j: usize) -> (f64, f64) {
        let b = dot(&self.base, x);
        let u = dot(&self.uplift, x);
        let v = dot(&self.cost, x);
        let w = dot(&self.wiggle, x);
        let g = self.level(j);
        let k = self.intensity(j);
        match self.family {
            ResponseFamily::Linear => {
                let r = 5.0 + 1.5 * b + g * (1.0 + 0.8 * u);
                let c = k * (1.0 + 0.4 * v).max(0.1);
                (r.max(0.0), c)
            }
            ResponseFamily::Logistic => {
                let p = sigmoid(-0.5 + 1.2 * b + g * (0.8 + 0.8 * u));
                let c = k * (0.5 + sigmoid(1.5 * v));
                (10.0 * p, c)
            }
            ResponseFamily::Piecewise => {
                // a rugged baseline plus a thresholded, heterogeneous uplift
                let base = 1.0 + 0.3 * b + 0.3 * (2.5 * w).sin() + 0.2 * x[0] * x[1];
                let responsive = if u > -0.3 { 1.0 } else { 0.0 };
                let strong = if u > 0.6 { 1.0 } else { 0.0 };
                let uplift =
                    g * (1.2 * responsive + 1.6 * strong * k) - 0.4 * g * (1.0 - responsive);
                let c = k * (0.6 + 0.8 * sigmoid(2.0 * v)) * (1.0 + 0.5 * strong);
                ((base + uplift).max(0.0), c)
            }
        }
    }
}

/// Features and noiseless outcome tables of a synthetic population.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub spec: GeneratorSpec,
    pub features: Vec<Vec<f64>>,
    pub outcomes: FullOutcomeTable,
    /// Stable identifier of each row; selects the row's random stream.
    pub ids: Vec<u64>,
}

fn individual_rng(seed: u64, salt: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(id);
    rng
}

pub fn generate_population(spec: &GeneratorSpec) -> Result<Population> {
    spec.validate()?;
    let surface = Surface::from_spec(spec);
    let mut features = Vec::with_capacity(spec.n);
    let mut revenues = Vec::with_capacity(spec.n * spec.m);
    let mut costs = Vec::with_capacity(spec.n * spec.m);
    for id in 0..spec.n as u64 {
        let mut rng = individual_rng(spec.seed, SALT_FEATURES, id);
        let x: Vec<f64> = (0..spec.d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..spec.m {
            let (r, c) = surface.outcome(&x, j);
            revenues.push(r);
            costs.push(c);
        }
        features.push(x);
    }
    let table = PredictionMatrix::new(spec.n, spec.m, revenues, costs)?;
    Ok(Population {
        spec: spec.clone(),
        features,
        outcomes: FullOutcomeTable::new(table),
        ids: (0..spec.n as u64).collect(),
    })
}

impl Population {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Population {
        Population {
            spec: self.spec.clone(),
            features: rows.iter().map(|&i| self.features[i].clone()).collect(),
            outcomes: self.outcomes.select_rows(rows),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn feature_batch(&self) -> Vec<&[f64]> {
        self.features.iter().map(|x| x.as_slice()).collect()
    }
}

/// A sampled dataset together with the rows and noise draws behind it.
#[derive(Debug, Clone)]
pub struct Draw {
    pub dataset: Dataset,
    /// Population row of every sample.
    pub rows: Vec<usize>,
    /// Additive revenue noise of every sample.
    pub revenue_noise: Vec<f64>,
    /// Multiplicative cost factor of every sample.
    pub cost_factor: Vec<f64>,
}

/// Treatment draw and observation noise of one individual.
struct Observation {
    treatment: usize,
    revenue_noise: f64,
    cost_factor: f64,
}

fn validate_probs(probs: &[f64], m: usize) -> Result<()> {
    if probs.len() != m {
        return Err(validation(format!(
            "expected {m} assignment probabilities, got {}",
            probs.len()
        )));
    }
    if let Some(j) = probs.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(validation(format!(
            "treatment {j} has zero assignment probability"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(validation(format!(
            "assignment probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Noise wrapped onto `[−bound, bound]`; symmetric, so it stays zero-mean.
fn wrapped_noise(z: f64, bound: f64) -> f64 {
    if bound <= 0.0 {
        return 0.0;
    }
    if z.abs() <= bound {
        return z;
    }
    (z + bound).rem_euclid(2.0 * bound) - bound
}

fn observe(pop: &Population, row: usize, probs: &[f64], seed: u64) -> Observation {
    let mut rng = individual_rng(seed, SALT_ASSIGN, pop.ids[row]);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut treatment = probs.len() - 1;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            treatment = j;
            break;
        }
    }
    let zr: f64 = rng.sample(StandardNormal);
    let zc: f64 = rng.sample(StandardNormal);
    let sigma = pop.spec.noise_std;
    let s = pop.spec.cost_noise_std;
    // bounded by the true revenue so observed revenue never goes negative
    let revenue_noise = wrapped_noise(sigma * zr, pop.outcomes.revenue(row, treatment));
    let cost_factor = (s * zc - 0.5 * s * s).exp();
    Observation {
        treatment,
        revenue_noise,
        cost_factor,
    }
}

fn draw_rows(
    pop: &Population,
    rows: Vec<usize>,
    treatments: &[usize],
    obs: &[Observation],
    source: Source,
) -> Result<Draw> {
    let mut samples = Vec::with_capacity(rows.len());
    let mut revenue_noise = Vec::with_capacity(rows.len());
    let mut cost_factor = Vec::with_capacity(rows.len());
    for (k, &row) in rows.iter().enumerate() {
        let t = treatments[k];
        let o = &obs[k];
        samples.push(Sample {
            features: pop.features[row].clone(),
            treatment: t,
            revenue: pop.outcomes.revenue(row, t) + o.revenue_noise,
            cost: pop.outcomes.cost(row, t) * o.cost_factor,
        });
        revenue_noise.push(o.revenue_noise);
        cost_factor.push(o.cost_factor);
    }
    Ok(Draw {
        dataset: Dataset::new(samples, pop.spec.m, source)?,
        rows,
        revenue_noise,
        cost_factor,
    })
}

/// Randomized assignment of every individual with the given arm probabilities.
pub fn sample_rct(pop: &Population, probs: &[f64], seed: u64) -> Result<Draw> {
    validate_probs(probs, pop.spec.m)?;
    let obs: Vec<Observation> = (0..pop.len())
        .map(|i| observe(pop, i, probs, seed))
        .collect();
    let treatments: Vec<usize> = obs.iter().map(|o| o.treatment).collect();
    draw_rows(
        pop,
        (0..pop.len()).collect(),
        &treatments,
        &obs,
        Source::Rct,
    )
}

pub fn uniform_probs(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// A targeting policy whose greedy allocation defines the OBS selection.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Allocation induced by a response model's predictions.
    Model {
        net: &'a Mlp,
        params: &'a ParamVector,
        per_capita_budget: f64,
    },
    /// Allocation on the true outcome table.
    Oracle { per_capita_budget: f64 },
}

impl Policy<'_> {
    pub fn choices(&self, pop: &Population) -> Result<Vec<usize>> {
        let (preds, per_capita) = match *self {
            Policy::Model {
                net,
                params,
                per_capita_budget,
            } => (
                net.predict(params.as_slice(), &pop.feature_batch())?,
                per_capita_budget,
            ),
            Policy::Oracle { per_capita_budget } => (pop.outcomes.table.clone(), per_capita_budget),
        };
        let budget = BudgetSpec::per_capita(per_capita, pop.len());
        Ok(solve_allocation(&preds, CostModel::Predicted, &budget)?.choice)
    }
}

/// Keeps the individuals whose uniform random treatment draw equals the
/// policy's greedy choice. With a single treatment the slice is returned as is.
pub fn build_obs_via_policy(pop: &Population, policy: &Policy<'_>, seed: u64) -> Result<Draw> {
    let m = pop.spec.m;
    let probs = uniform_probs(m);
    let obs: Vec<Observation> = (0..pop.len())
        .map(|i| observe(pop, i, &probs, seed))
        .collect();
    if m == 1 {
        let treatments = vec![0; pop.len()];
        return draw_rows(
            pop,
            (0..pop.len()).collect(),
            &treatments,
            &obs,
            Source::Obs,
        );
    }
    let picks = policy.choices(pop)?;
    let (kept, kept_obs): (Vec<usize>, Vec<Observation>) = obs
        .into_iter()
        .enumerate()
        .filter(|(i, o)| o.treatment == picks[*i])
        .unzip();
    if kept.is_empty() {
        return Err(validation(
            "policy degenerate: no randomized assignment matched the policy",
        ));
    }
    let treatments: Vec<usize> = kept_obs.iter().map(|o| o.treatment).collect();
    draw_rows(pop, kept, &treatments, &kept_obs, Source::Obs)
}

/// Incremental revenue per unit cost of an assignment, on the true table.
pub fn true_roi(pop: &Population, rows: &[usize], treatments: &[usize]) -> f64 {
    let mut gain = 0.0;
    let mut cost = 0.0;
    for (&i, &t) in rows.iter().zip(treatments) {
        gain += pop.outcomes.revenue(i, t) - pop.outcomes.revenue(i, 0);
        cost += pop.outcomes.cost(i, t);
    }
    if cost > 0.0 {
        gain / cost
    } else {
        0.0
    }
}

/// Population fractions of the benchmark partitions; the remainder is unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPlan {
    pub policy: f64,
    pub obs_slice: f64,
    pub rct_train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        // 50% matched at rate 1/4 gives OBS ≈ 12.5%, five times the RCT train split
        Self {
            policy: 0.05,
            obs_slice: 0.50,
            rct_train: 0.025,
            validation: 0.10,
            test: 0.30,
        }
    }
}

impl SplitPlan {
    fn fractions(&self) -> Result<Vec<f64>> {
        let parts = [
            self.policy,
            self.obs_slice,
            self.rct_train,
            self.validation,
            self.test,
        ];
        if parts.iter().any(|&f| !(f > 0.0)) {
            return Err(validation(
                "every benchmark split fraction must be positive",
            ));
        }
        let used: f64 = parts.iter().sum();
        if used > 1.0 + 1e-9 {
            return Err(validation(format!(
                "benchmark split fractions sum to {used} > 1"
            )));
        }
        let mut out = parts.to_vec();
        out.push((1.0 - used).max(0.0));
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub generator: GeneratorSpec,
    pub split: SplitPlan,
    /// Per-capita budget of the simulated targeting policy.
    pub policy_budget: f64,
    pub policy_hidden: Vec<usize>,
    pub policy_fit: FitOptions,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        BenchmarkSpec::standard().generator
    }
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl BenchmarkSpec {
    /// Full-size preset: 200k individuals, 10 features, 4 treatments.
    pub fn standard() -> Self {
        Self {
            generator: GeneratorSpec {
                d: 10,
                m: 4,
                n: 200_000,
                family: ResponseFamily::Piecewise,
                noise_std: 2.0,
                cost_noise_std: 0.1,
                seed: 7,
            },
            split: SplitPlan::default(),
            policy_budget: 0.3,
            policy_hidden: vec![32, 16],
            policy_fit: FitOptions::default(),
        }
    }

    /// The standard preset scaled down to `n` individuals.
    pub fn scaled(n: usize) -> Self {
        let mut spec = Self::standard();
        spec.generator.n = n;
        spec
    }
}

/// Datasets of a benchmark instance plus the truth needed by oracles.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub obs: Dataset,
    pub rct_train: Dataset,
    pub rct_val: Dataset,
    pub rct_test: Dataset,
    pub population: Population,
    /// Population rows of the test split, aligned with `rct_test`.
    pub test_rows: Vec<usize>,
    /// Policy-selection ROI on the truth, and the ROI of uniform assignment on the same slice.
    pub obs_roi: f64,
    pub random_roi: f64,
}

/// Builds the benchmark partitions: a policy model is fit on a small RCT
/// slice, OBS is built by policy matching on a second slice, and the rest is
/// randomized into RCT train, validation and test splits.
pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let g = &spec.generator;
    let pop = generate_population(g)?;
    let parts = split_indices(pop.len(), &spec.split.fractions()?, g.seed ^ 0xb1)?;
    let probs = uniform_probs(g.m);
    let seed = g.seed.wrapping_add(1);

    let policy_pop = pop.subset(&parts[0]);
    let policy_rct = sample_rct(&policy_pop, &probs, seed)?.dataset;
    let net_spec = NetworkSpec::response_model(
        g.d,
        spec.policy_hidden.clone(),
        g.m,
        Activation::Tanh,
        OutputActivation::Softplus,
    );
    let net = Mlp::new(net_spec.clone())?;
    let params = train_baseline_tsm(&policy_rct, &net_spec, &spec.policy_fit, seed)?;

    let obs_pop = pop.subset(&parts[1]);
    let policy = Policy::Model {
        net: &net,
        params: &params,
        per_capita_budget: spec.policy_budget,
    };
    let obs = build_obs_via_policy(&obs_pop, &policy, seed)?;
    let obs_roi = true_roi(
        &obs_pop,
        &obs.rows,
        &obs.dataset
            .samples()
            .iter()
            .map(|s| s.treatment)
            .collect::<Vec<_>>(),
    );
    let random = sample_rct(&obs_pop, &probs, seed)?;
    let random_roi = true_roi(
        &obs_pop,
        &random.rows,
        &random
            .dataset
            .samples()
            .iter()
            .map(|s| s.treatment)
            .collect::<Vec<_>>(),
    );

    let rct = |rows: &[usize]| sample_rct(&pop.subset(rows), &probs, seed).map(|d| d.dataset);
    Ok(Benchmark {
        spec: spec.clone(),
        obs: obs.dataset,
        rct_train: rct(&parts[2])?,
        rct_val: rct(&parts[3])?,
        rct_test: rct(&parts[4])?,
        test_rows: parts[4].clone(),
        population: pop,
        obs_roi,
        random_roi,
    })
}
