#![allow(dead_code)]

use bidfcl_core::data::{Dataset, PredictionMatrix};
use bidfcl_core::synth::{
    generate_population, sample_rct, uniform_probs, GeneratorSpec, Population, ResponseFamily,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn spec(n: usize, m: usize, family: ResponseFamily, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        d: 4,
        m,
        n,
        family,
        noise_std: 0.5,
        cost_noise_std: 0.1,
        seed,
    }
}

pub fn rct(n: usize, m: usize, seed: u64) -> (Population, Dataset) {
    let pop = generate_population(&spec(n, m, ResponseFamily::Piecewise, seed)).unwrap();
    let ds = sample_rct(&pop, &uniform_probs(m), seed + 1)
        .unwrap()
        .dataset;
    (pop, ds)
}

pub fn random_preds(n: usize, m: usize, rng: &mut ChaCha8Rng) -> PredictionMatrix {
    let r = (0..n * m).map(|_| rng.random_range(0.0..3.0)).collect();
    let c = (0..n * m).map(|_| rng.random_range(0.05..1.0)).collect();
    PredictionMatrix::new(n, m, r, c).unwrap()
}

/// Random predictions whose costs rise with the treatment index, as the
/// generator's do, so every per-capita budget is reachable.
pub fn monotone_cost_preds(n: usize, m: usize, rng: &mut ChaCha8Rng) -> PredictionMatrix {
    let p = random_preds(n, m, rng);
    let mut c = p.costs().to_vec();
    for row in c.chunks_mut(m) {
        row.sort_by(f64::total_cmp);
    }
    PredictionMatrix::new(n, m, p.revenues().to_vec(), c).unwrap()
}

pub fn random_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error; entries below `1e-4` in magnitude are compared absolutely,
/// since central differences cannot resolve them much better than `1e-10`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of a flat vector.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of a vector function along direction `v`.
pub fn fd_directional(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let up: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let down: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    f(&up)
        .iter()
        .zip(f(&down))
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

/// Flattens a prediction matrix as revenues followed by costs.
pub fn flat(p: &PredictionMatrix) -> Vec<f64> {
    let mut v = p.revenues().to_vec();
    v.extend_from_slice(p.costs());
    v
}

pub fn unflat(v: &[f64], n: usize, m: usize) -> PredictionMatrix {
    PredictionMatrix::new(n, m, v[..n * m].to_vec(), v[n * m..].to_vec()).unwrap()
}
