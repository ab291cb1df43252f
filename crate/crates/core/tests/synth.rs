mod common;

use bidfcl_core::data::Dataset;
use bidfcl_core::net::{Activation, Mlp, NetworkSpec, OutputActivation};
use bidfcl_core::synth::{
    build_benchmark, build_obs_via_policy, generate_population, sample_rct, true_roi,
    uniform_probs, BenchmarkSpec, Policy, ResponseFamily,
};

/// χ² statistic of the contingency table between feature-0 quartile and treatment.
fn quartile_chi_square(ds: &Dataset) -> f64 {
    let mut x0: Vec<f64> = ds.samples().iter().map(|s| s.features[0]).collect();
    x0.sort_by(f64::total_cmp);
    let cuts = [x0[x0.len() / 4], x0[x0.len() / 2], x0[3 * x0.len() / 4]];
    let m = ds.num_treatments();
    let mut table = vec![vec![0.0; m]; 4];
    for s in ds.samples() {
        let q = cuts.iter().filter(|&&c| s.features[0] >= c).count();
        table[q][s.treatment] += 1.0;
    }
    let n = ds.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..m).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi = 0.0;
    for q in 0..4 {
        for j in 0..m {
            let e = rows[q] * cols[j] / n;
            if e > 0.0 {
                chi += (table[q][j] - e).powi(2) / e;
            }
        }
    }
    chi
}

// upper 0.1% point of χ² with (4 − 1)(3 − 1) = 6 degrees of freedom
const CHI2_6_999: f64 = 22.458;

#[test]
fn treatment_frequencies_are_binomial() {
    let pop = generate_population(&common::spec(20_000, 3, ResponseFamily::Linear, 1)).unwrap();
    let probs = [0.5, 0.3, 0.2];
    let ds = sample_rct(&pop, &probs, 2).unwrap().dataset;
    let n = ds.len() as f64;
    for (j, &p) in probs.iter().enumerate() {
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!(
            (ds.group_counts()[j] as f64 - n * p).abs() < 4.0 * sd,
            "arm {j}"
        );
    }
}

#[test]
fn rct_assignment_ignores_features() {
    let pop = generate_population(&common::spec(20_000, 3, ResponseFamily::Piecewise, 3)).unwrap();
    let ds = sample_rct(&pop, &uniform_probs(3), 4).unwrap().dataset;
    assert!(quartile_chi_square(&ds) < CHI2_6_999);
    for k in 0..4 {
        for j in 0..3 {
            let xs: Vec<f64> = ds
                .samples()
                .iter()
                .filter(|s| s.treatment == j)
                .map(|s| s.features[k])
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!(
                mean.abs() < 4.0 / (xs.len() as f64).sqrt(),
                "feature {k} arm {j}: {mean}"
            );
        }
    }
}

#[test]
fn observed_outcomes_are_truth_plus_recorded_noise() {
    let pop = generate_population(&common::spec(500, 3, ResponseFamily::Logistic, 5)).unwrap();
    let draw = sample_rct(&pop, &uniform_probs(3), 6).unwrap();
    for (k, s) in draw.dataset.samples().iter().enumerate() {
        let row = draw.rows[k];
        assert_eq!(s.features, pop.features[row]);
        assert_eq!(
            s.revenue,
            pop.outcomes.revenue(row, s.treatment) + draw.revenue_noise[k]
        );
        assert_eq!(
            s.cost,
            pop.outcomes.cost(row, s.treatment) * draw.cost_factor[k]
        );
        assert!(s.revenue >= 0.0);
    }
    let mut quiet = common::spec(500, 3, ResponseFamily::Logistic, 5);
    quiet.noise_std = 0.0;
    quiet.cost_noise_std = 0.0;
    let pop = generate_population(&quiet).unwrap();
    let draw = sample_rct(&pop, &uniform_probs(3), 6).unwrap();
    for (k, s) in draw.dataset.samples().iter().enumerate() {
        assert_eq!(s.revenue, pop.outcomes.revenue(draw.rows[k], s.treatment));
        assert_eq!(s.cost, pop.outcomes.cost(draw.rows[k], s.treatment));
    }
}

#[test]
fn oracle_policy_obs_is_confounded_and_beats_random() {
    let pop = generate_population(&common::spec(20_000, 3, ResponseFamily::Piecewise, 7)).unwrap();
    let draw = build_obs_via_policy(
        &pop,
        &Policy::Oracle {
            per_capita_budget: 0.3,
        },
        8,
    )
    .unwrap();
    assert!(quartile_chi_square(&draw.dataset) > CHI2_6_999);
    let treatments: Vec<usize> = draw.dataset.samples().iter().map(|s| s.treatment).collect();
    let obs_roi = true_roi(&pop, &draw.rows, &treatments);
    let rct = sample_rct(&pop, &uniform_probs(3), 8).unwrap();
    let random: Vec<usize> = rct.dataset.samples().iter().map(|s| s.treatment).collect();
    let random_roi = true_roi(&pop, &rct.rows, &random);
    assert!(obs_roi > random_roi, "{obs_roi} vs {random_roi}");
}

#[test]
fn matched_fraction_is_one_over_m_for_an_untrained_policy() {
    let m = 4;
    let pop = generate_population(&common::spec(20_000, m, ResponseFamily::Linear, 9)).unwrap();
    let net = Mlp::new(NetworkSpec::response_model(
        4,
        vec![8],
        m,
        Activation::Tanh,
        OutputActivation::Softplus,
    ))
    .unwrap();
    let params = net.init(3);
    let policy = Policy::Model {
        net: &net,
        params: &params,
        per_capita_budget: 0.3,
    };
    let draw = build_obs_via_policy(&pop, &policy, 10).unwrap();
    let n = pop.len() as f64;
    let p = 1.0 / m as f64;
    assert!((draw.dataset.len() as f64 - n * p).abs() < 4.0 * (n * p * (1.0 - p)).sqrt());
}

#[test]
fn benchmark_split_sizes_and_policy_lift() {
    let b = build_benchmark(&BenchmarkSpec::scaled(20_000)).unwrap();
    assert_eq!(b.rct_train.len(), 500);
    assert_eq!(b.rct_val.len(), 2000);
    assert_eq!(b.rct_test.len(), 6000);
    assert_eq!(b.test_rows.len(), b.rct_test.len());
    assert!(
        b.obs_roi > b.random_roi,
        "{} vs {}",
        b.obs_roi,
        b.random_roi
    );
}
