mod common;

use bidfcl_core::bilevel::{
    train_baseline_tsm_selected, train_bidfcl, train_dfcl, BilevelConfig, BilevelProblem,
    DfclConfig, DiffMode, FitOptions, Surrogate,
};
use bidfcl_core::data::Dataset;
use bidfcl_core::mckp::{eom_evaluate, BudgetSpec};
use bidfcl_core::net::{Activation, Mlp, NetworkSpec, OutputActivation, ParamVector};
use bidfcl_core::synth::{
    build_obs_via_policy, generate_population, sample_rct, uniform_probs, Policy, ResponseFamily,
};

struct Setup {
    net: Mlp,
    bridge: Mlp,
    obs: Dataset,
    rct: Dataset,
    val: Dataset,
    teacher: ParamVector,
}

fn setup() -> Setup {
    let pop = generate_population(&common::spec(3000, 3, ResponseFamily::Piecewise, 31)).unwrap();
    let idx: Vec<usize> = (0..pop.len()).collect();
    let obs = build_obs_via_policy(
        &pop.subset(&idx[..1500]),
        &Policy::Oracle {
            per_capita_budget: 0.5,
        },
        1,
    )
    .unwrap()
    .dataset;
    let rct = sample_rct(&pop.subset(&idx[1500..1900]), &uniform_probs(3), 2)
        .unwrap()
        .dataset;
    let val = sample_rct(&pop.subset(&idx[1900..]), &uniform_probs(3), 3)
        .unwrap()
        .dataset;
    let spec =
        NetworkSpec::response_model(4, vec![8], 3, Activation::Tanh, OutputActivation::Softplus);
    let fit = FitOptions {
        epochs: 10,
        lr: 3e-3,
        batch_size: 64,
    };
    let teacher = train_baseline_tsm_selected(&rct, &val, 0.5, &spec, &fit, 0).unwrap();
    Setup {
        net: Mlp::new(spec).unwrap(),
        bridge: Mlp::new(NetworkSpec::bridge(4, 3, vec![6], Activation::Tanh)).unwrap(),
        obs,
        rct,
        val,
        teacher,
    }
}

fn config(mode: DiffMode) -> BilevelConfig {
    BilevelConfig {
        k: 3,
        n_cg: 10,
        warm_start_epochs: 1,
        epochs: 3,
        batch_size: 128,
        lr_phi: 1e-2,
        diff_mode: mode,
        ..BilevelConfig::default()
    }
}

#[test]
fn bilevel_schedule_and_determinism() {
    let s = setup();
    let problem = BilevelProblem {
        target: &s.net,
        bridge: &s.bridge,
        obs: &s.obs,
        rct: &s.rct,
        val: Some(&s.val),
        per_capita_budget: 0.5,
        psi: &s.teacher,
        theta0: None,
    };
    for mode in [DiffMode::Implicit, DiffMode::Explicit] {
        let cfg = config(mode);
        let run = train_bidfcl(&problem, &cfg, 4).unwrap();
        let per_epoch = s.obs.len().div_ceil(cfg.batch_size);
        assert_eq!(run.state.batch, cfg.epochs * per_epoch);
        assert!(run
            .log
            .upper_batches
            .iter()
            .all(|&b| b % cfg.k == 0 && b >= per_epoch));
        assert_eq!(
            run.log.upper_batches.len(),
            (per_epoch..cfg.epochs * per_epoch)
                .filter(|b| b % cfg.k == 0)
                .count()
        );
        assert!(run.log.aborted.is_none());
        assert_eq!(run.state.psi, s.teacher);

        let again = train_bidfcl(&problem, &cfg, 4).unwrap();
        assert_eq!(again.best_theta, run.best_theta);
        assert_eq!(again.state.phi, run.state.phi);

        let budget = BudgetSpec::per_capita(0.5, s.val.len());
        let preds = s
            .net
            .predict(run.best_theta.as_slice(), &s.val.feature_batch())
            .unwrap();
        let picked = eom_evaluate(&preds, &s.val, &budget).unwrap();
        assert!(picked.within_budget);
        assert_eq!(Some(picked.revenue), run.log.best_val_eom);
    }
}

#[test]
fn no_upper_steps_without_bridge_learning_rate() {
    let s = setup();
    let problem = BilevelProblem {
        target: &s.net,
        bridge: &s.bridge,
        obs: &s.obs,
        rct: &s.rct,
        val: None,
        per_capita_budget: 0.5,
        psi: &s.teacher,
        theta0: None,
    };
    let cfg = BilevelConfig {
        lr_phi: 0.0,
        ..config(DiffMode::Implicit)
    };
    let run = train_bidfcl(&problem, &cfg, 0).unwrap();
    assert_eq!(run.state.upper_steps, 0);
    assert_eq!(run.state.phi, s.bridge.init(0xb41d9e));
    assert_eq!(run.best_theta, run.state.theta);
}

#[test]
fn decision_focused_training_is_deterministic_for_every_surrogate() {
    let s = setup();
    for surrogate in [
        Surrogate::Ppl,
        Surrogate::Pifd,
        Surrogate::Dpl,
        Surrogate::Difd,
    ] {
        let cfg = DfclConfig {
            surrogate,
            steps: 10,
            ..DfclConfig::default()
        };
        let a = train_dfcl(&s.net, &s.rct, Some(&s.val), 0.5, &s.teacher, &cfg).unwrap();
        let b = train_dfcl(&s.net, &s.rct, Some(&s.val), 0.5, &s.teacher, &cfg).unwrap();
        assert_eq!(a, b, "{surrogate:?}");
        assert!(a.is_finite());
    }
}
