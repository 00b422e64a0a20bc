use mfhom_core::harness::config::{ExperimentConfig, Reference};
use mfhom_core::harness::studies::{
    run_convergence, run_ergodicity_test, run_fluctuation_test, run_poisson_validation, Status,
};
use mfhom_core::poisson::Integrand;
use mfhom_core::Error;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        eps_list: vec![0.3, 0.2],
        particles: 200,
        reps: 2,
        t_end: 0.2,
        zeta_particles: 2000,
        zeta_t: 10.0,
        poisson_paths: 1000,
        law_particles: 200,
        poisson_h: 1e-2,
        ..Default::default()
    }
}

#[test]
fn self_comparison_has_zero_error() {
    let cfg = ExperimentConfig { reference: Reference::SelfCompare, ..small() };
    let r = run_convergence(&cfg).unwrap().report;
    assert!(r.rows.iter().all(|w| w.error == 0.0));
    assert!(r.fit.is_none());
    assert_eq!(r.status, Status::Inconclusive);
}

#[test]
fn single_eps_is_flagged_insufficient() {
    let cfg = ExperimentConfig { eps_list: vec![0.2], ..small() };
    let r = run_convergence(&cfg).unwrap().report;
    assert_eq!(r.rows.len(), 1);
    assert!(r.fit.is_none());
    assert!(r.note.unwrap().contains("insufficient"));
}

#[test]
fn convergence_is_reproducible() {
    let cfg = small();
    let a = run_convergence(&cfg).unwrap().report;
    let b = run_convergence(&cfg).unwrap().report;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn zero_integrand_gives_zero_estimates() {
    let r = run_fluctuation_test(&small(), &Integrand::zero(1)).unwrap();
    assert!(r.rows.iter().all(|w| w.estimate == 0.0));
    assert_eq!(r.status, Status::Inconclusive);
}

#[test]
fn uncentered_integrand_is_refused() {
    match run_fluctuation_test(&small(), &Integrand::of_y(|_| 1.0)) {
        Err(Error::Centering { value, .. }) => assert_eq!(value, 1.0),
        other => panic!("{:?}", other.map(|r| r.status)),
    }
}

#[test]
fn unforced_fast_mean_decays_at_second_order() {
    // With c ≡ 0 the fast mean relaxes from y0 within O(ε²) time.
    let cfg = ExperimentConfig {
        eps_list: vec![0.3, 0.2, 0.1],
        particles: 1000,
        reps: 4,
        t_end: 0.5,
        x0: 0.0,
        y0: 4.0,
        ..Default::default()
    };
    let r = run_fluctuation_test(&cfg, &Integrand::of_y(|y| y[0])).unwrap();
    let slope = r.fit.unwrap().slope;
    assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
}

#[test]
fn stationary_start_converges_immediately() {
    let cfg = ExperimentConfig { init_means: vec![0.0], init_vars: vec![1.0], decoupled_paths: 500, ..small() };
    let r = run_ergodicity_test(&cfg).unwrap();
    assert_eq!(r.status, Status::Pass, "{:?}", r.note);
    assert!(r.runs[0].converged);
    assert!(r.runs[0].burn_in <= 1.0, "burn-in {}", r.runs[0].burn_in);
}

#[test]
fn distinct_starts_reach_the_same_measure() {
    let cfg = ExperimentConfig { decoupled_paths: 500, ..small() };
    let r = run_ergodicity_test(&cfg).unwrap();
    assert_eq!(r.status, Status::Pass, "{:?}", r.note);
    assert_eq!(r.pairs.len(), 1);
    assert!(r.decoupled.iter().all(|d| d.rate.unwrap() > 0.5));
}

#[test]
fn short_horizon_fails_truncation() {
    let cfg = ExperimentConfig { horizon: Some(0.1), x0: 0.0, ..small() };
    let r = run_poisson_validation(&cfg).unwrap();
    let t = r.checks.iter().find(|c| c.name == "truncation").unwrap();
    assert_eq!(t.status, Status::Fail);
    assert_eq!(r.status, Status::Fail);
}

#[test]
fn tiny_batch_is_inconclusive() {
    let cfg = ExperimentConfig { poisson_paths: 2, law_groups: 2, law_particles: 50, x0: 0.0, ..small() };
    let r = run_poisson_validation(&cfg).unwrap();
    assert!(r.checks.iter().any(|c| c.status == Status::Inconclusive));
    assert_ne!(r.status, Status::Pass);
}

#[test]
fn refined_step_moves_errors_within_noise() {
    // Halving h at fixed ε on the default convergence design.
    let base = ExperimentConfig::default();
    let fine = ExperimentConfig { h_divisor: 2.0 * base.h_divisor, ..base.clone() };
    let a = run_convergence(&base).unwrap().report;
    let b = run_convergence(&fine).unwrap().report;
    for (x, y) in a.rows.iter().zip(&b.rows) {
        let se = (x.std_error.powi(2) + y.std_error.powi(2)).sqrt();
        assert!((x.error - y.error).abs() < 3.0 * se, "eps {}: {} vs {} (se {se})", x.eps, x.error, y.error);
    }
}
