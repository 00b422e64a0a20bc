use mfhom_core::dynamics::{estimate_invariant, InitialLaw, InvariantConfig, InvariantMeasureEstimate};
use mfhom_core::model::builtin_linear_model;
use mfhom_core::poisson::{
    check_centering, poisson_residual, GeneratorSteps, Integrand, PoissonConfig, PoissonEvaluator, SolutionSource,
};
use mfhom_core::{Ensemble, ModelSpec};

fn linear() -> ModelSpec {
    builtin_linear_model(2.0, 1.0, 2.0, 2f64.sqrt()).unwrap()
}

fn origin() -> Ensemble {
    Ensemble::point(&[0.0]).unwrap()
}

fn zeta(m: &ModelSpec) -> InvariantMeasureEstimate {
    let nu0 = InitialLaw::Point(vec![3.0]).sample(4000, 1, 2).unwrap();
    let cfg = InvariantConfig { max_t: 12.0, h: 0.01, seed: 5, ..Default::default() };
    let z = estimate_invariant(m, &origin(), &nu0, &cfg).unwrap();
    assert!(z.converged);
    z
}

fn evaluator(m: &ModelSpec, paths: usize) -> PoissonEvaluator {
    let law_particles = if paths >= 10_000 { 1000 } else { 200 };
    let cfg = PoissonConfig { paths, law_particles, seed: 17, ..Default::default() };
    PoissonEvaluator::new(m, &[0.0], &origin(), zeta(m), cfg).unwrap()
}

#[test]
fn phi_matches_closed_form() {
    let m = linear();
    let ev = evaluator(&m, 10_000);
    let f = Integrand::singular_drift(&m);
    let delta0 = origin();
    let r = ev.evaluate_phi(&f, &[1.0], &delta0).unwrap();
    assert!(r.agrees_with(&[0.5], 3.0), "{r:?}");
    assert!(!r.centering_warning);
    let nu = InitialLaw::Gaussian { mean: vec![2.0], cov: vec![1.0] }.sample(200, 3, 4).unwrap();
    let target = nu.mean()[0] / 2.0;
    let r = ev.evaluate_phi(&f, &[0.0], &nu).unwrap();
    assert!(r.agrees_with(&[target], 3.0), "{r:?} vs {target}");

    let zero = Integrand::zero(1);
    let r = ev.evaluate_phi(&zero, &[1.0], &delta0).unwrap();
    assert_eq!(r.estimate.value, vec![0.0]);
    assert_eq!(r.estimate.std_error, vec![0.0]);
}

#[test]
fn derivatives_match_closed_form() {
    let m = linear();
    let ev = evaluator(&m, 1000);
    let f = Integrand::singular_drift(&m);
    let nu = Ensemble::from_scalars(&[-0.5, 1.5]).unwrap();
    for y in [-1.0, 0.0, 2.0] {
        let d = ev.phi_derivative_y(&f, &[y], &nu, 0).unwrap();
        assert!(d.agrees_with(&[0.5], 3.0), "{d:?}");
        let d = ev.phi_derivative_x(&f, &[y], &nu, 0).unwrap();
        assert!(d.agrees_with(&[0.0], 3.0), "{d:?}");
    }
    for i in 0..2 {
        let d = ev.phi_lions_derivative_nu(&f, &[0.3], &nu, i).unwrap();
        assert!(d.agrees_with(&[0.5], 3.0), "{d:?}");
    }
    let zero = Integrand::zero(1);
    let d = ev.phi_lions_derivative_nu(&zero, &[0.3], &nu, 0).unwrap();
    assert_eq!(d.estimate.value, vec![0.0]);
}

#[test]
fn halving_the_y_step_is_second_order() {
    let m = linear();
    let f = Integrand::of_y(|y: &[f64]| y[0].powi(3) - 3.0 * y[0]);
    let z = zeta(&m);
    let run = |h: f64| {
        let cfg = PoissonConfig { paths: 1000, law_particles: 200, seed: 3, fd_y: h, ..Default::default() };
        let ev = PoissonEvaluator::new(&m, &[0.0], &origin(), z.clone(), cfg).unwrap();
        ev.phi_derivative_y(&f, &[0.7], &origin(), 0).unwrap()
    };
    let (a, b, c) = (run(0.2), run(0.1), run(0.05));
    let d1 = (a.value() - b.value()).abs();
    let d2 = (b.value() - c.value()).abs();
    // Successive differences shrink by ≈4 under common random numbers.
    assert!(d2 < d1 / 2.5, "{d1} {d2}");
}

#[test]
fn centering_checks() {
    let m = linear();
    let z = zeta(&m);
    let mu = origin();
    let h = Integrand::singular_drift(&m);
    let c = check_centering(&m, &h, &[0.0], &mu, &z, 1).unwrap();
    assert!(c.is_centered(3.0), "{c:?}");
    let one = Integrand::of_y(|_: &[f64]| 1.0);
    let c = check_centering(&m, &one, &[0.0], &mu, &z, 1).unwrap();
    assert_eq!(c.value, vec![1.0]);
    assert!(c.require(3.0).is_err());
    let sq = Integrand::of_y(|y: &[f64]| y[0] * y[0] - 1.0);
    let c = check_centering(&m, &sq, &[0.0], &mu, &z, 1).unwrap();
    // The ensemble carries the Euler–Maruyama variance bias s²h/(2(2 − κh)) ≈ 0.01.
    assert!(c.value[0].abs() < 3.0 * c.std_error[0] + 0.011, "{c:?}");
}

#[test]
fn non_converged_zeta_is_refused() {
    let m = linear();
    let nu0 = InitialLaw::Point(vec![3.0]).sample(300, 1, 2).unwrap();
    let cfg = InvariantConfig { max_t: 0.05, h: 0.01, stationarity_tol: 1e-6, ..Default::default() };
    let z = estimate_invariant(&m, &origin(), &nu0, &cfg).unwrap();
    assert!(PoissonEvaluator::new(&m, &[0.0], &origin(), z, PoissonConfig::default()).is_err());
}

#[test]
fn truncation_soundness_and_solution_centering() {
    let m = linear();
    let ev = evaluator(&m, 1000);
    let f = Integrand::singular_drift(&m);
    let nu = Ensemble::from_scalars(&[1.0]).unwrap();
    let a = ev.evaluate_phi(&f, &[1.0], &nu).unwrap();
    let long = ev.with_horizon(1.5 * ev.horizon()).unwrap();
    let b = long.evaluate_phi(&f, &[1.0], &nu).unwrap();
    let se = (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
    assert!((a.value() - b.value()).abs() < ev.config().truncation_tol + 3.0 * se);

    let c = ev.solution_centering(&f).unwrap();
    assert!(c.agrees_with(&[0.0], 3.0, 0.0), "{c:?}");
}

#[test]
fn evaluation_is_linear_in_the_integrand() {
    let m = linear();
    let ev = evaluator(&m, 1000);
    let f = Integrand::of_y(|y: &[f64]| y[0]);
    let g = Integrand::of_y(|y: &[f64]| y[0].sin());
    let fg = Integrand::of_y(|y: &[f64]| 2.0 * y[0] - 0.5 * y[0].sin());
    let nu = Ensemble::from_scalars(&[0.5, -0.25]).unwrap();
    let a = ev.evaluate_phi(&f, &[0.4], &nu).unwrap().value();
    let b = ev.evaluate_phi(&g, &[0.4], &nu).unwrap().value();
    let c = ev.evaluate_phi(&fg, &[0.4], &nu).unwrap().value();
    assert!((c - (2.0 * a - 0.5 * b)).abs() <= 1e-12 * (1.0 + c.abs()), "{c} {a} {b}");
}

#[test]
fn residuals() {
    let m = linear();
    let ev = evaluator(&m, 1000);
    let f = Integrand::singular_drift(&m);
    let p = *m.linear_params().unwrap();
    let phi = move |y: &[f64], nu: &Ensemble| p.phi(y[0], nu.mean()[0]);
    let probes: Vec<(Vec<f64>, Ensemble)> = (0..10)
        .map(|k| {
            let y = -2.0 + 0.45 * k as f64;
            let nu = Ensemble::from_scalars(&[0.3 * k as f64 - 1.0, 0.5, -0.2 * k as f64]).unwrap();
            (vec![y], nu)
        })
        .collect();
    let steps = GeneratorSteps::default();
    let r = poisson_residual(&ev, &f, 0, &probes, &SolutionSource::Analytic(&phi), &steps).unwrap();
    assert!(r.max_abs <= 1e-3, "{}", r.max_abs);
    assert_eq!(r.records.len(), 10);

    let zero = Integrand::zero(1);
    let nothing = |_: &[f64], _: &Ensemble| 0.0;
    let r = poisson_residual(&ev, &zero, 0, &probes, &SolutionSource::Analytic(&nothing), &steps).unwrap();
    assert_eq!(r.max_abs, 0.0);

    let r = poisson_residual(&ev, &f, 0, &probes[..1], &SolutionSource::MonteCarlo, &steps).unwrap();
    for rec in &r.records {
        assert!(rec.residual.abs() <= 5.0 * (rec.error_budget + 1e-3), "{rec:?}");
    }
}
