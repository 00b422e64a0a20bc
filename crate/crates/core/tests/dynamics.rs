use mfhom_core::dynamics::{
    coupling_contraction, estimate_invariant, simulate_decoupled, simulate_frozen, simulate_slow_fast, tangent_decay_rate,
    tangent_flow_y, InitialLaw, IntegratorConfig, InvariantConfig,
};
use mfhom_core::measure::{w2_noise_floor, wasserstein2, W2Method};
use mfhom_core::model::builtin_linear_model;
use mfhom_core::{Ensemble, ModelSpec};

fn linear() -> ModelSpec {
    builtin_linear_model(2.0, 1.0, 2.0, 2f64.sqrt()).unwrap()
}

fn origin() -> Ensemble {
    Ensemble::point(&[0.0]).unwrap()
}

fn gaussian(n: usize, mean: f64, var: f64, seed: u64) -> Ensemble {
    InitialLaw::Gaussian { mean: vec![mean], cov: vec![var] }.sample(n, seed, 77).unwrap()
}

fn moments(e: &Ensemble) -> (f64, f64, f64, f64) {
    let n = e.count() as f64;
    let m = e.mean()[0];
    let v = e.variance()[0];
    let m4 = e.particles().iter().map(|&x| (x - m).powi(4)).sum::<f64>() / n;
    (m, (v / n).sqrt(), v, ((m4 - v * v) / n).sqrt())
}

#[test]
fn frozen_linear_model_reaches_standard_normal() {
    let m = linear();
    let nu0 = InitialLaw::Point(vec![3.0]).sample(10_000, 1, 2).unwrap();
    let path = simulate_frozen(&m, &origin(), &nu0, 20.0, &IntegratorConfig::new(0.005, 11)).unwrap();
    let (mean, mean_se, var, var_se) = moments(path.last());
    assert!(mean.abs() < 3.0 * mean_se, "mean {mean} se {mean_se}");
    // Euler–Maruyama stationary variance is s²/(κ(2 − κh)); the bias is far below the SE.
    assert!((var - 1.0).abs() < 3.0 * var_se, "var {var} se {var_se}");
}

#[test]
fn stationary_start_stays_stationary() {
    let m = linear();
    let nu0 = gaussian(4000, 0.0, 1.0, 3);
    let path = simulate_frozen(&m, &origin(), &nu0, 5.0, &IntegratorConfig::new(0.005, 4)).unwrap();
    let d = wasserstein2(&nu0, path.last(), W2Method::Exact1d).unwrap();
    let floor = w2_noise_floor(&nu0) * 2f64.sqrt();
    assert!(d < 3.0 * floor, "W2 {d} floor {floor}");
}

#[test]
fn decoupled_from_frozen_law_matches_it() {
    let m = linear();
    let nu0 = gaussian(4000, 2.0, 0.5, 5);
    let cfg = IntegratorConfig::new(0.01, 6).with_output_every(50);
    let path = simulate_frozen(&m, &origin(), &nu0, 1.0, &cfg).unwrap();
    // Tagged particles started from the law's own particles, one path each.
    let mut finals = Vec::new();
    for (i, y0) in nu0.iter().enumerate().take(800) {
        let c = IntegratorConfig { seed: 1000 + i as u64, ..cfg.clone() };
        let b = simulate_decoupled(&m, &origin(), y0, &path, 1.0, 1, &c).unwrap();
        finals.push(b.last().particle(0)[0]);
    }
    let tagged = Ensemble::from_scalars(&finals).unwrap();
    let reference = path.last().head(800);
    let d = wasserstein2(&tagged, &reference, W2Method::Exact1d).unwrap();
    let floor = w2_noise_floor(&reference) * 2f64.sqrt();
    assert!(d < 3.0 * floor, "W2 {d} floor {floor}");
}

#[test]
fn tagged_mean_decays_like_linear_ode() {
    let m = linear();
    let nu0 = gaussian(4000, 0.0, 1.0, 8);
    let cfg = IntegratorConfig::new(0.001, 9).with_output_every(250);
    let path = simulate_frozen(&m, &origin(), &nu0, 1.0, &cfg).unwrap();
    let bundle = simulate_decoupled(&m, &origin(), &[1.0], &path, 1.0, 20_000, &cfg).unwrap();
    for (t, e) in bundle.times.iter().zip(&bundle.states) {
        let (mean, se, _, _) = moments(e);
        let law_mean = path.at_step((t / 0.001).round() as usize).mean()[0];
        // dm/dt = −κm + α·(frozen mean); the frozen mean is O(N^{-1/2}).
        let expect = (-2.0 * t).exp() + law_mean * (1.0 - (-2.0 * t).exp()) / 2.0;
        assert!((mean - expect).abs() < 3.0 * se + 2e-3, "t={t}: {mean} vs {expect} (se {se})");
    }
}

#[test]
fn tangent_flow_decay_rate() {
    let m = linear();
    let cfg = IntegratorConfig::new(0.01, 10).with_output_every(10);
    let path = simulate_frozen(&m, &origin(), &gaussian(1000, 0.0, 1.0, 1), 3.0, &cfg).unwrap();
    let traj = tangent_flow_y(&m, &origin(), &[0.5], &path, 3.0, 200, &cfg).unwrap();
    let at1 = traj.iter().find(|e| (e.t - 1.0).abs() < 1e-9).unwrap();
    for &j in &at1.jacobians {
        assert!((j - 0.135_335_283_236_612_7).abs() < 1e-6);
    }
    let rate = -tangent_decay_rate(&traj).unwrap().slope;
    let gap = m.dissipativity.gap();
    assert!(rate >= 0.5 * gap, "rate {rate}");
}

#[test]
fn invariant_estimate_rate_and_flags() {
    let m = linear();
    let nu0 = InitialLaw::Point(vec![5.0]).sample(10_000, 1, 2).unwrap();
    let cfg = InvariantConfig { max_t: 20.0, h: 0.005, seed: 3, ..Default::default() };
    let est = estimate_invariant(&m, &origin(), &nu0, &cfg).unwrap();
    assert!(est.converged);
    let rate = est.diagnostics.fitted_rate;
    assert!(rate > 0.5 && rate < 2.0, "rate {rate}");
    assert!(est.diagnostics.is_monotone_within(3.0));

    let stationary = gaussian(4000, 0.0, 1.0, 12);
    let est = estimate_invariant(&m, &origin(), &stationary, &cfg).unwrap();
    assert!(est.converged);
    assert_eq!(est.diagnostics.window_checks.len(), 1);

    let cfg = InvariantConfig { max_t: 0.01, stationarity_tol: 1e-6, h: 0.001, ..Default::default() };
    let est = estimate_invariant(&m, &origin(), &nu0.head(500), &cfg).unwrap();
    assert!(!est.converged);
    assert!(est.require_converged().is_err());
}

#[test]
fn synchronous_coupling_contracts_at_linear_rate() {
    let m = linear();
    let r = coupling_contraction(&m, &origin(), &gaussian(500, 0.0, 1.0, 2), 1.0, 5.0, 0.01, 4, 500).unwrap();
    assert!(r.rate > 0.5 && r.rate < 2.0, "rate {}", r.rate);
    assert!(r.distances.last().unwrap() < &r.distances[0]);
}

#[test]
fn doubling_particles_keeps_stationary_moments() {
    let m = linear();
    let run = |n: usize, seed: u64| {
        let path = simulate_frozen(&m, &origin(), &gaussian(n, 1.0, 0.1, seed), 8.0, &IntegratorConfig::new(0.01, seed)).unwrap();
        moments(path.last())
    };
    let (m1, s1, v1, vs1) = run(3000, 21);
    let (m2, s2, v2, vs2) = run(6000, 22);
    assert!((m1 - m2).abs() < 3.0 * (s1 * s1 + s2 * s2).sqrt());
    assert!((v1 - v2).abs() < 3.0 * (vs1 * vs1 + vs2 * vs2).sqrt());
}

#[test]
fn runs_are_independent_of_thread_count() {
    let m = linear();
    let cfg = IntegratorConfig::new(1e-3, 42).with_output_every(10);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let slow = InitialLaw::Point(vec![1.0]);
            let fast = InitialLaw::Gaussian { mean: vec![0.0], cov: vec![1.0] };
            simulate_slow_fast::<f64>(&m, 0.1, 500, 0.1, &cfg, &slow, &fast).unwrap()
        })
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.summaries, b.summaries);
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn single_precision_frozen_run_tracks_double() {
    let m32: mfhom_core::ModelSpec32 = builtin_linear_model(2.0, 1.0, 2.0, 2f64.sqrt()).unwrap();
    let origin32 = mfhom_core::Ensemble32::point(&[0.0]).unwrap();
    let nu32: mfhom_core::Ensemble32 = InitialLaw::Point(vec![3.0]).sample(4000, 1, 2).unwrap();
    let cfg = IntegratorConfig::new(0.01, 7);
    let p32 = simulate_frozen(&m32, &origin32, &nu32, 10.0, &cfg).unwrap();
    let p64 = simulate_frozen(&linear(), &origin(), &InitialLaw::Point(vec![3.0]).sample(4000, 1, 2).unwrap(), 10.0, &cfg).unwrap();
    let v32 = p32.last().variance()[0] as f64;
    let v64 = p64.last().variance()[0];
    assert!((v32 - v64).abs() < 1e-3, "{v32} vs {v64}");
    assert!((v32 - 1.0).abs() < 0.15);
}
