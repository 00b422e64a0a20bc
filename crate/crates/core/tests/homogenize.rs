use mfhom_core::dynamics::{InitialLaw, InvariantMeasureEstimate};
use mfhom_core::homogenize::{
    effective_diffusion_sqrt, langevin_constants, write_coefficient_csv, HomogenizeConfig, HomogenizedModel, LimitConfig,
};
use mfhom_core::linalg;
use mfhom_core::model::{
    builtin_langevin_linear, builtin_langevin_model, builtin_linear_model, builtin_linear_model_forced,
    DissipativityParams, FnCoefficients, ModelStructure,
};
use mfhom_core::poisson::PoissonConfig;
use mfhom_core::{Ensemble, ModelSpec};

fn linear() -> ModelSpec {
    builtin_linear_model(2.0, 1.0, 2.0, 2f64.sqrt()).unwrap()
}

fn origin() -> Ensemble {
    Ensemble::point(&[0.0]).unwrap()
}

fn small(paths: usize, law_particles: usize, lions_nodes: usize) -> HomogenizeConfig {
    HomogenizeConfig {
        zeta_particles: 4000,
        zeta_init: InitialLaw::Point(vec![2.0]),
        poisson: PoissonConfig { paths, law_particles, ..Default::default() },
        lions_nodes,
        seed: 9,
        ..Default::default()
    }
}

fn standard_normal(n: usize, seed: u64) -> InvariantMeasureEstimate {
    let e = InitialLaw::Gaussian { mean: vec![0.0], cov: vec![1.0] }.sample(n, seed, 3).unwrap();
    InvariantMeasureEstimate::assume_stationary(e, 1.0, 1.0, "")
}

/// Fast OU dY = −2Y + √2 dW with ζ = N(0, 1/2) and a slow drift given by `f`.
fn with_slow_drift(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ModelSpec {
    let c = FnCoefficients::new(1, 1)
        .slow_drift(move |_: &[f64], _: &Ensemble, y: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = f(y[0]))
        .slow_diffusion(|_: &[f64], _: &Ensemble, y: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = 1.0 + y[0])
        .fast_drift(|_: &Ensemble, y: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = -2.0 * y[0])
        .fast_diffusion(|_: &Ensemble, _: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = 2f64.sqrt());
    let s = ModelStructure { fast_reads_slow_law: false, singular_reads_slow: false, forcing_vanishes: true, ..Default::default() };
    ModelSpec::new(1, 1, c, DissipativityParams::new(0.0, 2.0, true).unwrap(), s).unwrap()
}

#[test]
fn linear_model_coefficients() {
    let hm = HomogenizedModel::new(&linear(), small(2000, 200, 4)).unwrap();
    let mu = InitialLaw::Gaussian { mean: vec![0.3], cov: vec![1.0] }.sample(500, 1, 1).unwrap();
    for x in [-1.5, 0.0, 0.7] {
        let f = hm.averaged_drift(&[x], &mu).unwrap();
        assert_eq!(f.value, vec![-x]);
        assert_eq!(f.std_error, vec![0.0]);
    }
    let d = hm.averaged_diffusion_sq(&[0.7], &mu).unwrap();
    assert!(d.matrix.agrees_with(&[3.0], 3.0, 0.0), "{d:?}");
    assert!((d.gg.value[0] - 2.0).abs() < 1e-12);
    assert_eq!(d.asymmetry, 0.0);
    let c = hm.correction_drifts(&[0.7], &mu).unwrap();
    assert_eq!(c.c_dy_phi.value, vec![0.0]);
    assert!(c.c_nu.is_zero());
    assert_eq!(c.h_dx_phi.value, vec![0.0]);
}

#[test]
fn constant_forcing_corrections() {
    let m = builtin_linear_model_forced(2.0, 1.0, 2.0, 2f64.sqrt(), 1.0).unwrap();
    let hm = HomogenizedModel::new(&m, small(1000, 200, 3)).unwrap();
    let c = hm.poisson_averages(&[0.0], &origin()).unwrap();
    let tail = c.truncation_bound;
    assert!(tail < 1e-2);
    // ∂_yΦ = 1/κ and ∂_νΦ = α/(κ(κ − α)), both 1/2.
    assert!(c.c_dy_phi.agrees_with(&[0.5], 3.0, tail), "{:?}", c.c_dy_phi);
    for d in &c.c_nu.derivatives {
        assert!(d.agrees_with(&[0.5], 3.0, tail), "{d:?}");
    }
    let v = c.c_nu.evaluate(|_, out| out[0] = 1.0)[0];
    let se = (c.c_nu.derivatives.iter().map(|d| d.std_error[0].powi(2)).sum::<f64>()).sqrt() / 3.0;
    assert!((v - 0.5).abs() < 3.0 * se + tail, "{v} ± {se}");

    // Limit drift −x + 1/2 + 1/2: the ensemble mean relaxes to 1.
    let xi = Ensemble::from_scalars(&vec![0.0; 1000]).unwrap();
    let t = hm.simulate_limit(&xi, 6.0, &LimitConfig { h: 0.01, seed: 2, ..Default::default() }).unwrap();
    let m = t.final_state.mean()[0];
    let se = (t.final_state.variance()[0] / 1000.0).sqrt();
    assert!((m - (1.0 - (-6f64).exp())).abs() < 3.0 * se + 1e-2, "{m} ± {se}");
    assert_eq!(t.cache_entries, 1);
}

#[test]
fn quadrature_examples_and_permutation_invariance() {
    let z = standard_normal(4000, 4);
    for (f, target) in [(Box::new(|y: f64| y) as Box<dyn Fn(f64) -> f64 + Send + Sync>, 0.0), (Box::new(|y: f64| y * y), 1.0)] {
        let m = with_slow_drift(f);
        let hm = HomogenizedModel::new(&m, small(1000, 200, 1)).unwrap();
        hm.insert_zeta(&origin(), z.clone());
        let a = hm.averaged_drift(&[0.0], &origin()).unwrap();
        assert!(a.agrees_with(&[target], 3.0, 0.0), "{a:?}");
        let gg = hm.averaged_gg(&[0.0], &origin()).unwrap();
        // ∫(1 + y)² dζ = 2.
        assert!(gg.agrees_with(&[2.0], 3.0, 0.0), "{gg:?}");

        let n = z.zeta.count();
        let perm: Vec<usize> = (0..n).map(|i| (i * 2741 + 17) % n).collect();
        let shuffled = InvariantMeasureEstimate::assume_stationary(z.zeta.permuted(&perm), 1.0, 1.0, "");
        let hp = HomogenizedModel::new(&m, small(1000, 200, 1)).unwrap();
        hp.insert_zeta(&origin(), shuffled);
        let b = hp.averaged_drift(&[0.0], &origin()).unwrap();
        assert!((a.value[0] - b.value[0]).abs() < 1e-12);
        let gp = hp.averaged_gg(&[0.0], &origin()).unwrap();
        assert!((gg.value[0] - gp.value[0]).abs() < 1e-12);
    }
}

#[test]
fn vanishing_singular_drift_leaves_gg() {
    let m = with_slow_drift(|_| 0.0);
    let hm = HomogenizedModel::new(&m, small(1000, 200, 1)).unwrap();
    hm.insert_zeta(&origin(), standard_normal(2000, 5));
    let d = hm.averaged_diffusion_sq(&[0.0], &origin()).unwrap();
    let gg = hm.averaged_gg(&[0.0], &origin()).unwrap();
    assert_eq!(d.matrix.value, gg.value);
}

#[test]
fn doubling_the_batch_shrinks_the_error() {
    let m = linear();
    let se = |paths: usize, groups: usize| {
        let mut cfg = small(paths, 100, 1);
        cfg.poisson.law_groups = groups;
        cfg.poisson.truncation_tol = 1e-2;
        let hm = HomogenizedModel::new(&m, cfg).unwrap();
        hm.poisson_averages(&[0.0], &origin()).unwrap().h_phi.std_error[0]
    };
    let ratio = se(2000, 100) / se(4000, 200);
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn limit_equation_of_the_linear_model() {
    let hm = HomogenizedModel::new(&linear(), small(2000, 200, 1)).unwrap();
    let xi = Ensemble::from_scalars(&vec![0.0; 4000]).unwrap();
    let cfg = LimitConfig { h: 0.01, seed: 3, output_every: 100, ..Default::default() };
    let t = hm.simulate_limit(&xi, 10.0, &cfg).unwrap();
    let v = t.final_state.variance()[0];
    let m4 = t.final_state.particles().iter().map(|x| x.powi(4)).sum::<f64>() / 4000.0;
    let se = ((m4 - v * v) / 4000.0).sqrt();
    assert!((v - 1.5).abs() < 3.0 * se, "variance {v} ± {se}");
    assert_eq!(t.cache_entries, 1);

    let again = hm.simulate_limit(&xi, 10.0, &cfg).unwrap();
    assert_eq!(t.summaries, again.summaries);
    assert_eq!(t.final_state, again.final_state);
}

#[test]
fn frozen_limit_without_coefficients() {
    let c = FnCoefficients::new(1, 1)
        .fast_drift(|_: &Ensemble, y: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = -y[0])
        .fast_diffusion(|_: &Ensemble, _: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = 1.0);
    let s = ModelStructure { fast_reads_slow_law: false, singular_reads_slow: false, forcing_vanishes: true, ..Default::default() };
    let m = ModelSpec::new(1, 1, c, DissipativityParams::new(0.0, 1.0, true).unwrap(), s).unwrap();
    let hm = HomogenizedModel::new(&m, small(1000, 100, 1)).unwrap();
    hm.insert_zeta(&origin(), standard_normal(500, 1));
    let xi = Ensemble::from_scalars(&[-1.0, 0.25, 3.0]).unwrap();
    let t = hm.simulate_limit(&xi, 1.0, &LimitConfig { h: 0.1, ..Default::default() }).unwrap();
    assert_eq!(t.final_state, xi);
    let d = hm.averaged_diffusion_sq(&[0.0], &origin()).unwrap();
    assert_eq!(d.matrix.value, vec![0.0]);
}

#[test]
fn langevin_constants_of_linear_potential() {
    // H = −2y, β = 1: Φ = −y, ζ = N(0, 1/2), c₃ = ⟨2y², ζ⟩ = 1.
    let m: ModelSpec = builtin_langevin_linear(2.0, 0.0, 1.0, 1.0).unwrap();
    let mut cfg = small(1000, 200, 3);
    cfg.zeta_init = InitialLaw::Point(vec![1.0]);
    let hm = HomogenizedModel::new(&m, cfg).unwrap();
    let k = langevin_constants(&hm).unwrap();
    assert!((k.c3 - 1.0).abs() < 3.0 * k.std_errors[2], "{k:?}");
    assert!(k.c1.abs() < 3.0 * k.std_errors[0], "{k:?}");
    assert!(k.c2.abs() < 3.0 * k.std_errors[1] + 1e-3, "{k:?}");
    assert!((k.effective_diffusion_sq - (2.0 + 2.0 * k.c3)).abs() < 1e-15);
    assert_eq!(k.limit_drift(2.0, 0.0), (1.0 + k.c1) * 2.0);

    let zero_f = builtin_langevin_model(
        1,
        |_: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = 0.0,
        |y: &[f64], _: &Ensemble, out: &mut [f64]| out[0] = -2.0 * y[0],
        1.0,
        DissipativityParams::new(0.0, 2.0, true).unwrap(),
    )
    .unwrap();
    let hm = HomogenizedModel::new(&zero_f, small(1000, 200, 2)).unwrap();
    hm.insert_zeta(&origin(), standard_normal(1000, 2));
    let k = langevin_constants(&hm).unwrap();
    assert_eq!((k.c1, k.c2), (0.0, 0.0));
}

#[test]
fn sqrt_round_trips_random_factors() {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    for n in 1..=4 {
        for _ in 0..25 {
            let s: Vec<f64> = (0..n * n).map(|_| next()).collect();
            let a = linalg::matmul(&s, &linalg::transpose(&s, n), n);
            let r = effective_diffusion_sqrt(&a, n, 1e-12).unwrap();
            let back = linalg::matmul(&r, &linalg::transpose(&r, n), n);
            for (b, x) in back.iter().zip(&a) {
                assert!((b - x).abs() < 1e-10, "{b} vs {x}");
            }
        }
    }
}

#[test]
fn coefficient_csv_layout() {
    let hm = HomogenizedModel::new(&linear(), small(1000, 100, 1)).unwrap();
    let rows = hm.coefficient_table(&[vec![0.0], vec![1.0]], &origin()).unwrap();
    let mut buf = Vec::new();
    write_coefficient_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,coefficient,value,std_error"));
    assert_eq!(lines.count(), rows.len());
    assert!(rows.iter().any(|r| r.coefficient == "F_bar[0]" && r.x == vec![1.0] && r.value == -1.0));
}
