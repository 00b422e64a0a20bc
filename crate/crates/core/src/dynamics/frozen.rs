use rayon::prelude::*;

use super::{first_non_finite, IntegratorConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::Ensemble;
use crate::model::ModelSpec;
use crate::rng::{self, channel, StreamRng};
use crate::scalar::Real;
use crate::stats::{weighted_line_fit, LineFit};

/// N-particle system of the frozen equation dY = b(μ, Y, ν̂)dt + σ(μ, Y, ν̂)dW
/// with μ held fixed and ν̂ the running empirical law.
pub struct FrozenSystem<'a, T: Real> {
    model: &'a ModelSpec<T>,
    mu: &'a Ensemble<T>,
    ens: Ensemble<T>,
    rngs: Vec<StreamRng>,
    h: f64,
    steps_taken: usize,
    zero_noise: bool,
}

impl<'a, T: Real> FrozenSystem<'a, T> {
    /// Particle i draws from stream `(seed, FROZEN, i)`; two systems built
    /// with the same seed share their noise.
    pub fn new(
        model: &'a ModelSpec<T>,
        mu: &'a Ensemble<T>,
        nu0: Ensemble<T>,
        h: f64,
        seed: u64,
        zero_noise: bool,
    ) -> Result<Self> {
        if mu.dim() != model.d1() || nu0.dim() != model.d2() {
            return Err(Error::Structural(format!(
                "frozen system expects mu in R^{} and nu in R^{}, got {} and {}",
                model.d1(),
                model.d2(),
                mu.dim(),
                nu0.dim()
            )));
        }
        let rngs = rng::streams(seed, channel::FROZEN, nu0.count());
        Ok(Self { model, mu, ens: nu0, rngs, h, steps_taken: 0, zero_noise })
    }

    pub fn ensemble(&self) -> &Ensemble<T> {
        &self.ens
    }

    pub fn t(&self) -> f64 {
        self.steps_taken as f64 * self.h
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn step(&mut self) -> Result<()> {
        let d2 = self.model.d2();
        let c = self.model.coefficients();
        let ht = T::of(self.h);
        let sqrt_h = ht.sqrt();
        let mu = self.mu;
        let nu = &self.ens;
        let zero_noise = self.zero_noise;
        let mut next = nu.particles().to_vec();
        let kernel = |(b, sig, w): &mut (Vec<T>, Vec<T>, Vec<T>), (i, (yo, r)): (usize, (&mut [T], &mut StreamRng))| {
            let y = nu.particle(i);
            c.fast_drift(mu, y, nu, b);
            for (o, &v) in yo.iter_mut().zip(b.iter()) {
                *o += v * ht;
            }
            if !zero_noise {
                c.fast_diffusion(mu, y, nu, sig);
                rng::fill_normal(r, sqrt_h, w);
                for (a, o) in yo.iter_mut().enumerate() {
                    *o += crate::scalar::dot(&sig[a * d2..(a + 1) * d2], w);
                }
            }
        };
        let scratch = || (vec![T::zero(); d2], vec![T::zero(); d2 * d2], vec![T::zero(); d2]);
        if rayon::current_num_threads() == 1 {
            let mut s = scratch();
            next.chunks_mut(d2).zip(self.rngs.iter_mut()).enumerate().for_each(|item| kernel(&mut s, item));
        } else {
            next.par_chunks_mut(d2)
                .zip(self.rngs.par_iter_mut())
                .enumerate()
                .with_min_len(256)
                .for_each_init(scratch, kernel);
        }
        self.steps_taken += 1;
        if let Some(i) = first_non_finite(&next, d2) {
            return Err(Error::BlowUp { index: i, t: self.t() });
        }
        self.ens = Ensemble::from_raw(d2, next);
        Ok(())
    }
}

/// Ensemble trajectory of the frozen equation on a uniform step grid.
/// Snapshots are kept every `stride` steps and held constant in between.
#[derive(Clone, Debug)]
pub struct LawPath<T: Real = f64> {
    h: f64,
    steps: usize,
    stride: usize,
    snapshots: Vec<Ensemble<T>>,
    last: Ensemble<T>,
}

impl<T: Real> LawPath<T> {
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn horizon(&self) -> f64 {
        self.h * self.steps as f64
    }

    /// Law used at step `k`.
    #[inline]
    pub fn at_step(&self, k: usize) -> &Ensemble<T> {
        if k >= self.steps {
            return &self.last;
        }
        &self.snapshots[(k / self.stride).min(self.snapshots.len() - 1)]
    }

    pub fn initial(&self) -> &Ensemble<T> {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Ensemble<T> {
        &self.last
    }

    pub fn snapshots(&self) -> &[Ensemble<T>] {
        &self.snapshots
    }
}

/// Frozen law path over `steps` steps of size `h`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn frozen_law_path<T: Real>(
    model: &ModelSpec<T>,
    mu: &Ensemble<T>,
    nu0: Ensemble<T>,
    steps: usize,
    h: f64,
    seed: u64,
    zero_noise: bool,
    cap: usize,
) -> Result<LawPath<T>> {
    let per_snapshot = nu0.count() * nu0.dim();
    let total = (steps + 1) * per_snapshot;
    let stride = total.div_ceil(cap.max(per_snapshot)).max(1);
    let mut sys = FrozenSystem::new(model, mu, nu0, h, seed, zero_noise)?;
    let mut snapshots = vec![sys.ensemble().clone()];
    for k in 1..=steps {
        sys.step()?;
        if k % stride == 0 && k < steps {
            snapshots.push(sys.ensemble().clone());
        }
    }
    Ok(LawPath { h, steps, stride, snapshots, last: sys.ensemble().clone() })
}

/// Simulate the frozen equation from `nu0` up to `t_end`.
pub fn simulate_frozen<T: Real>(
    model: &ModelSpec<T>,
    mu: &Ensemble<T>,
    nu0: &Ensemble<T>,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<LawPath<T>> {
    let (steps, h) = cfg.grid(t_end)?;
    frozen_law_path(model, mu, nu0.clone(), steps, h, cfg.seed, cfg.zero_noise, cfg.law_path_cap)
}

fn check_grid<T: Real>(law: &LawPath<T>, h: f64, t_end: f64) -> Result<usize> {
    if (h - law.h).abs() > 1e-12 * law.h {
        return Err(Error::Usage(format!("step {h:e} differs from the law path step {:e}", law.h)));
    }
    let steps = (t_end / law.h).round() as usize;
    if (steps as f64 * law.h - t_end).abs() > 1e-9 * (1.0 + t_end) {
        return Err(Error::Usage(format!("horizon {t_end} is not on the law path grid")));
    }
    if steps > law.steps {
        return Err(Error::Usage(format!("horizon {t_end} exceeds the law path ({})", law.horizon())));
    }
    Ok(steps)
}

/// Run the tagged particles `paths` of the decoupled equation for `steps` steps.
/// Path p starts where `start(p, y)` puts it, draws noise from
/// `(seed, TAGGED, p)` and reads its law argument from `law`. `visit` sees
/// the state before every step and after the last one.
#[allow(clippy::too_many_arguments)]
pub(crate) fn tagged_run<T, S>(
    model: &ModelSpec<T>,
    mu: &Ensemble<T>,
    law: &LawPath<T>,
    steps: usize,
    seed: u64,
    paths: std::ops::Range<usize>,
    zero_noise: bool,
    start: impl Fn(usize, &mut [T]) + Sync,
    init: impl Fn(usize) -> S + Sync,
    visit: impl Fn(&mut S, usize, &[T], &Ensemble<T>) + Sync,
) -> Result<Vec<S>>
where
    T: Real,
    S: Send,
{
    if steps > law.steps {
        return Err(Error::Usage("tagged run exceeds the law path".into()));
    }
    let d2 = model.d2();
    let c = model.coefficients();
    let ht = T::of(law.h);
    let sqrt_h = ht.sqrt();
    paths
        .into_par_iter()
        .with_min_len(16)
        .map(|p| {
            let mut y = vec![T::zero(); d2];
            start(p, &mut y);
            let mut r = rng::stream(seed, channel::TAGGED, p as u64);
            let mut b = vec![T::zero(); d2];
            let mut sig = vec![T::zero(); d2 * d2];
            let mut w = vec![T::zero(); d2];
            let mut state = init(p);
            for k in 0..=steps {
                let nu = law.at_step(k);
                visit(&mut state, k, &y, nu);
                if k == steps {
                    break;
                }
                c.fast_drift(mu, &y, nu, &mut b);
                if !zero_noise {
                    c.fast_diffusion(mu, &y, nu, &mut sig);
                    rng::fill_normal(&mut r, sqrt_h, &mut w);
                    for a in 0..d2 {
                        y[a] += b[a] * ht + crate::scalar::dot(&sig[a * d2..(a + 1) * d2], &w);
                    }
                } else {
                    for a in 0..d2 {
                        y[a] += b[a] * ht;
                    }
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp { index: p, t: (k + 1) as f64 * law.h });
                }
            }
            Ok(state)
        })
        .collect()
}

/// Tagged-particle states at the output times.
#[derive(Clone, Debug)]
pub struct PathBundle<T: Real = f64> {
    pub times: Vec<f64>,
    /// One ensemble of `paths` particles per output time.
    pub states: Vec<Ensemble<T>>,
}

impl<T: Real> PathBundle<T> {
    pub fn last(&self) -> &Ensemble<T> {
        self.states.last().expect("bundle has at least the initial time")
    }
}

fn output_steps(steps: usize, every: usize) -> Vec<usize> {
    let every = every.max(1);
    let mut out: Vec<usize> = (0..=steps).step_by(every).collect();
    if *out.last().unwrap() != steps {
        out.push(steps);
    }
    out
}

/// M tagged particles of the decoupled equation from `y0`, with law
/// argument read from `law` instead of their own empirical law.
pub fn simulate_decoupled<T: Real>(
    model: &ModelSpec<T>,
    mu: &Ensemble<T>,
    y0: &[T],
    law: &LawPath<T>,
    t_end: f64,
    paths: usize,
    cfg: &IntegratorConfig,
) -> Result<PathBundle<T>> {
    if y0.len() != model.d2() {
        return Err(Error::Structural("start point dimension differs from d2".into()));
    }
    let steps = check_grid(law, cfg.h, t_end)?;
    let outputs = output_steps(steps, cfg.substeps_per_output);
    let d2 = model.d2();
    let per_path = tagged_run(
        model,
        mu,
        law,
        steps,
        cfg.seed,
        0..paths,
        cfg.zero_noise,
        |_, y| y.copy_from_slice(y0),
        |_| Vec::with_capacity(outputs.len() * d2),
        |rec: &mut Vec<T>, k, y, _| {
            if outputs.binary_search(&k).is_ok() {
                rec.extend_from_slice(y);
            }
        },
    )?;
    let states = (0..outputs.len())
        .map(|j| {
            let mut data = Vec::with_capacity(paths * d2);
            for rec in &per_path {
                data.extend_from_slice(&rec[j * d2..(j + 1) * d2]);
            }
            Ensemble::from_raw(d2, data)
        })
        .collect();
    Ok(PathBundle { times: outputs.iter().map(|&k| k as f64 * law.h).collect(), states })
}

/// Tagged particles together with their Jacobians ∂_yY_t.
#[derive(Clone, Debug)]
pub struct TangentEnsemble<T: Real = f64> {
    pub t: f64,
    pub base: Ensemble<T>,
    /// Row-major d2×d2 Jacobian per particle, N·d2² entries.
    pub jacobians: Vec<T>,
}

impl<T: Real> TangentEnsemble<T> {
    /// (1/N) Σ ‖J_i‖²_F
    pub fn mean_sq_norm(&self) -> f64 {
        let n = self.base.count();
        self.jacobians.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n as f64
    }
}

/// Co-evolve tagged paths and their Jacobians
/// dJ = ∂_yb·J dt + Σ_j ∂_yσ_{·j}·J dW_j, J₀ = I.
/// The drift part of J is advanced with the exact exponential of ∂_yb·h;
/// the path itself uses Euler–Maruyama.
pub fn tangent_flow_y<T: Real>(
    model: &ModelSpec<T>,
    mu: &Ensemble<T>,
    y0: &[T],
    law: &LawPath<T>,
    t_end: f64,
    paths: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<TangentEnsemble<T>>> {
    let d2 = model.d2();
    if y0.len() != d2 {
        return Err(Error::Structural("start point dimension differs from d2".into()));
    }
    let steps = check_grid(law, cfg.h, t_end)?;
    let outputs = output_steps(steps, cfg.substeps_per_output);
    let c = model.coefficients();
    let ht = T::of(law.h);
    let sqrt_h = ht.sqrt();
    let m = d2 * d2;
    let records: Vec<Vec<T>> = (0..paths)
        .into_par_iter()
        .with_min_len(16)
        .map(|p| {
            let mut y = y0.to_vec();
            let mut jac = linalg::identity::<T>(d2);
            let mut r = rng::stream(cfg.seed, channel::TAGGED, p as u64);
            let mut b = vec![T::zero(); d2];
            let mut db = vec![T::zero(); m];
            let mut sig = vec![T::zero(); m];
            let mut dsig = vec![T::zero(); m * d2];
            let mut w = vec![T::zero(); d2];
            let mut rec = Vec::with_capacity(outputs.len() * (d2 + m));
            for k in 0..=steps {
                if outputs.binary_search(&k).is_ok() {
                    rec.extend_from_slice(&y);
                    rec.extend_from_slice(&jac);
                }
                if k == steps {
                    break;
                }
                let nu = law.at_step(k);
                c.fast_drift(mu, &y, nu, &mut b);
                c.fast_drift_jacobian(mu, &y, nu, &mut db);
                let ah: Vec<T> = db.iter().map(|&v| v * ht).collect();
                let mut next_j = linalg::matmul(&linalg::expm(&ah, d2), &jac, d2);
                if !cfg.zero_noise {
                    c.fast_diffusion(mu, &y, nu, &mut sig);
                    c.fast_diffusion_jacobian(mu, &y, nu, &mut dsig);
                    rng::fill_normal(&mut r, sqrt_h, &mut w);
                    // Σ_j Σ_m ∂σ_ij/∂y_m J_mk ΔW_j
                    for i in 0..d2 {
                        for kk in 0..d2 {
                            let mut acc = T::zero();
                            for j in 0..d2 {
                                for mm in 0..d2 {
                                    acc += dsig[mm * m + i * d2 + j] * jac[mm * d2 + kk] * w[j];
                                }
                            }
                            next_j[i * d2 + kk] += acc;
                        }
                    }
                    for a in 0..d2 {
                        y[a] += b[a] * ht + crate::scalar::dot(&sig[a * d2..(a + 1) * d2], &w);
                    }
                } else {
                    for a in 0..d2 {
                        y[a] += b[a] * ht;
                    }
                }
                jac = next_j;
                if y.iter().chain(jac.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp { index: p, t: (k + 1) as f64 * law.h });
                }
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let width = d2 + m;
    Ok(outputs
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mut base = Vec::with_capacity(paths * d2);
            let mut jacobians = Vec::with_capacity(paths * m);
            for rec in &records {
                let row = &rec[j * width..(j + 1) * width];
                base.extend_from_slice(&row[..d2]);
                jacobians.extend_from_slice(&row[d2..]);
            }
            TangentEnsemble { t: k as f64 * law.h, base: Ensemble::from_raw(d2, base), jacobians }
        })
        .collect())
}

/// Least-squares fit of ln E‖∂_yY_t‖² against t; the decay rate is −slope.
pub fn tangent_decay_rate<T: Real>(traj: &[TangentEnsemble<T>]) -> Option<LineFit> {
    let (t, v): (Vec<f64>, Vec<f64>) = traj
        .iter()
        .map(|e| (e.t, e.mean_sq_norm()))
        .filter(|(_, v)| *v > 1e-280)
        .map(|(t, v)| (t, v.ln()))
        .unzip();
    weighted_line_fit(&t, &v, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_linear_model;

    fn linear() -> ModelSpec {
        builtin_linear_model(2.0, 1.0, 2.0, 2f64.sqrt()).unwrap()
    }

    #[test]
    fn frozen_without_dynamics_is_constant() {
        use crate::model::{DissipativityParams, FnCoefficients, ModelStructure};
        let m = ModelSpec::new(1, 1, FnCoefficients::<f64>::new(1, 1), DissipativityParams::new(0.0, 1.0, false).unwrap(), ModelStructure::default()).unwrap();
        let mu = Ensemble::point(&[0.0]).unwrap();
        let nu0 = Ensemble::from_scalars(&[1.0, 2.0, -3.0]).unwrap();
        let path = simulate_frozen(&m, &mu, &nu0, 1.0, &IntegratorConfig::new(0.1, 0)).unwrap();
        assert_eq!(path.last(), &nu0);
        let bundle = simulate_decoupled(&m, &mu, &[0.5], &path, 1.0, 4, &IntegratorConfig::new(0.1, 0)).unwrap();
        assert!(bundle.last().particles().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn law_path_thinning_holds_snapshots() {
        let m = linear();
        let mu = Ensemble::point(&[0.0]).unwrap();
        let nu0 = Ensemble::from_scalars(&[0.0; 10]).unwrap();
        let mut cfg = IntegratorConfig::new(0.01, 1);
        cfg.law_path_cap = 10 * 25;
        let path = simulate_frozen(&m, &mu, &nu0, 1.0, &cfg).unwrap();
        assert_eq!(path.steps(), 100);
        assert!(path.stride() >= 4);
        assert!(path.snapshots().len() <= 26);
        assert_eq!(path.at_step(1), path.initial());
    }

    #[test]
    fn grid_mismatch_is_usage_error() {
        let m = linear();
        let mu = Ensemble::point(&[0.0]).unwrap();
        let path = simulate_frozen(&m, &mu, &Ensemble::point(&[0.0]).unwrap(), 1.0, &IntegratorConfig::new(0.1, 0)).unwrap();
        let r = simulate_decoupled(&m, &mu, &[0.0], &path, 1.0, 2, &IntegratorConfig::new(0.05, 0));
        assert!(matches!(r, Err(Error::Usage(_))));
        let r = simulate_decoupled(&m, &mu, &[0.0], &path, 2.0, 2, &IntegratorConfig::new(0.1, 0));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn deterministic_tangent_is_exponential() {
        let m = linear();
        let mu = Ensemble::point(&[0.0]).unwrap();
        let mut cfg = IntegratorConfig::new(0.01, 0).with_output_every(100);
        cfg.zero_noise = true;
        let path = simulate_frozen(&m, &mu, &Ensemble::point(&[0.0]).unwrap(), 1.0, &cfg).unwrap();
        let traj = tangent_flow_y(&m, &mu, &[1.0], &path, 1.0, 3, &cfg).unwrap();
        assert_eq!(traj[0].jacobians, vec![1.0; 3]);
        let last = traj.last().unwrap();
        assert!((last.t - 1.0).abs() < 1e-12);
        for &j in &last.jacobians {
            assert!((j - (-2.0f64).exp()).abs() < 1e-12);
        }
    }
}
