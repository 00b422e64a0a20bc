//! Time stepping: the coupled slow/fast particle system, the frozen fast
//! equation, tagged particles driven by a frozen law path, tangent flows and
//! invariant-measure estimation.
//!
//! Every particle owns a counter-based noise stream, and all drift and
//! diffusion evaluations within a step read the pre-step ensembles, so
//! results are bitwise independent of the number of worker threads.

mod frozen;
mod invariant;

pub use frozen::{
    simulate_decoupled, simulate_frozen, tangent_decay_rate, tangent_flow_y, FrozenSystem, LawPath, PathBundle,
    TangentEnsemble,
};
pub(crate) use frozen::{frozen_law_path, tagged_run};
pub use invariant::{
    coupling_contraction, estimate_invariant, ContractionReport, ErgodicityDiagnostics, InvariantConfig,
    InvariantMeasureEstimate, RateSource,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::Ensemble;
use crate::model::ModelSpec;
use crate::rng::{self, channel, StreamRng};
use crate::scalar::Real;

/// Default cap on stored law-path scalars (≈160 MB in double precision).
pub const DEFAULT_LAW_PATH_CAP: usize = 20_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    EulerMaruyama,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntegratorConfig {
    /// Largest admissible step; the actual step is T / ceil(T / h).
    pub h: f64,
    pub substeps_per_output: usize,
    pub scheme: Scheme,
    pub seed: u64,
    /// Test hook: drop all Brownian increments.
    pub zero_noise: bool,
    pub law_path_cap: usize,
    /// Keep full ensembles at output times.
    pub keep_snapshots: bool,
}

impl IntegratorConfig {
    pub fn new(h: f64, seed: u64) -> Self {
        Self {
            h,
            substeps_per_output: 1,
            scheme: Scheme::EulerMaruyama,
            seed,
            zero_noise: false,
            law_path_cap: DEFAULT_LAW_PATH_CAP,
            keep_snapshots: false,
        }
    }

    pub fn with_output_every(mut self, substeps: usize) -> Self {
        self.substeps_per_output = substeps.max(1);
        self
    }

    /// Number of steps and actual step size covering [0, t_end].
    pub fn grid(&self, t_end: f64) -> Result<(usize, f64)> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Usage(format!("step size must be positive, got {}", self.h)));
        }
        if !(t_end >= 0.0 && t_end.is_finite()) {
            return Err(Error::Usage(format!("horizon must be nonnegative, got {t_end}")));
        }
        if t_end == 0.0 {
            return Ok((0, self.h));
        }
        let n = (t_end / self.h - 1e-9).ceil().max(1.0) as usize;
        Ok((n, t_end / n as f64))
    }
}

/// Largest step admitted for scale ε: ε²/10.
pub fn max_slow_fast_step(eps: f64) -> f64 {
    eps * eps / 10.0
}

/// Initial law of one channel.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Mean and row-major covariance.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    /// Particles of a stored ensemble, reused cyclically.
    Loaded(Ensemble<f64>),
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(p) => p.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Loaded(e) => e.dim(),
        }
    }

    /// N particles; particle i is drawn from its own stream so samples
    /// nest across N and agree across runs sharing `(seed, chan)`.
    pub fn sample<T: Real>(&self, n: usize, seed: u64, chan: u64) -> Result<Ensemble<T>> {
        if n == 0 {
            return Err(Error::Usage("ensemble size must be positive".into()));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::Structural("initial law has dimension 0".into()));
        }
        let mut data = Vec::with_capacity(n * d);
        match self {
            InitialLaw::Point(p) => {
                for _ in 0..n {
                    data.extend(p.iter().map(|&v| T::of(v)));
                }
            }
            InitialLaw::Gaussian { mean, cov } => {
                if cov.len() != d * d {
                    return Err(Error::Structural(format!("covariance must be {d}x{d}")));
                }
                let l = linalg::cholesky(cov, d)?;
                let mut z = vec![0.0; d];
                for i in 0..n {
                    let mut r = rng::stream(seed, chan, i as u64);
                    rng::fill_normal(&mut r, 1.0, &mut z);
                    for a in 0..d {
                        let v: f64 = mean[a] + (0..=a).map(|b| l[a * d + b] * z[b]).sum::<f64>();
                        data.push(T::of(v));
                    }
                }
            }
            InitialLaw::Loaded(e) => {
                for i in 0..n {
                    data.extend(e.particle(i % e.count()).iter().map(|&v| T::of(v)));
                }
            }
        }
        Ensemble::new(d, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowFastState<T: Real = f64> {
    pub slow: Ensemble<T>,
    pub fast: Ensemble<T>,
    pub t: f64,
    pub eps: f64,
}

impl<T: Real> SlowFastState<T> {
    pub fn new(slow: Ensemble<T>, fast: Ensemble<T>, eps: f64) -> Result<Self> {
        if slow.count() != fast.count() {
            return Err(Error::Structural(format!(
                "slow and fast ensembles differ in size ({} vs {})",
                slow.count(),
                fast.count()
            )));
        }
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::Usage(format!("eps must lie in (0, 1], got {eps}")));
        }
        Ok(Self { slow, fast, t: 0.0, eps })
    }

    pub fn count(&self) -> usize {
        self.slow.count()
    }
}

/// Per-particle noise streams of a slow/fast run.
pub struct SlowFastNoise {
    rngs: Vec<StreamRng>,
}

impl SlowFastNoise {
    pub fn new(seed: u64, particles: usize) -> Self {
        Self { rngs: rng::streams(seed, channel::SLOW_FAST, particles) }
    }
}

struct Scratch<T> {
    dx: Vec<T>,
    sx: Vec<T>,
    dy: Vec<T>,
    sy: Vec<T>,
    g: Vec<T>,
    sig: Vec<T>,
    w1: Vec<T>,
    w2: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(d1: usize, d2: usize) -> Self {
        let z = T::zero();
        Self {
            dx: vec![z; d1],
            sx: vec![z; d1],
            dy: vec![z; d2],
            sy: vec![z; d2],
            g: vec![z; d1 * d1],
            sig: vec![z; d2 * d2],
            w1: vec![z; d1],
            w2: vec![z; d2],
        }
    }
}

pub(crate) fn first_non_finite<T: Real>(data: &[T], dim: usize) -> Option<usize> {
    data.iter().position(|v| !v.is_finite()).map(|p| p / dim)
}

/// One Euler–Maruyama step of the coupled system with step `h`.
pub(crate) fn advance_slow_fast<T: Real>(
    state: &SlowFastState<T>,
    model: &ModelSpec<T>,
    h: f64,
    noise: &mut SlowFastNoise,
    zero_noise: bool,
) -> Result<SlowFastState<T>> {
    let (d1, d2) = (model.d1(), model.d2());
    if state.slow.dim() != d1 || state.fast.dim() != d2 {
        return Err(Error::Structural("state dimensions differ from model".into()));
    }
    if noise.rngs.len() != state.count() {
        return Err(Error::Usage("noise streams do not match the particle count".into()));
    }
    let eps = T::of(state.eps);
    let ht = T::of(h);
    let sqrt_h = ht.sqrt();
    let mu = &state.slow;
    let nu = &state.fast;
    let coeffs = model.coefficients();
    let mut new_x = mu.particles().to_vec();
    let mut new_y = nu.particles().to_vec();
    new_x
        .par_chunks_mut(d1)
        .zip(new_y.par_chunks_mut(d2))
        .zip(noise.rngs.par_iter_mut())
        .enumerate()
        .with_min_len(64)
        .for_each_init(
            || Scratch::new(d1, d2),
            |s, (i, ((xo, yo), r))| {
                let x = mu.particle(i);
                let y = nu.particle(i);
                model.slow_channel_drift(x, mu, y, nu, eps, &mut s.dx, &mut s.sx);
                model.fast_channel_drift(x, mu, y, nu, eps, &mut s.dy, &mut s.sy);
                for (o, &v) in xo.iter_mut().zip(&s.dx) {
                    *o += v * ht;
                }
                for (o, &v) in yo.iter_mut().zip(&s.dy) {
                    *o += v * ht;
                }
                if zero_noise {
                    return;
                }
                coeffs.slow_diffusion(x, mu, y, nu, &mut s.g);
                coeffs.fast_diffusion(mu, y, nu, &mut s.sig);
                rng::fill_normal(r, sqrt_h, &mut s.w1);
                rng::fill_normal(r, sqrt_h, &mut s.w2);
                for (a, o) in xo.iter_mut().enumerate() {
                    *o += crate::scalar::dot(&s.g[a * d1..(a + 1) * d1], &s.w1);
                }
                for (a, o) in yo.iter_mut().enumerate() {
                    *o += crate::scalar::dot(&s.sig[a * d2..(a + 1) * d2], &s.w2) / eps;
                }
            },
        );
    let t = state.t + h;
    if let Some(i) = first_non_finite(&new_x, d1).or_else(|| first_non_finite(&new_y, d2)) {
        return Err(Error::BlowUp { index: i, t });
    }
    Ok(SlowFastState {
        slow: Ensemble::from_raw(d1, new_x),
        fast: Ensemble::from_raw(d2, new_y),
        t,
        eps: state.eps,
    })
}

/// One step of size `cfg.h`; rejects `h > ε²/10`.
pub fn step_slow_fast<T: Real>(
    state: &SlowFastState<T>,
    model: &ModelSpec<T>,
    cfg: &IntegratorConfig,
    noise: &mut SlowFastNoise,
) -> Result<SlowFastState<T>> {
    check_step_guard(cfg.h, state.eps)?;
    advance_slow_fast(state, model, cfg.h, noise, cfg.zero_noise)
}

fn check_step_guard(h: f64, eps: f64) -> Result<()> {
    let limit = max_slow_fast_step(eps);
    if h > limit * (1.0 + 1e-12) {
        return Err(Error::Usage(format!("step {h:e} exceeds eps^2/10 = {limit:e}")));
    }
    Ok(())
}

/// Moments of a slow/fast state at one output time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlowFastSummary {
    pub t: f64,
    pub slow_mean: Vec<f64>,
    pub slow_var: Vec<f64>,
    /// Diagonal of the slow second-moment matrix.
    pub slow_second_moment: Vec<f64>,
    pub fast_mean: Vec<f64>,
    pub fast_var: Vec<f64>,
}

impl SlowFastSummary {
    pub fn of<T: Real>(s: &SlowFastState<T>) -> Self {
        let to = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let d1 = s.slow.dim();
        let m2 = s.slow.second_moment();
        Self {
            t: s.t,
            slow_mean: to(s.slow.mean()),
            slow_var: to(&s.slow.variance()),
            slow_second_moment: (0..d1).map(|a| m2[a * d1 + a].as_f64()).collect(),
            fast_mean: to(s.fast.mean()),
            fast_var: to(&s.fast.variance()),
        }
    }
}

pub struct SlowFastTrajectory<T: Real = f64> {
    pub summaries: Vec<SlowFastSummary>,
    pub snapshots: Vec<SlowFastState<T>>,
    pub final_state: SlowFastState<T>,
}

/// Advance `initial` to `t_end`, calling `observe(step, state)` on the
/// initial state and after every step.
pub fn simulate_slow_fast_with<T: Real>(
    model: &ModelSpec<T>,
    initial: SlowFastState<T>,
    t_end: f64,
    cfg: &IntegratorConfig,
    mut observe: impl FnMut(usize, &SlowFastState<T>) -> Result<()>,
) -> Result<SlowFastState<T>> {
    check_step_guard(cfg.h, initial.eps)?;
    let (steps, h) = cfg.grid(t_end)?;
    let mut noise = SlowFastNoise::new(cfg.seed, initial.count());
    let t0 = initial.t;
    let mut state = initial;
    observe(0, &state)?;
    for k in 1..=steps {
        let mut next = advance_slow_fast(&state, model, h, &mut noise, cfg.zero_noise)?;
        next.t = t0 + k as f64 * h;
        state = next;
        observe(k, &state)?;
    }
    Ok(state)
}

/// Sample initial ensembles, run to `t_end` and summarize every
/// `cfg.substeps_per_output` steps (and at the final time).
pub fn simulate_slow_fast<T: Real>(
    model: &ModelSpec<T>,
    eps: f64,
    n: usize,
    t_end: f64,
    cfg: &IntegratorConfig,
    slow_law: &InitialLaw,
    fast_law: &InitialLaw,
) -> Result<SlowFastTrajectory<T>> {
    if n < 2 {
        return Err(Error::Usage("slow/fast simulation needs at least 2 particles".into()));
    }
    if slow_law.dim() != model.d1() || fast_law.dim() != model.d2() {
        return Err(Error::Structural("initial law dimensions differ from model".into()));
    }
    let slow = slow_law.sample(n, cfg.seed, channel::INITIAL_SLOW)?;
    let fast = fast_law.sample(n, cfg.seed, channel::INITIAL_FAST)?;
    let initial = SlowFastState::new(slow, fast, eps)?;
    let (steps, _) = cfg.grid(t_end)?;
    let every = cfg.substeps_per_output.max(1);
    let mut summaries = Vec::new();
    let mut snapshots = Vec::new();
    let final_state = simulate_slow_fast_with(model, initial, t_end, cfg, |k, s| {
        if k % every == 0 || k == steps {
            summaries.push(SlowFastSummary::of(s));
            if cfg.keep_snapshots {
                snapshots.push(s.clone());
            }
        }
        Ok(())
    })?;
    Ok(SlowFastTrajectory { summaries, snapshots, final_state })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_linear_model, DissipativityParams, FnCoefficients, ModelStructure};

    fn linear() -> ModelSpec {
        builtin_linear_model(2.0, 1.0, 2.0, 2f64.sqrt()).unwrap()
    }

    #[test]
    fn hand_euler_step() {
        let state = SlowFastState::new(Ensemble::point(&[1.0]).unwrap(), Ensemble::point(&[1.0]).unwrap(), 1.0).unwrap();
        let mut cfg = IntegratorConfig::new(0.1, 0);
        cfg.zero_noise = true;
        let mut noise = SlowFastNoise::new(0, 1);
        let next = step_slow_fast(&state, &linear(), &cfg, &mut noise).unwrap();
        assert!((next.slow.particle(0)[0] - 1.0).abs() < 1e-15);
        assert!((next.fast.particle(0)[0] - 0.9).abs() < 1e-15);
        assert!((next.t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_dynamics_only_advance_time() {
        let coeffs = FnCoefficients::<f64>::new(1, 1);
        let m = ModelSpec::new(1, 1, coeffs, DissipativityParams::new(0.0, 1.0, false).unwrap(), ModelStructure::default())
            .unwrap();
        let state = SlowFastState::new(
            Ensemble::from_scalars(&[0.5, -1.0]).unwrap(),
            Ensemble::from_scalars(&[2.0, 3.0]).unwrap(),
            0.5,
        )
        .unwrap();
        let cfg = IntegratorConfig::new(0.01, 3);
        let mut noise = SlowFastNoise::new(3, 2);
        let next = step_slow_fast(&state, &m, &cfg, &mut noise).unwrap();
        assert_eq!(next.slow, state.slow);
        assert_eq!(next.fast, state.fast);
        assert!((next.t - 0.01).abs() < 1e-15);
    }

    #[test]
    fn step_guard_rejects_large_steps() {
        let state = SlowFastState::new(Ensemble::point(&[0.0]).unwrap(), Ensemble::point(&[0.0]).unwrap(), 0.1).unwrap();
        let cfg = IntegratorConfig::new(0.002, 0);
        let mut noise = SlowFastNoise::new(0, 1);
        assert!(matches!(step_slow_fast(&state, &linear(), &cfg, &mut noise), Err(Error::Usage(_))));
    }

    #[test]
    fn blow_up_reports_particle() {
        let coeffs = FnCoefficients::<f64>::new(1, 1).slow_drift(|x, _, _, _, o| o[0] = if x[0] > 0.0 { f64::INFINITY } else { 0.0 });
        let m = ModelSpec::new(1, 1, coeffs, DissipativityParams::new(0.0, 1.0, false).unwrap(), ModelStructure::default())
            .unwrap();
        let state = SlowFastState::new(
            Ensemble::from_scalars(&[-1.0, 1.0]).unwrap(),
            Ensemble::from_scalars(&[0.0, 0.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let mut noise = SlowFastNoise::new(0, 2);
        let err = step_slow_fast(&state, &m, &IntegratorConfig::new(0.01, 0), &mut noise).unwrap_err();
        assert!(matches!(err, Error::BlowUp { index: 1, .. }));
    }

    #[test]
    fn zero_horizon_gives_initial_summary() {
        let cfg = IntegratorConfig::new(1e-3, 1);
        let traj =
            simulate_slow_fast::<f64>(&linear(), 0.1, 4, 0.0, &cfg, &InitialLaw::Point(vec![1.0]), &InitialLaw::Point(vec![0.0]))
                .unwrap();
        assert_eq!(traj.summaries.len(), 1);
        assert_eq!(traj.summaries[0].slow_mean, vec![1.0]);
    }

    #[test]
    fn update_order_is_irrelevant() {
        // Reversing the particle order (with their streams) permutes the result.
        let m = linear();
        let slow = Ensemble::from_scalars(&[0.1, 0.7, -0.3]).unwrap();
        let fast = Ensemble::from_scalars(&[1.0, -2.0, 0.5]).unwrap();
        let s = SlowFastState::new(slow.clone(), fast.clone(), 0.5).unwrap();
        let cfg = IntegratorConfig::new(0.02, 5);
        let mut noise = SlowFastNoise::new(5, 3);
        let a = step_slow_fast(&s, &m, &cfg, &mut noise).unwrap();
        let perm = [2, 1, 0];
        let sp = SlowFastState::new(slow.permuted(&perm), fast.permuted(&perm), 0.5).unwrap();
        let mut noise_p = SlowFastNoise { rngs: perm.iter().map(|&i| rng::stream(5, channel::SLOW_FAST, i as u64)).collect() };
        let b = step_slow_fast(&sp, &m, &cfg, &mut noise_p).unwrap();
        assert_eq!(b.slow, a.slow.permuted(&perm));
        assert_eq!(b.fast, a.fast.permuted(&perm));
    }

    #[test]
    fn gaussian_initial_law_moments() {
        let law = InitialLaw::Gaussian { mean: vec![1.0, -1.0], cov: vec![4.0, 1.0, 1.0, 1.0] };
        let e: Ensemble = law.sample(40_000, 9, channel::INITIAL_SLOW).unwrap();
        let c = e.covariance();
        assert!((e.mean()[0] - 1.0).abs() < 0.05 && (e.mean()[1] + 1.0).abs() < 0.03);
        assert!((c[0] - 4.0).abs() < 0.15 && (c[1] - 1.0).abs() < 0.06 && (c[3] - 1.0).abs() < 0.04);
    }
}
