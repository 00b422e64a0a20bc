//! Monte Carlo solution of the Poisson equation L₀Φ = −f on R^{d2} × P₂(R^{d2})
//! through its probabilistic representation
//!
//! ```text
//! Φ(x, μ, y, ν) = E ∫₀^∞ f(x, μ, Y_t^{μ,y,ν}, L(Y_t^{μ,η})) dt,   L(η) = ν,
//! ```
//!
//! where the tagged particle Y^{μ,y,ν} reads its law argument from the
//! frozen McKean–Vlasov flow started at ν. Paths are truncated at a horizon
//! chosen from the fitted ergodicity constants, and every finite difference
//! reuses the same tagged and law noise (common random numbers).

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::dynamics::{tagged_run, InvariantMeasureEstimate, LawPath, DEFAULT_LAW_PATH_CAP};
use crate::error::{Error, Result};
use crate::measure::{default_lions_step, Ensemble};
use crate::model::ModelSpec;
use crate::rng::{self, channel};
use crate::scalar::{all_finite, Real};
use crate::stats::{bootstrap_se, Estimate};

/// Version tag carried by every emitted JSON record.
pub const SCHEMA_VERSION: u32 = 1;

type IntegrandFn<'f, T> = dyn Fn(&[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]) + Send + Sync + 'f;

/// Right-hand side f(x, μ, y, ν) ∈ R^width of a Poisson equation.
pub struct Integrand<'f, T: Real = f64> {
    width: usize,
    f: Box<IntegrandFn<'f, T>>,
}

impl<'f, T: Real> Integrand<'f, T> {
    pub fn new(width: usize, f: impl Fn(&[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]) + Send + Sync + 'f) -> Self {
        Self { width, f: Box::new(f) }
    }

    /// f = H, the singular slow drift.
    pub fn singular_drift(model: &'f ModelSpec<T>) -> Self {
        Self::new(model.d1(), move |x, mu, y, nu, out| model.coefficients().singular_drift(x, mu, y, nu, out))
    }

    pub fn zero(width: usize) -> Self {
        Self::new(width, |_, _, _, _, out| out.iter_mut().for_each(|v| *v = T::zero()))
    }

    /// Scalar integrand depending on y only.
    pub fn of_y(f: impl Fn(&[T]) -> T + Send + Sync + 'f) -> Self {
        Self::new(1, move |_, _, y, _, out| out[0] = f(y))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn eval(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        (self.f)(x, mu, y, nu, out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoissonConfig {
    /// Tagged paths M, split evenly over the law groups.
    pub paths: usize,
    /// Independent frozen law paths; standard errors come from group means
    /// and so include the law-path noise.
    pub law_groups: usize,
    /// Particles of each frozen law path (ν is replicated up to this size).
    pub law_particles: usize,
    pub h: f64,
    /// Manual horizon T∞; automatic when `None`.
    pub horizon: Option<f64>,
    pub truncation_tol: f64,
    pub fd_x: f64,
    pub fd_y: f64,
    /// Lions step; 1e-4·(1 + RMS(ν)) when `None`.
    pub fd_nu: Option<f64>,
    pub seed: u64,
    /// Law paths are cached only while their total size stays below this
    /// many scalars.
    pub law_cache_cap: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            law_groups: 10,
            law_particles: 1000,
            h: 1e-3,
            horizon: None,
            truncation_tol: 1e-3,
            fd_x: 1e-3,
            fd_y: 1e-2,
            fd_nu: None,
            seed: 0,
            law_cache_cap: DEFAULT_LAW_PATH_CAP,
        }
    }
}

/// Fraction of the fitted rate trusted when sizing the horizon.
pub const HORIZON_RATE_FACTOR: f64 = 0.8;

/// T∞ = ln(max(Ĉ, 1)/tol)/(0.8·λ̂), clamped to [1, 50].
pub fn automatic_horizon(prefactor: f64, rate: f64, tol: f64) -> f64 {
    if !(rate > 0.0) {
        return 50.0;
    }
    ((prefactor.max(1.0) / tol).ln() / (HORIZON_RATE_FACTOR * rate)).clamp(1.0, 50.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct PoissonEstimate {
    pub estimate: Estimate<f64>,
    /// Bound on the neglected tail ∫_{T∞}^∞, Ĉ(1 + |y|)e^{−λT∞}/λ with
    /// λ = 0.8·λ̂.
    pub truncation_bound: f64,
    /// The integrand failed the centering check against ζ̂.
    pub centering_warning: bool,
}

impl PoissonEstimate {
    pub fn value(&self) -> f64 {
        self.estimate.value[0]
    }

    pub fn std_error(&self) -> f64 {
        self.estimate.std_error[0]
    }

    /// |value − target| ≤ k·SE + truncation bound, componentwise.
    pub fn agrees_with(&self, target: &[f64], k: f64) -> bool {
        self.estimate.agrees_with(target, k, self.truncation_bound)
    }
}

const LAW_CACHE_SIZE: usize = 2;

type GroupLaws<T> = Arc<Vec<LawPath<T>>>;

/// Cached Monte Carlo machinery at one slow parameter point (x, μ).
pub struct PoissonEvaluator<T: Real = f64> {
    model: ModelSpec<T>,
    x: Vec<T>,
    mu: Ensemble<T>,
    zeta: InvariantMeasureEstimate<T>,
    cfg: PoissonConfig,
    horizon: f64,
    steps: usize,
    law_cache: Mutex<VecDeque<(u64, GroupLaws<T>)>>,
}

impl<T: Real> PoissonEvaluator<T> {
    /// Refuses a non-converged invariant-measure estimate.
    pub fn new(
        model: &ModelSpec<T>,
        x: &[T],
        mu: &Ensemble<T>,
        zeta: InvariantMeasureEstimate<T>,
        cfg: PoissonConfig,
    ) -> Result<Self> {
        zeta.require_converged()?;
        if x.len() != model.d1() || mu.dim() != model.d1() || zeta.zeta.dim() != model.d2() {
            return Err(Error::Structural("Poisson evaluator arguments do not match (d1, d2)".into()));
        }
        if cfg.law_groups < 2 || cfg.paths % cfg.law_groups != 0 {
            return Err(Error::Usage("paths must be a multiple of law_groups ≥ 2".into()));
        }
        if cfg.law_particles == 0 {
            return Err(Error::Usage("law_particles must be positive".into()));
        }
        if !(cfg.h > 0.0) {
            return Err(Error::Usage("Poisson step must be positive".into()));
        }
        let d = &zeta.diagnostics;
        let wanted = cfg
            .horizon
            .unwrap_or_else(|| automatic_horizon(d.fitted_prefactor, d.fitted_rate, cfg.truncation_tol));
        if !(wanted > 0.0) {
            return Err(Error::Usage("Poisson horizon must be positive".into()));
        }
        let steps = (wanted / cfg.h).ceil().max(1.0) as usize;
        Ok(Self {
            model: model.clone(),
            x: x.to_vec(),
            mu: mu.clone(),
            zeta,
            horizon: steps as f64 * cfg.h,
            steps,
            cfg,
            law_cache: Mutex::new(VecDeque::new()),
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn config(&self) -> &PoissonConfig {
        &self.cfg
    }

    pub fn zeta(&self) -> &InvariantMeasureEstimate<T> {
        &self.zeta
    }

    pub fn model(&self) -> &ModelSpec<T> {
        &self.model
    }

    pub fn x(&self) -> &[T] {
        &self.x
    }

    pub fn mu(&self) -> &Ensemble<T> {
        &self.mu
    }

    /// Same machinery with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        let cfg = PoissonConfig { horizon: Some(horizon), ..self.cfg.clone() };
        Self::new(&self.model, &self.x, &self.mu, self.zeta.clone(), cfg)
    }

    /// Same machinery at another slow point; the frozen law paths are reused
    /// when the fast dynamics do not read μ.
    pub fn at_slow_point(&self, x: &[T], mu: &Ensemble<T>) -> Result<Self> {
        let ev = Self::new(&self.model, x, mu, self.zeta.clone(), self.cfg.clone())?;
        if !self.model.structure.fast_reads_slow_law {
            *ev.law_cache.lock().unwrap() = self.law_cache.lock().unwrap().clone();
        }
        Ok(ev)
    }

    /// Tail bound for a start point y.
    pub fn truncation_bound(&self, y: &[T]) -> f64 {
        let d = &self.zeta.diagnostics;
        let norm = y.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let rate = (HORIZON_RATE_FACTOR * d.fitted_rate).max(1e-12);
        d.fitted_prefactor.max(1.0) * (1.0 + norm) * (-rate * self.horizon).exp() / rate
    }

    fn replicate(&self, nu: &Ensemble<T>) -> Ensemble<T> {
        let n = nu.count();
        let reps = self.cfg.law_particles.div_ceil(n).max(1);
        let mut data = Vec::with_capacity(n * reps * nu.dim());
        for _ in 0..reps {
            data.extend_from_slice(nu.particles());
        }
        Ensemble::from_raw(nu.dim(), data)
    }

    fn build_law_path(&self, nu: &Ensemble<T>, group: usize) -> Result<LawPath<T>> {
        crate::dynamics::frozen_law_path(
            &self.model,
            &self.mu,
            self.replicate(nu),
            self.steps,
            self.cfg.h,
            rng::derive_seed(rng::derive_seed(self.cfg.seed, channel::FROZEN), group as u64),
            false,
            usize::MAX,
        )
    }

    fn law_scalars(&self, nu: &Ensemble<T>) -> usize {
        let per = self.cfg.law_particles.div_ceil(nu.count()) * nu.count() * nu.dim();
        self.cfg.law_groups * (self.steps + 1) * per
    }

    /// All group law paths started from ν, built and cached when they fit
    /// under `law_cache_cap`.
    pub fn law_paths(&self, nu: &Ensemble<T>) -> Result<Option<GroupLaws<T>>> {
        if nu.dim() != self.model.d2() {
            return Err(Error::Structural("nu dimension differs from d2".into()));
        }
        if self.law_scalars(nu) > self.cfg.law_cache_cap {
            return Ok(None);
        }
        let key = nu.fingerprint();
        if let Some((_, p)) = self.law_cache.lock().unwrap().iter().find(|(k, _)| *k == key) {
            return Ok(Some(p.clone()));
        }
        let paths = Arc::new((0..self.cfg.law_groups).map(|g| self.build_law_path(nu, g)).collect::<Result<Vec<_>>>()?);
        let mut cache = self.law_cache.lock().unwrap();
        if cache.len() >= LAW_CACHE_SIZE {
            cache.pop_front();
        }
        cache.push_back((key, paths.clone()));
        Ok(Some(paths))
    }

    /// Per-path left-point sums h·Σ_{k<n} f(Y_k) ≈ ∫₀^{T∞} f dt, row-major
    /// `paths × width`. The left-point rule solves the discrete Poisson
    /// equation of the Euler–Maruyama chain exactly.
    /// Path p starts at `start(p)`, reads the law path of group
    /// p/(paths/groups) started from ν, and its noise depends only on p.
    pub fn path_samples(
        &self,
        f: &Integrand<'_, T>,
        start: impl Fn(usize, &mut [T]) + Sync,
        nu: &Ensemble<T>,
    ) -> Result<Vec<T>> {
        let cached = self.law_paths(nu)?;
        let per_group = self.cfg.paths / self.cfg.law_groups;
        let width = f.width();
        let mut out = Vec::with_capacity(self.cfg.paths * width);
        for g in 0..self.cfg.law_groups {
            let built;
            let law = match &cached {
                Some(all) => &all[g],
                None => {
                    built = self.build_law_path(nu, g)?;
                    &built
                }
            };
            let rows = self.run_group(f, &start, law, g * per_group..(g + 1) * per_group)?;
            out.extend(rows);
        }
        if !all_finite(&out) {
            return Err(Error::Evaluation("Poisson integrand produced non-finite values".into()));
        }
        Ok(out)
    }

    fn run_group(
        &self,
        f: &Integrand<'_, T>,
        start: &(impl Fn(usize, &mut [T]) + Sync),
        law: &LawPath<T>,
        paths: std::ops::Range<usize>,
    ) -> Result<Vec<T>> {
        let width = f.width();
        let steps = self.steps;
        let h = T::of(self.cfg.h);
        let x = &self.x;
        let mu = &self.mu;
        let rows = tagged_run(
            &self.model,
            mu,
            law,
            steps,
            rng::derive_seed(self.cfg.seed, channel::TAGGED),
            paths,
            false,
            start,
            |_| (vec![T::zero(); width], vec![T::zero(); width]),
            |(acc, buf): &mut (Vec<T>, Vec<T>), k, y, nu| {
                if k < steps {
                    f.eval(x, mu, y, nu, buf);
                    for (a, &b) in acc.iter_mut().zip(buf.iter()) {
                        *a += h * b;
                    }
                }
            },
        )?;
        Ok(rows.into_iter().flat_map(|(acc, _)| acc).collect())
    }

    fn samples_from(&self, f: &Integrand<'_, T>, y: &[T], nu: &Ensemble<T>) -> Result<Vec<T>> {
        if y.len() != self.model.d2() {
            return Err(Error::Structural("start point dimension differs from d2".into()));
        }
        self.path_samples(f, |_, s| s.copy_from_slice(y), nu)
    }

    /// Row-major `groups × width` means of per-path samples.
    pub fn group_means(&self, samples: &[T], width: usize) -> Vec<T> {
        let groups = self.cfg.law_groups;
        let per = samples.len() / (groups * width);
        let mut out = vec![T::zero(); groups * width];
        for (p, row) in samples.chunks_exact(width).enumerate() {
            let g = p / per;
            for (o, &v) in out[g * width..(g + 1) * width].iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = T::of_usize(per);
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Mean and standard error over law groups.
    pub fn estimate_of(&self, samples: &[T], width: usize) -> Estimate<f64> {
        Estimate::from_samples(&self.group_means(samples, width), width).to_f64()
    }

    /// Group means of Φ̂(y, ν) for one component of f; the batch form
    /// consumed by [`apply_generator_l0`].
    pub fn phi_samples(&self, f: &Integrand<'_, T>, component: usize, y: &[T], nu: &Ensemble<T>) -> Result<Vec<T>> {
        let s = self.samples_from(f, y, nu)?;
        let w = f.width();
        Ok(self.group_means(&s, w).iter().skip(component).step_by(w).copied().collect())
    }

    fn finish(&self, samples: &[T], width: usize, y: &[T], f: &Integrand<'_, T>) -> Result<PoissonEstimate> {
        let centering = check_centering(&self.model, f, &self.x, &self.mu, &self.zeta, self.cfg.seed)?;
        Ok(PoissonEstimate {
            estimate: self.estimate_of(samples, width),
            truncation_bound: self.truncation_bound(y),
            centering_warning: !centering.is_centered(3.0),
        })
    }

    /// Φ̂(x, μ, y, ν) with its standard error.
    pub fn evaluate_phi(&self, f: &Integrand<'_, T>, y: &[T], nu: &Ensemble<T>) -> Result<PoissonEstimate> {
        let s = self.samples_from(f, y, nu)?;
        self.finish(&s, f.width(), y, f)
    }

    /// Central difference of Φ̂ in y_k with common random numbers.
    pub fn phi_derivative_y(&self, f: &Integrand<'_, T>, y: &[T], nu: &Ensemble<T>, k: usize) -> Result<PoissonEstimate> {
        if k >= self.model.d2() {
            return Err(Error::Usage(format!("direction {k} out of range")));
        }
        let h = T::of(self.cfg.fd_y);
        let mut yp = y.to_vec();
        yp[k] += h;
        let up = self.samples_from(f, &yp, nu)?;
        yp[k] = y[k] - h;
        let down = self.samples_from(f, &yp, nu)?;
        let d: Vec<T> = up.iter().zip(&down).map(|(&a, &b)| (a - b) / (T::of(2.0) * h)).collect();
        self.finish(&d, f.width(), y, f)
    }

    /// Central difference of Φ̂ in x_k, taken inside the integrand on a
    /// single set of paths (the tagged dynamics do not read x).
    pub fn phi_derivative_x(&self, f: &Integrand<'_, T>, y: &[T], nu: &Ensemble<T>, k: usize) -> Result<PoissonEstimate> {
        if k >= self.model.d1() {
            return Err(Error::Usage(format!("direction {k} out of range")));
        }
        let g = fd_x_integrand(f, k, T::of(self.cfg.fd_x));
        let s = self.samples_from(&g, y, nu)?;
        self.finish(&s, f.width(), y, f)
    }

    /// Lions finite difference N·(Φ̂(ν with z_i + h e_k) − Φ̂(ν))/h for each
    /// k, from re-simulated law paths with the same noise. Row-major
    /// d2 × width.
    pub fn phi_lions_derivative_nu(
        &self,
        f: &Integrand<'_, T>,
        y: &[T],
        nu: &Ensemble<T>,
        i: usize,
    ) -> Result<PoissonEstimate> {
        if i >= nu.count() {
            return Err(Error::Usage(format!("particle index {i} out of range ({})", nu.count())));
        }
        let w = f.width();
        let d2 = self.model.d2();
        let h = T::of(self.cfg.fd_nu.unwrap_or_else(|| default_lions_step(nu).as_f64()));
        let n = T::of_usize(nu.count());
        let base = self.samples_from(f, y, nu)?;
        let paths = self.cfg.paths;
        let mut out = vec![T::zero(); paths * d2 * w];
        for k in 0..d2 {
            let s = self.samples_from(f, y, &nu.with_particle_shifted(i, k, h))?;
            for p in 0..paths {
                for c in 0..w {
                    out[p * d2 * w + k * w + c] = n * (s[p * w + c] - base[p * w + c]) / h;
                }
            }
        }
        self.finish(&out, d2 * w, y, f)
    }

    /// ∫Φ̂(x, μ, y, ζ̂) ζ̂(dy), with tagged starts cycling over ζ̂'s particles.
    pub fn solution_centering(&self, f: &Integrand<'_, T>) -> Result<Estimate<f64>> {
        let zeta = &self.zeta.zeta;
        let s = self.path_samples(f, |p, y| y.copy_from_slice(zeta.particle(p % zeta.count())), zeta)?;
        Ok(self.estimate_of(&s, f.width()))
    }
}

/// (f(x + h e_k) − f(x − h e_k))/(2h) as an integrand.
pub fn fd_x_integrand<'a, T: Real>(f: &'a Integrand<'_, T>, k: usize, h: T) -> Integrand<'a, T> {
    let w = f.width();
    Integrand::new(w, move |x, mu, y, nu, out| {
        let mut xp = x.to_vec();
        let mut up = vec![T::zero(); w];
        xp[k] = x[k] + h;
        f.eval(&xp, mu, y, nu, &mut up);
        xp[k] = x[k] - h;
        f.eval(&xp, mu, y, nu, out);
        for (o, &u) in out.iter_mut().zip(&up) {
            *o = (u - *o) / (T::of(2.0) * h);
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CenteringCheck {
    pub value: Vec<f64>,
    /// Bootstrap standard error over particle resamples.
    pub std_error: Vec<f64>,
}

impl CenteringCheck {
    pub fn is_centered(&self, k: f64) -> bool {
        self.value.iter().zip(&self.std_error).all(|(v, s)| v.abs() <= k * s + 1e-12)
    }

    pub fn require(&self, k: f64) -> Result<()> {
        match self.value.iter().zip(&self.std_error).find(|(v, s)| v.abs() > k * **s + 1e-12) {
            None => Ok(()),
            Some((&value, &std_error)) => Err(Error::Centering { value, std_error }),
        }
    }
}

/// Bootstrap resamples used by [`check_centering`].
pub const CENTERING_RESAMPLES: usize = 200;

/// ∫ f(x, μ, y, ζ̂) ζ̂(dy) with a bootstrap standard error.
pub fn check_centering<T: Real>(
    model: &ModelSpec<T>,
    f: &Integrand<'_, T>,
    x: &[T],
    mu: &Ensemble<T>,
    zeta: &InvariantMeasureEstimate<T>,
    seed: u64,
) -> Result<CenteringCheck> {
    let _ = model;
    let z = &zeta.zeta;
    let w = f.width();
    let mut values = vec![T::zero(); z.count() * w];
    for (i, y) in z.iter().enumerate() {
        f.eval(x, mu, y, z, &mut values[i * w..(i + 1) * w]);
    }
    if !all_finite(&values) {
        return Err(Error::Evaluation("centering integrand non-finite".into()));
    }
    let n = z.count();
    let value: Vec<f64> = (0..w)
        .map(|c| (0..n).map(|i| values[i * w + c].as_f64()).sum::<f64>() / n as f64)
        .collect();
    let se = bootstrap_se(&values, w, CENTERING_RESAMPLES, rng::derive_seed(seed, channel::BOOTSTRAP));
    Ok(CenteringCheck { value, std_error: se.iter().map(|v| v.as_f64()).collect() })
}

/// Finite-difference steps of the generator application.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeneratorSteps {
    pub h_y: f64,
    /// Lions step; default 1e-4·(1 + RMS(ν)) when `None`.
    pub h_nu: Option<f64>,
    /// Step of the spatial difference nested inside the Lions estimator.
    pub h_z: f64,
}

impl Default for GeneratorSteps {
    fn default() -> Self {
        Self { h_y: 1e-3, h_nu: None, h_z: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneratorApplication {
    pub value: f64,
    pub std_error: f64,
    /// ½ tr(a ∂²_yφ)
    pub second_order_y: f64,
    /// b · ∂_yφ
    pub first_order_y: f64,
    /// ∫ [b · ∂_νφ + ½ tr(a ∂_z∂_νφ)] dν
    pub measure_term: f64,
}

/// Observable φ(y, ν) evaluated as a batch of B values sharing common random
/// numbers across calls (B = 1 for deterministic φ).
pub type BatchObservable<'a, T> = dyn Fn(&[T], &Ensemble<T>) -> Result<Vec<T>> + Sync + 'a;

/// L₀φ(y, ν) = ½ a ∂²_yφ + b·∂_yφ + ∫ [b(μ,z,ν)·∂_νφ(y,ν)(z) + ½ a(μ,z,ν)·∂_z∂_νφ(y,ν)(z)] ν(dz)
/// with a = σσᵀ, by finite differences. The measure integral is the
/// quadrature over ν's particles; ∂_νφ uses the Lions estimator and
/// ∂_z∂_νφ a central difference of it in z_i.
pub fn apply_generator_l0<T: Real>(
    model: &ModelSpec<T>,
    phi: &BatchObservable<'_, T>,
    mu: &Ensemble<T>,
    y: &[T],
    nu: &Ensemble<T>,
    steps: &GeneratorSteps,
) -> Result<GeneratorApplication> {
    let d2 = model.d2();
    if y.len() != d2 || nu.dim() != d2 {
        return Err(Error::Structural("generator arguments do not match d2".into()));
    }
    let c = model.coefficients();
    let eval = |y: &[T], nu: &Ensemble<T>| -> Result<Vec<f64>> {
        let v = phi(y, nu)?;
        if !all_finite(&v) {
            return Err(Error::Evaluation("observable non-finite in generator application".into()));
        }
        Ok(v.iter().map(|x| x.as_f64()).collect())
    };
    let base = eval(y, nu)?;
    let batch = base.len();
    let check = |v: &Vec<f64>| {
        if v.len() == batch {
            Ok(())
        } else {
            Err(Error::Structural("observable batch size changed between calls".into()))
        }
    };
    let mut a = vec![T::zero(); d2 * d2];
    let mut sig = vec![T::zero(); d2 * d2];
    let mut b = vec![T::zero(); d2];
    let diffusion = |z: &[T], sig: &mut Vec<T>, a: &mut Vec<T>| {
        c.fast_diffusion(mu, z, nu, sig);
        for i in 0..d2 {
            for j in 0..d2 {
                a[i * d2 + j] = (0..d2).map(|k| sig[i * d2 + k] * sig[j * d2 + k]).sum();
            }
        }
    };

    // y-derivatives.
    let hy = steps.h_y;
    let shifted = |da: usize, sa: f64, db: usize, sb: f64| -> Result<Vec<f64>> {
        let mut yp = y.to_vec();
        yp[da] += T::of(sa);
        yp[db] += T::of(sb);
        let v = eval(&yp, nu)?;
        check(&v)?;
        Ok(v)
    };
    let mut grad = vec![vec![0.0; batch]; d2];
    let mut hess = vec![vec![0.0; batch]; d2 * d2];
    for k in 0..d2 {
        let up = shifted(k, hy, k, 0.0)?;
        let down = shifted(k, -hy, k, 0.0)?;
        for s in 0..batch {
            grad[k][s] = (up[s] - down[s]) / (2.0 * hy);
            hess[k * d2 + k][s] = (up[s] - 2.0 * base[s] + down[s]) / (hy * hy);
        }
        for l in 0..k {
            let pp = shifted(k, hy, l, hy)?;
            let pm = shifted(k, hy, l, -hy)?;
            let mp = shifted(k, -hy, l, hy)?;
            let mm = shifted(k, -hy, l, -hy)?;
            for s in 0..batch {
                let v = (pp[s] - pm[s] - mp[s] + mm[s]) / (4.0 * hy * hy);
                hess[k * d2 + l][s] = v;
                hess[l * d2 + k][s] = v;
            }
        }
    }
    diffusion(y, &mut sig, &mut a);
    c.fast_drift(mu, y, nu, &mut b);
    let mut second = vec![0.0; batch];
    let mut first = vec![0.0; batch];
    for s in 0..batch {
        for i in 0..d2 {
            first[s] += b[i].as_f64() * grad[i][s];
            for j in 0..d2 {
                second[s] += 0.5 * a[i * d2 + j].as_f64() * hess[i * d2 + j][s];
            }
        }
    }

    // Measure term.
    let n = nu.count();
    let hnu = steps.h_nu.unwrap_or_else(|| default_lions_step(nu).as_f64());
    let hz = steps.h_z;
    let lions = |ens: &Ensemble<T>, at: &[f64], i: usize, k: usize| -> Result<Vec<f64>> {
        let up = eval(y, &ens.with_particle_shifted(i, k, T::of(hnu)))?;
        check(&up)?;
        Ok(up.iter().zip(at).map(|(u, b)| n as f64 * (u - b) / hnu).collect())
    };
    let mut measure = vec![0.0; batch];
    for i in 0..n {
        let z = nu.particle(i);
        c.fast_drift(mu, z, nu, &mut b);
        diffusion(z, &mut sig, &mut a);
        for k in 0..d2 {
            let d = lions(nu, &base, i, k)?;
            for s in 0..batch {
                measure[s] += b[k].as_f64() * d[s] / n as f64;
            }
            // ∂_{z_l} of the k-th Lions component, nested central difference.
            for l in 0..d2 {
                let a_kl = a[k * d2 + l].as_f64();
                if a_kl == 0.0 {
                    continue;
                }
                let plus = nu.with_particle_shifted(i, l, T::of(hz));
                let minus = nu.with_particle_shifted(i, l, T::of(-hz));
                let bp = eval(y, &plus)?;
                let bm = eval(y, &minus)?;
                let dp = lions(&plus, &bp, i, k)?;
                let dm = lions(&minus, &bm, i, k)?;
                for s in 0..batch {
                    measure[s] += 0.5 * a_kl * (dp[s] - dm[s]) / (2.0 * hz) / n as f64;
                }
            }
        }
    }

    let total: Vec<f64> = (0..batch).map(|s| second[s] + first[s] + measure[s]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std_error = if batch > 1 {
        let m = mean(&total);
        (total.iter().map(|t| (t - m).powi(2)).sum::<f64>() / ((batch - 1) * batch) as f64).sqrt()
    } else {
        0.0
    };
    let (p2, p1, pm) = (mean(&second), mean(&first), mean(&measure));
    Ok(GeneratorApplication { value: p2 + p1 + pm, std_error, second_order_y: p2, first_order_y: p1, measure_term: pm })
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualRecord {
    pub schema_version: u32,
    pub probe: usize,
    pub y: Vec<f64>,
    pub nu_mean: Vec<f64>,
    /// L₀Φ + f at the probe.
    pub residual: f64,
    pub std_error: f64,
    pub generator: GeneratorApplication,
    pub f_value: f64,
    /// SE plus the pointwise truncation bound Ĉ(1 + |y|)e^{−λ̂T∞} (Monte
    /// Carlo source only).
    pub error_budget: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub schema_version: u32,
    pub records: Vec<ResidualRecord>,
    pub max_abs: f64,
    pub rms: f64,
    /// Largest per-probe standard error.
    pub max_std_error: f64,
    pub max_error_budget: f64,
}

/// Solution used for the residual check.
pub enum SolutionSource<'a, T: Real> {
    /// Closed form φ(y, ν).
    Analytic(&'a (dyn Fn(&[T], &Ensemble<T>) -> T + Sync)),
    /// Monte Carlo Φ̂ from the evaluator, per-path batches.
    MonteCarlo,
}

/// L₀Φ + f at each probe (component `component` of f).
pub fn poisson_residual<T: Real>(
    ev: &PoissonEvaluator<T>,
    f: &Integrand<'_, T>,
    component: usize,
    probes: &[(Vec<T>, Ensemble<T>)],
    source: &SolutionSource<'_, T>,
    steps: &GeneratorSteps,
) -> Result<ResidualReport> {
    if component >= f.width() {
        return Err(Error::Usage("component out of range".into()));
    }
    let mut records = Vec::with_capacity(probes.len());
    for (p, (y, nu)) in probes.iter().enumerate() {
        let (g, tail) = match source {
            SolutionSource::Analytic(phi) => {
                let obs = |y: &[T], nu: &Ensemble<T>| Ok(vec![phi(y, nu)]);
                (apply_generator_l0(ev.model(), &obs, ev.mu(), y, nu, steps)?, 0.0)
            }
            SolutionSource::MonteCarlo => {
                let obs = |y: &[T], nu: &Ensemble<T>| ev.phi_samples(f, component, y, nu);
                let rate = ev.zeta().diagnostics.fitted_rate.max(1e-12);
                (apply_generator_l0(ev.model(), &obs, ev.mu(), y, nu, steps)?, ev.truncation_bound(y) * rate)
            }
        };
        let mut fv = vec![T::zero(); f.width()];
        f.eval(ev.x(), ev.mu(), y, nu, &mut fv);
        let fval = fv[component].as_f64();
        records.push(ResidualRecord {
            schema_version: SCHEMA_VERSION,
            probe: p,
            y: y.iter().map(|v| v.as_f64()).collect(),
            nu_mean: nu.mean().iter().map(|v| v.as_f64()).collect(),
            residual: g.value + fval,
            std_error: g.std_error,
            error_budget: g.std_error + tail,
            generator: g,
            f_value: fval,
        });
    }
    let max_abs = records.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    let rms = (records.iter().map(|r| r.residual.powi(2)).sum::<f64>() / records.len().max(1) as f64).sqrt();
    let max_std_error = records.iter().map(|r| r.std_error).fold(0.0, f64::max);
    let max_error_budget = records.iter().map(|r| r.error_budget).fold(0.0, f64::max);
    Ok(ResidualReport { schema_version: SCHEMA_VERSION, records, max_abs, rms, max_std_error, max_error_budget })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_linear_model;

    fn linear() -> ModelSpec {
        builtin_linear_model(2.0, 1.0, 2.0, 2f64.sqrt()).unwrap()
    }

    #[test]
    fn generator_of_constant_is_zero() {
        let m = linear();
        let obs = |_: &[f64], _: &Ensemble| Ok(vec![4.0]);
        let nu = Ensemble::from_scalars(&[0.5, -1.0]).unwrap();
        let g = apply_generator_l0(&m, &obs, &Ensemble::point(&[0.0]).unwrap(), &[0.3], &nu, &GeneratorSteps::default()).unwrap();
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn generator_of_mean_at_dirac() {
        let m = linear();
        let obs = |_: &[f64], nu: &Ensemble| Ok(vec![nu.mean()[0]]);
        for z in [-1.5, 0.0, 2.0] {
            let nu = Ensemble::point(&[z]).unwrap();
            let g = apply_generator_l0(&m, &obs, &Ensemble::point(&[0.0]).unwrap(), &[0.7], &nu, &GeneratorSteps::default())
                .unwrap();
            assert!((g.value + z).abs() < 1e-8, "{g:?}");
            assert!((g.value - (g.second_order_y + g.first_order_y + g.measure_term)).abs() <= 1e-12 * (1.0 + g.value.abs()));
        }
    }

    #[test]
    fn generator_of_analytic_solution_is_minus_h() {
        let m = linear();
        let p = *m.linear_params().unwrap();
        let obs = move |y: &[f64], nu: &Ensemble| Ok(vec![p.phi(y[0], nu.mean()[0])]);
        let nu = Ensemble::from_scalars(&[0.4, -0.9, 1.7]).unwrap();
        for y in [-2.0, 0.0, 1.3] {
            let g = apply_generator_l0(&m, &obs, &Ensemble::point(&[0.0]).unwrap(), &[y], &nu, &GeneratorSteps::default())
                .unwrap();
            assert!((g.value + y).abs() < 1e-6, "{g:?}");
        }
    }

    #[test]
    fn horizon_rule() {
        assert!((automatic_horizon(1.0, 1.0, 1e-3) - 1e3f64.ln() / 0.8).abs() < 1e-12);
        assert_eq!(automatic_horizon(1.0, 1e-6, 1e-3), 50.0);
        assert_eq!(automatic_horizon(1.0, 100.0, 1e-3), 1.0);
    }
}
