//! Averaged and corrected coefficients of the homogenized McKean–Vlasov
//! limit, and an N-particle simulator for it.
//!
//! With ζ = ζ^μ the invariant law of the frozen equation and Φ the Poisson
//! solution of L₀Φ = −H,
//!
//! ```text
//! dX̄ = [F̄ + H·∂ₓΦ‾ + c·∂_yΦ‾ + Ẽ c·∂_νΦ‾‾(X̄, L(X̄))(X̃)] dt + √(GG*‾ + 2 H·Φ‾) dW.
//! ```
//!
//! Terms that need Φ are estimated per tagged path: path p starts at the
//! ζ̂ particle y_p, so a product like H(y_p)·∫₀^{T∞} H(Y_t) dt is an unbiased
//! sample of ∫H·Φ dζ. Standard errors come from the law groups of the
//! Poisson evaluator.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{estimate_invariant, InitialLaw, InvariantConfig, InvariantMeasureEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::{default_lions_step, Ensemble};
use crate::model::{ModelKind, ModelSpec};
use crate::poisson::{fd_x_integrand, Integrand, PoissonConfig, PoissonEvaluator, SCHEMA_VERSION};
use crate::rng::{self, channel};
use crate::scalar::{all_finite, Real};
use crate::stats::{bootstrap_se, Estimate};

/// Relative PSD tolerance of the effective diffusion (scaled by the trace).
pub const DEFAULT_PSD_TOL: f64 = 1e-8;

/// Principal square root of (A + Aᵀ)/2. Eigenvalues in [−tol, 0) are
/// clipped to zero; a more negative one is a [`Error::NotPsd`].
pub fn effective_diffusion_sqrt(a: &[f64], n: usize, tol: f64) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::Structural(format!("expected a {n}x{n} matrix, got {} entries", a.len())));
    }
    linalg::psd_sqrt(&linalg::symmetrize(a, n), n, tol)
}

/// Frobenius norm of the antisymmetric part (A − Aᵀ)/2.
pub fn asymmetry(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += (0.5 * (a[i * n + j] - a[j * n + i])).powi(2);
        }
    }
    s.sqrt()
}

#[derive(Clone, Debug)]
pub struct HomogenizeConfig {
    /// Particles of the frozen run that produces ζ̂.
    pub zeta_particles: usize,
    /// Start of the frozen run.
    pub zeta_init: InitialLaw,
    pub invariant: InvariantConfig,
    pub poisson: PoissonConfig,
    /// ζ̂ particles whose Lions derivative enters the c·∂_νΦ term.
    pub lions_nodes: usize,
    pub psd_tol: f64,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for HomogenizeConfig {
    fn default() -> Self {
        Self {
            zeta_particles: 10_000,
            zeta_init: InitialLaw::Point(vec![0.0]),
            invariant: InvariantConfig { max_t: 20.0, h: 0.01, ..Default::default() },
            poisson: PoissonConfig::default(),
            lions_nodes: 8,
            psd_tol: DEFAULT_PSD_TOL,
            bootstrap_resamples: 200,
            seed: 0,
        }
    }
}

/// x̃ ↦ ∫∫ c(x̃, μ, ỹ, ζ)·∂_νΦ(x, μ, y, ζ)(ỹ) ζ(dỹ) ζ(dy), stored as the
/// y-averaged Lions derivatives at a set of ζ̂ nodes.
#[derive(Clone, Debug, Serialize)]
pub struct CnuField {
    pub d1: usize,
    pub d2: usize,
    pub nodes: Vec<Vec<f64>>,
    /// Per node, row-major d2 × d1: entry (k, i) ≈ ∫∂_{ν}Φ_i(y)(z)_k ζ(dy).
    pub derivatives: Vec<Estimate<f64>>,
}

impl CnuField {
    pub fn zero(d1: usize, d2: usize) -> Self {
        Self { d1, d2, nodes: vec![], derivatives: vec![] }
    }

    pub fn is_zero(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Double-bar value given c at each node: `forcing(z, out)` writes
    /// c(x̃, μ, z, ζ) ∈ R^{d2}.
    pub fn evaluate(&self, mut forcing: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
        let mut out = vec![0.0; self.d1];
        if self.nodes.is_empty() {
            return out;
        }
        let mut c = vec![0.0; self.d2];
        for (z, d) in self.nodes.iter().zip(&self.derivatives) {
            forcing(z, &mut c);
            for k in 0..self.d2 {
                for i in 0..self.d1 {
                    out[i] += c[k] * d.value[k * self.d1 + i];
                }
            }
        }
        let k = self.nodes.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

/// Φ-dependent averages at one (x, μ).
#[derive(Clone, Debug, Serialize)]
pub struct PoissonAverages {
    /// Row-major d1 × d1, entry (i, j) = ∫ H_i Φ_j dζ.
    pub h_phi: Estimate<f64>,
    /// Σ_j ∫ H_j ∂_{x_j}Φ dζ.
    pub h_dx_phi: Estimate<f64>,
    /// Σ_k ∫ c_k ∂_{y_k}Φ dζ.
    pub c_dy_phi: Estimate<f64>,
    /// Row-major d2 × d1, entry (k, i) = ∫ ∂_{y_k}Φ_i dζ. Zero when c ≡ 0.
    pub dy_phi: Estimate<f64>,
    pub c_nu: CnuField,
    pub horizon: f64,
    pub truncation_bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffusionSq {
    /// GG*‾ + 2 H·Φ‾, row-major d1 × d1, before symmetrization.
    pub matrix: Estimate<f64>,
    pub gg: Estimate<f64>,
    /// Norm of the antisymmetric part removed before the square root.
    pub asymmetry: f64,
    pub eigenvalues: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrectionDrifts {
    pub h_dx_phi: Estimate<f64>,
    pub c_dy_phi: Estimate<f64>,
    pub c_nu: CnuField,
}

type ZetaCache<T> = Mutex<BTreeMap<Vec<i64>, Arc<InvariantMeasureEstimate<T>>>>;
type PieceCache = Mutex<BTreeMap<Vec<i64>, Arc<PoissonAverages>>>;

/// Forcing as a function of (x̃, μ, y, ν).
pub type ForcingFn<'a, T> = dyn Fn(&[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]) + Sync + 'a;

/// Providers of ζ̂^μ and of the Φ-dependent averages, with caches.
pub struct HomogenizedModel<T: Real = f64> {
    model: ModelSpec<T>,
    cfg: HomogenizeConfig,
    zeta_cache: ZetaCache<T>,
    piece_cache: PieceCache,
}

fn summary_key<T: Real>(mu: &Ensemble<T>) -> Vec<i64> {
    let mut key: Vec<i64> = mu.mean().iter().map(|v| v.as_f64().to_bits() as i64).collect();
    key.extend(mu.covariance().iter().map(|v| v.as_f64().to_bits() as i64));
    key
}

impl<T: Real> HomogenizedModel<T> {
    pub fn new(model: &ModelSpec<T>, cfg: HomogenizeConfig) -> Result<Self> {
        if cfg.zeta_init.dim() != model.d2() {
            return Err(Error::Structural("zeta_init dimension differs from d2".into()));
        }
        if cfg.zeta_particles < 2 || cfg.lions_nodes == 0 {
            return Err(Error::Usage("zeta_particles ≥ 2 and lions_nodes ≥ 1 required".into()));
        }
        Ok(Self { model: model.clone(), cfg, zeta_cache: Mutex::new(BTreeMap::new()), piece_cache: Mutex::new(BTreeMap::new()) })
    }

    pub fn model(&self) -> &ModelSpec<T> {
        &self.model
    }

    pub fn config(&self) -> &HomogenizeConfig {
        &self.cfg
    }

    /// ζ̂^μ, built once per μ (once overall when b and σ ignore μ).
    pub fn zeta(&self, mu: &Ensemble<T>) -> Result<Arc<InvariantMeasureEstimate<T>>> {
        let key = if self.model.structure.fast_reads_slow_law { summary_key(mu) } else { vec![] };
        if let Some(z) = self.zeta_cache.lock().unwrap().get(&key) {
            return Ok(z.clone());
        }
        let nu0 = self.cfg.zeta_init.sample::<T>(self.cfg.zeta_particles, self.cfg.seed, channel::INITIAL_FAST)?;
        let icfg = InvariantConfig { seed: rng::derive_seed(self.cfg.seed, channel::FROZEN), ..self.cfg.invariant.clone() };
        let z = Arc::new(estimate_invariant(&self.model, mu, &nu0, &icfg)?);
        self.zeta_cache.lock().unwrap().insert(key, z.clone());
        Ok(z)
    }

    /// Uses `zeta` as ζ̂^μ instead of running the frozen equation.
    pub fn insert_zeta(&self, mu: &Ensemble<T>, zeta: InvariantMeasureEstimate<T>) {
        let key = if self.model.structure.fast_reads_slow_law { summary_key(mu) } else { vec![] };
        self.zeta_cache.lock().unwrap().insert(key, Arc::new(zeta));
    }

    fn converged_zeta(&self, mu: &Ensemble<T>) -> Result<Arc<InvariantMeasureEstimate<T>>> {
        let z = self.zeta(mu)?;
        z.require_converged()?;
        Ok(z)
    }

    fn check_slow(&self, x: &[T], mu: &Ensemble<T>) -> Result<()> {
        if x.len() != self.model.d1() || mu.dim() != self.model.d1() {
            return Err(Error::Structural("slow point dimension differs from d1".into()));
        }
        Ok(())
    }

    fn quadrature_estimate(
        &self,
        zeta: &Ensemble<T>,
        width: usize,
        eval: impl Fn(&[T], &mut [T]) + Sync,
    ) -> Result<Estimate<f64>> {
        if !self.model.structure.slow_reads_fast {
            let mut out = vec![T::zero(); width];
            eval(zeta.particle(0), &mut out);
            if !all_finite(&out) {
                return Err(Error::Evaluation("averaged coefficient is non-finite".into()));
            }
            return Ok(Estimate::exact(out.iter().map(|v| v.as_f64()).collect()));
        }
        let n = zeta.count();
        let mut values = vec![T::zero(); n * width];
        values.par_chunks_mut(width).zip(zeta.particles().par_chunks(zeta.dim())).for_each(|(out, y)| eval(y, out));
        if !all_finite(&values) {
            return Err(Error::Evaluation("averaged coefficient is non-finite".into()));
        }
        let value: Vec<f64> = (0..width)
            .map(|c| (0..n).map(|i| values[i * width + c].as_f64()).sum::<f64>() / n as f64)
            .collect();
        let se = bootstrap_se(
            &values,
            width,
            self.cfg.bootstrap_resamples,
            rng::derive_seed(self.cfg.seed, channel::BOOTSTRAP),
        );
        Ok(Estimate { value, std_error: se.iter().map(|v| v.as_f64()).collect() })
    }

    /// F̄(x, μ) = ∫F(x, μ, y, ζ) ζ(dy).
    pub fn averaged_drift(&self, x: &[T], mu: &Ensemble<T>) -> Result<Estimate<f64>> {
        self.check_slow(x, mu)?;
        let z = self.converged_zeta(mu)?;
        let c = self.model.coefficients();
        self.quadrature_estimate(&z.zeta, self.model.d1(), |y, out| c.slow_drift(x, mu, y, &z.zeta, out))
    }

    /// ∫GG*(x, μ, y, ζ) ζ(dy), row-major d1 × d1.
    pub fn averaged_gg(&self, x: &[T], mu: &Ensemble<T>) -> Result<Estimate<f64>> {
        self.check_slow(x, mu)?;
        let z = self.converged_zeta(mu)?;
        let c = self.model.coefficients();
        let d1 = self.model.d1();
        self.quadrature_estimate(&z.zeta, d1 * d1, |y, out| {
            let mut g = vec![T::zero(); d1 * d1];
            c.slow_diffusion(x, mu, y, &z.zeta, &mut g);
            out.copy_from_slice(&linalg::outer_self(&g, d1));
        })
    }

    /// Model forcing c(x̃, μ, y, ν).
    pub fn forcing(&self) -> impl Fn(&[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]) + Sync + '_ {
        let c = self.model.coefficients();
        move |xt, mu, y, nu, out| c.fast_forcing(xt, mu, y, nu, out)
    }

    /// Φ-dependent averages at (x, μ) for the model forcing.
    pub fn poisson_averages(&self, x: &[T], mu: &Ensemble<T>) -> Result<PoissonAverages> {
        let forcing = self.forcing();
        let with_c = !self.model.structure.forcing_vanishes;
        self.poisson_averages_with(x, mu, &forcing, with_c)
    }

    /// Φ-dependent averages with an arbitrary forcing in place of c.
    pub fn poisson_averages_with(
        &self,
        x: &[T],
        mu: &Ensemble<T>,
        forcing: &ForcingFn<'_, T>,
        with_c: bool,
    ) -> Result<PoissonAverages> {
        self.check_slow(x, mu)?;
        let zeta = self.converged_zeta(mu)?;
        let (d1, d2) = (self.model.d1(), self.model.d2());
        let pcfg = PoissonConfig { seed: rng::derive_seed(self.cfg.seed, channel::TAGGED), ..self.cfg.poisson.clone() };
        let ev = PoissonEvaluator::new(&self.model, x, mu, (*zeta).clone(), pcfg)?;
        let starts = &zeta.zeta;
        let n_start = starts.count();
        let nu = starts.head(self.cfg.poisson.law_particles.min(n_start));
        let start = |p: usize, y: &mut [T]| y.copy_from_slice(starts.particle(p % n_start));
        let paths = self.cfg.poisson.paths;
        let with_dx = self.model.structure.singular_reads_slow;
        let h_int = Integrand::singular_drift(&self.model);
        let fdx = T::of(self.cfg.poisson.fd_x);

        // Path integrals of H and, when H reads x, of ∂ₓH.
        let width = d1 + if with_dx { d1 * d1 } else { 0 };
        let combined = Integrand::new(width, |x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]| {
            h_int.eval(x, mu, y, nu, &mut out[..d1]);
            if with_dx {
                for j in 0..d1 {
                    let g = fd_x_integrand(&h_int, j, fdx);
                    g.eval(x, mu, y, nu, &mut out[d1 + j * d1..d1 + (j + 1) * d1]);
                }
            }
        });
        let base = ev.path_samples(&combined, start, &nu)?;
        let c_api = self.model.coefficients();
        let h_at = |p: usize| {
            let mut h = vec![T::zero(); d1];
            c_api.singular_drift(x, mu, starts.particle(p % n_start), &nu, &mut h);
            h
        };
        let mut hphi = vec![T::zero(); paths * d1 * d1];
        let mut hdx = vec![T::zero(); paths * d1];
        for p in 0..paths {
            let h = h_at(p);
            let row = &base[p * width..(p + 1) * width];
            for i in 0..d1 {
                for j in 0..d1 {
                    hphi[p * d1 * d1 + i * d1 + j] = h[i] * row[j];
                }
                if with_dx {
                    hdx[p * d1 + i] = (0..d1).map(|j| h[j] * row[d1 + j * d1 + i]).fold(T::zero(), |a, b| a + b);
                }
            }
        }
        let h_phi = ev.estimate_of(&hphi, d1 * d1);
        let h_dx_phi = if with_dx { ev.estimate_of(&hdx, d1) } else { Estimate::exact(vec![0.0; d1]) };

        let (c_dy_phi, dy_phi, c_nu) = if with_c {
            // c·∂_yΦ by central differences with common starts and noise.
            let hy = T::of(self.cfg.poisson.fd_y);
            let mut cdy = vec![T::zero(); paths * d1];
            let mut dy = vec![T::zero(); paths * d2 * d1];
            let mut c = vec![T::zero(); d2];
            for k in 0..d2 {
                let shifted = |sign: T| {
                    ev.path_samples(
                        &h_int,
                        |p, y| {
                            y.copy_from_slice(starts.particle(p % n_start));
                            y[k] += sign * hy;
                        },
                        &nu,
                    )
                };
                let up = shifted(T::one())?;
                let down = shifted(-T::one())?;
                for p in 0..paths {
                    forcing(x, mu, starts.particle(p % n_start), &nu, &mut c);
                    for i in 0..d1 {
                        let g = (up[p * d1 + i] - down[p * d1 + i]) / (T::of(2.0) * hy);
                        dy[p * d2 * d1 + k * d1 + i] = g;
                        cdy[p * d1 + i] += c[k] * g;
                    }
                }
            }
            // Lions derivatives at a spread of nodes of the law argument.
            let n = nu.count();
            let nodes = self.cfg.lions_nodes.min(n);
            let hnu = T::of(self.cfg.poisson.fd_nu.unwrap_or_else(|| default_lions_step(&nu).as_f64()));
            let plain: Vec<T> = base.chunks_exact(width).flat_map(|r| r[..d1].to_vec()).collect();
            let mut field = CnuField::zero(d1, d2);
            for j in 0..nodes {
                let idx = j * n / nodes;
                let mut d = vec![T::zero(); paths * d2 * d1];
                for k in 0..d2 {
                    let s = ev.path_samples(&h_int, start, &nu.with_particle_shifted(idx, k, hnu))?;
                    for p in 0..paths {
                        for i in 0..d1 {
                            d[p * d2 * d1 + k * d1 + i] = T::of_usize(n) * (s[p * d1 + i] - plain[p * d1 + i]) / hnu;
                        }
                    }
                }
                field.nodes.push(nu.particle(idx).iter().map(|v| v.as_f64()).collect());
                field.derivatives.push(ev.estimate_of(&d, d2 * d1));
            }
            (ev.estimate_of(&cdy, d1), ev.estimate_of(&dy, d2 * d1), field)
        } else {
            (Estimate::exact(vec![0.0; d1]), Estimate::exact(vec![0.0; d2 * d1]), CnuField::zero(d1, d2))
        };
        let y0 = vec![T::zero(); d2];
        Ok(PoissonAverages {
            h_phi,
            h_dx_phi,
            c_dy_phi,
            dy_phi,
            c_nu,
            horizon: ev.horizon(),
            truncation_bound: ev.truncation_bound(&y0),
        })
    }

    /// Cached [`Self::poisson_averages`]; `key` identifies the slow point.
    fn cached_averages(&self, key: Vec<i64>, x: &[T], mu: &Ensemble<T>) -> Result<Arc<PoissonAverages>> {
        if let Some(p) = self.piece_cache.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(self.poisson_averages(x, mu)?);
        self.piece_cache.lock().unwrap().insert(key, p.clone());
        Ok(p)
    }

    fn diffusion_from(&self, gg: Estimate<f64>, h_phi: &Estimate<f64>) -> Result<DiffusionSq> {
        let d1 = self.model.d1();
        let value: Vec<f64> = gg.value.iter().zip(&h_phi.value).map(|(g, h)| g + 2.0 * h).collect();
        let std_error: Vec<f64> =
            gg.std_error.iter().zip(&h_phi.std_error).map(|(g, h)| (g * g + 4.0 * h * h).sqrt()).collect();
        let sym = linalg::symmetrize(&value, d1);
        let (eigenvalues, _) = linalg::sym_eigen(&sym, d1);
        let trace: f64 = (0..d1).map(|i| sym[i * d1 + i]).sum();
        let tol = self.cfg.psd_tol * trace.abs().max(f64::MIN_POSITIVE);
        if eigenvalues.iter().any(|&l| l < -tol) {
            return Err(Error::NotPsd { eigenvalues });
        }
        Ok(DiffusionSq { asymmetry: asymmetry(&value, d1), matrix: Estimate { value, std_error }, gg, eigenvalues })
    }

    /// GG*‾ + 2 H·Φ‾ with a PSD check after symmetrization.
    pub fn averaged_diffusion_sq(&self, x: &[T], mu: &Ensemble<T>) -> Result<DiffusionSq> {
        let gg = self.averaged_gg(x, mu)?;
        let pieces = self.poisson_averages(x, mu)?;
        self.diffusion_from(gg, &pieces.h_phi)
    }

    /// The three correction drifts at (x, μ).
    pub fn correction_drifts(&self, x: &[T], mu: &Ensemble<T>) -> Result<CorrectionDrifts> {
        let p = self.poisson_averages(x, mu)?;
        Ok(CorrectionDrifts { h_dx_phi: p.h_dx_phi, c_dy_phi: p.c_dy_phi, c_nu: p.c_nu })
    }

    /// N-particle Euler–Maruyama run of the limit equation.
    pub fn simulate_limit(&self, xi: &Ensemble<T>, t_end: f64, cfg: &LimitConfig) -> Result<LimitTrajectory<T>> {
        simulate_limit(self, xi, t_end, cfg)
    }

    /// Ẽ_{x̃∼μ} of the double-bar Lions term, forcing averaged over μ.
    fn lions_correction(&self, field: &CnuField, mu: &Ensemble<T>) -> Result<Estimate<f64>> {
        let d1 = self.model.d1();
        if field.is_zero() {
            return Ok(Estimate::exact(vec![0.0; d1]));
        }
        let z = self.converged_zeta(mu)?;
        let nu = z.zeta.head(self.cfg.poisson.law_particles.min(z.zeta.count()));
        let c_api = self.model.coefficients();
        let members: Vec<&[T]> =
            if self.model.structure.forcing_reads_slow { mu.iter().collect() } else { vec![mu.particle(0)] };
        let d2 = self.model.d2();
        let c_at = |node: &[f64]| -> Vec<f64> {
            let zt: Vec<T> = node.iter().map(|&v| T::of(v)).collect();
            let mut acc = vec![0.0; d2];
            let mut c = vec![T::zero(); d2];
            for xl in &members {
                c_api.fast_forcing(xl, mu, &zt, &nu, &mut c);
                acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v.as_f64());
            }
            acc.iter_mut().for_each(|a| *a /= members.len() as f64);
            acc
        };
        let value = field.evaluate(|node, out| out.copy_from_slice(&c_at(node)));
        let mut var = vec![0.0; d1];
        for (node, d) in field.nodes.iter().zip(&field.derivatives) {
            let c = c_at(node);
            for k in 0..d2 {
                for i in 0..d1 {
                    var[i] += (c[k] * d.std_error[k * d1 + i]).powi(2);
                }
            }
        }
        let k = field.nodes.len() as f64;
        Ok(Estimate { value, std_error: var.iter().map(|v| v.sqrt() / k).collect() })
    }

    /// Coefficient table at the given slow points (μ fixed).
    pub fn coefficient_table(&self, xs: &[Vec<T>], mu: &Ensemble<T>) -> Result<Vec<CoefficientRow>> {
        let s = &self.model.structure;
        let with_c = !s.forcing_vanishes;
        let factored = with_c && !s.forcing_reads_fast;
        let key_x = s.singular_reads_slow || (with_c && s.forcing_reads_slow && s.forcing_reads_fast);
        let key_mu = s.fast_reads_slow_law || key_x;
        let d1 = self.model.d1();
        let mut rows = Vec::new();
        for x in xs {
            let f = self.averaged_drift(x, mu)?;
            let gg = self.averaged_gg(x, mu)?;
            // Exact-value keys, kept apart from the lattice keys of the limit run.
            let mut key: Vec<i64> = if key_mu { vec![-1] } else { vec![] };
            if key_mu {
                key.extend(summary_key(mu));
            }
            if key_x {
                key.extend(x.iter().map(|v| v.as_f64().to_bits() as i64));
            }
            let x_at: Vec<T> = if key_x { x.clone() } else { vec![T::zero(); d1] };
            let mut p = (*self.cached_averages(key, &x_at, mu)?).clone();
            if factored {
                let z = self.converged_zeta(mu)?;
                let mut c = vec![T::zero(); self.model.d2()];
                self.model.coefficients().fast_forcing(x, mu, z.zeta.particle(0), &z.zeta, &mut c);
                for i in 0..d1 {
                    let (mut v, mut se2) = (0.0, 0.0);
                    for (k, ck) in c.iter().enumerate() {
                        v += ck.as_f64() * p.dy_phi.value[k * d1 + i];
                        se2 += (ck.as_f64() * p.dy_phi.std_error[k * d1 + i]).powi(2);
                    }
                    p.c_dy_phi.value[i] = v;
                    p.c_dy_phi.std_error[i] = se2.sqrt();
                }
            }
            let diff = self.diffusion_from(gg, &p.h_phi)?;
            let c_nu = self.lions_correction(&p.c_nu, mu)?;
            let xf: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
            let mut push = |name: &str, e: &Estimate<f64>| {
                for (c, (&v, &s)) in e.value.iter().zip(&e.std_error).enumerate() {
                    rows.push(CoefficientRow { x: xf.clone(), coefficient: format!("{name}[{c}]"), value: v, std_error: s });
                }
            };
            push("F_bar", &f);
            push("H_dx_Phi", &p.h_dx_phi);
            push("c_dy_Phi", &p.c_dy_phi);
            push("H_Phi", &p.h_phi);
            push("c_nu_bar", &c_nu);
            push("diffusion_sq", &diff.matrix);
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoefficientRow {
    pub x: Vec<f64>,
    pub coefficient: String,
    pub value: f64,
    pub std_error: f64,
}

/// CSV with columns x0..x{d1-1}, coefficient, value, std_error.
pub fn write_coefficient_csv(rows: &[CoefficientRow], mut w: impl Write) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.x.len());
    let head: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}{}coefficient,value,std_error", head.join(","), if d > 0 { "," } else { "" })?;
    for r in rows {
        let xs: Vec<String> = r.x.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}{}{},{:e},{:e}", xs.join(","), if d > 0 { "," } else { "" }, r.coefficient, r.value, r.std_error)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitConfig {
    pub h: f64,
    pub seed: u64,
    pub output_every: usize,
    /// Lattice spacing of the slow point in the cache key of the
    /// Φ-dependent terms; 0 keys on the exact value.
    pub x_spacing: f64,
    /// Lattice spacing of mean and covariance of μ̂ in the cache key; 0 keys
    /// on the exact values.
    pub mu_spacing: f64,
    /// Steps between refreshes of the μ̂ part of the key.
    pub refresh_every: usize,
    /// ζ̂ particles used for the per-step quadratures of F and GG*
    /// (all of them when `None`).
    pub quadrature_nodes: Option<usize>,
    pub zero_noise: bool,
    /// Keep full ensembles at output times.
    pub keep_snapshots: bool,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self {
            h: 0.01,
            seed: 0,
            output_every: 10,
            x_spacing: 0.25,
            mu_spacing: 0.25,
            refresh_every: 10,
            quadrature_nodes: Some(256),
            zero_noise: false,
            keep_snapshots: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitSummary {
    pub t: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl LimitSummary {
    pub fn of<T: Real>(t: f64, e: &Ensemble<T>) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Self { t, mean: f(e.mean()), variance: f(&e.variance()), second_moment: f(&e.second_moment()) }
    }
}

#[derive(Clone, Debug)]
pub struct LimitTrajectory<T: Real = f64> {
    pub summaries: Vec<LimitSummary>,
    /// Ensembles at output times, when requested.
    pub snapshots: Vec<Ensemble<T>>,
    pub final_state: Ensemble<T>,
    /// Distinct cache entries of Φ-dependent terms that were built.
    pub cache_entries: usize,
}

fn quantize(v: f64, spacing: f64) -> i64 {
    if spacing > 0.0 {
        (v / spacing).round() as i64
    } else {
        v.to_bits() as i64
    }
}

fn dequantize(k: i64, spacing: f64) -> f64 {
    if spacing > 0.0 {
        k as f64 * spacing
    } else {
        f64::from_bits(k as u64)
    }
}

fn simulate_limit<T: Real>(
    hm: &HomogenizedModel<T>,
    xi: &Ensemble<T>,
    t_end: f64,
    cfg: &LimitConfig,
) -> Result<LimitTrajectory<T>> {
    let model = &hm.model;
    let s = model.structure;
    let d1 = model.d1();
    if xi.dim() != d1 {
        return Err(Error::Structural("initial ensemble dimension differs from d1".into()));
    }
    if !(cfg.h > 0.0) || !(t_end >= 0.0) {
        return Err(Error::Usage("limit step must be positive and horizon nonnegative".into()));
    }
    let steps = (t_end / cfg.h).ceil() as usize;
    let h = if steps == 0 { cfg.h } else { t_end / steps as f64 };
    let every = cfg.output_every.max(1);
    let refresh = cfg.refresh_every.max(1);
    let with_c = !s.forcing_vanishes;
    // When c ignores (y, ν), c·∂_yΦ‾ = c(x, μ)·∫∂_yΦ dζ and only the
    // average needs caching.
    let factored = with_c && !s.forcing_reads_fast;
    let key_x = s.singular_reads_slow || (with_c && s.forcing_reads_slow && s.forcing_reads_fast);
    let key_mu = s.fast_reads_slow_law || key_x;
    let c_api = model.coefficients();
    let n = xi.count();
    let mut rngs = rng::streams(cfg.seed, channel::LIMIT, n);
    let mut state = xi.clone();
    let mut summaries = vec![LimitSummary::of(0.0, &state)];
    let mut snapshots = if cfg.keep_snapshots { vec![state.clone()] } else { vec![] };
    let ht = T::of(h);
    let sqrt_h = ht.sqrt();
    let mut mu_key: Vec<i64> = vec![];
    let mut built = std::collections::BTreeSet::new();

    for step in 0..steps {
        let mu = &state;
        let zeta = hm.converged_zeta(mu)?;
        let quad = match cfg.quadrature_nodes {
            Some(k) => zeta.zeta.head(k.min(zeta.zeta.count())),
            None => zeta.zeta.clone(),
        };
        if step % refresh == 0 {
            mu_key = if key_mu {
                mu.mean()
                    .iter()
                    .chain(mu.covariance().iter())
                    .map(|v| quantize(v.as_f64(), cfg.mu_spacing))
                    .collect()
            } else {
                vec![]
            };
        }
        // Build the Φ-dependent terms for every key in particle order, then
        // update the particles in parallel.
        let keys: Vec<Vec<i64>> = mu
            .iter()
            .map(|x| {
                let mut k = mu_key.clone();
                if key_x {
                    k.extend(x.iter().map(|v| quantize(v.as_f64(), cfg.x_spacing)));
                }
                k
            })
            .collect();
        let mut pieces: BTreeMap<Vec<i64>, Arc<PoissonAverages>> = BTreeMap::new();
        for k in &keys {
            if pieces.contains_key(k) {
                continue;
            }
            let x_at: Vec<T> = if key_x {
                k[k.len() - d1..].iter().map(|&q| T::of(dequantize(q, cfg.x_spacing))).collect()
            } else {
                vec![T::zero(); d1]
            };
            let p = hm.cached_averages(k.clone(), &x_at, mu)?;
            built.insert(k.clone());
            pieces.insert(k.clone(), p);
        }
        // Ẽ over the ensemble: C_j = (1/N) Σ_l c(X_l, μ̂, z_j, ζ).
        let c_bar: Vec<Vec<f64>> = if with_c {
            let any = pieces.values().next().unwrap();
            let nu = zeta.zeta.head(hm.cfg.poisson.law_particles.min(zeta.zeta.count()));
            any.c_nu
                .nodes
                .iter()
                .map(|z| {
                    let zt: Vec<T> = z.iter().map(|&v| T::of(v)).collect();
                    let mut acc = vec![0.0; model.d2()];
                    let mut c = vec![T::zero(); model.d2()];
                    let members: Vec<&[T]> = if s.forcing_reads_slow { mu.iter().collect() } else { vec![mu.particle(0)] };
                    for xl in &members {
                        c_api.fast_forcing(xl, mu, &zt, &nu, &mut c);
                        acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v.as_f64());
                    }
                    acc.iter_mut().for_each(|a| *a /= members.len() as f64);
                    acc
                })
                .collect()
        } else {
            vec![]
        };

        let mut next = state.particles().to_vec();
        let zeta_ref = &zeta.zeta;
        next.par_chunks_mut(d1).zip(rngs.par_iter_mut()).enumerate().try_for_each(|(i, (xo, r))| -> Result<()> {
            let x = mu.particle(i);
            let p = &pieces[&keys[i]];
            let mut drift = vec![0.0; d1];
            let mut gg = vec![0.0; d1 * d1];
            let mut f = vec![T::zero(); d1];
            let mut g = vec![T::zero(); d1 * d1];
            let nodes: Vec<&[T]> = if s.slow_reads_fast { quad.iter().collect() } else { vec![quad.particle(0)] };
            for y in &nodes {
                c_api.slow_drift(x, mu, y, zeta_ref, &mut f);
                c_api.slow_diffusion(x, mu, y, zeta_ref, &mut g);
                drift.iter_mut().zip(&f).for_each(|(d, v)| *d += v.as_f64());
                let o = linalg::outer_self(&g, d1);
                gg.iter_mut().zip(&o).for_each(|(a, v)| *a += v.as_f64());
            }
            let k = nodes.len() as f64;
            drift.iter_mut().for_each(|d| *d /= k);
            gg.iter_mut().for_each(|a| *a /= k);
            if factored {
                let mut c = vec![T::zero(); model.d2()];
                c_api.fast_forcing(x, mu, quad.particle(0), zeta_ref, &mut c);
                for i in 0..d1 {
                    drift[i] += p.h_dx_phi.value[i];
                    for (k, ck) in c.iter().enumerate() {
                        drift[i] += ck.as_f64() * p.dy_phi.value[k * d1 + i];
                    }
                }
            } else {
                for i in 0..d1 {
                    drift[i] += p.h_dx_phi.value[i] + p.c_dy_phi.value[i];
                }
            }
            if with_c {
                let mut j = 0;
                let extra = p.c_nu.evaluate(|_, out| {
                    out.copy_from_slice(&c_bar[j]);
                    j += 1;
                });
                drift.iter_mut().zip(&extra).for_each(|(d, e)| *d += e);
            }
            let a: Vec<f64> = gg.iter().zip(&p.h_phi.value).map(|(g, h)| g + 2.0 * h).collect();
            let trace: f64 = (0..d1).map(|i| a[i * d1 + i]).sum();
            let sq = effective_diffusion_sqrt(&a, d1, hm.cfg.psd_tol * trace.abs().max(f64::MIN_POSITIVE))?;
            let mut w = vec![T::zero(); d1];
            if !cfg.zero_noise {
                rng::fill_normal(r, sqrt_h, &mut w);
            }
            for a in 0..d1 {
                let noise: f64 = (0..d1).map(|b| sq[a * d1 + b] * w[b].as_f64()).sum();
                xo[a] += T::of(drift[a]) * ht + T::of(noise);
            }
            if xo.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { index: i, t: (step + 1) as f64 * h });
            }
            Ok(())
        })?;
        state = Ensemble::new(d1, next)?;
        if (step + 1) % every == 0 || step + 1 == steps {
            summaries.push(LimitSummary::of((step + 1) as f64 * h, &state));
            if cfg.keep_snapshots {
                snapshots.push(state.clone());
            }
        }
    }
    Ok(LimitTrajectory { summaries, snapshots, final_state: state, cache_entries: built.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct LangevinConstants {
    pub schema_version: u32,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Standard errors of (c1, c2, c3).
    pub std_errors: [f64; 3],
    pub beta: f64,
    /// Horizon truncation bound of the Poisson averages.
    pub truncation_bound: f64,
    /// 2β⁻¹ + 2c₃.
    pub effective_diffusion_sq: f64,
}

impl LangevinConstants {
    /// √(2β⁻¹ + 2c₃).
    pub fn diffusion(&self) -> f64 {
        self.effective_diffusion_sq.max(0.0).sqrt()
    }

    /// (1 + c₁)F(x, μ) + c₂·E F.
    pub fn limit_drift(&self, f_at_x: f64, f_mean: f64) -> f64 {
        (1.0 + self.c1) * f_at_x + self.c2 * f_mean
    }
}

/// c₁ = ⟨F·∂_yΦ, ζ⟩, c₂ = ∫∫F(ỹ, ζ)·∂_νΦ(y, ζ)(ỹ) ζ(dỹ)ζ(dy) and
/// c₃ = ⟨H·Φ, ζ⟩ of a one-dimensional Langevin model, with F evaluated at
/// the fast argument.
pub fn langevin_constants<T: Real>(hm: &HomogenizedModel<T>) -> Result<LangevinConstants> {
    let model = hm.model();
    let (d, beta) = match model.kind {
        ModelKind::Langevin { d, beta } => (d, beta),
        _ => return Err(Error::Usage("langevin_constants needs a Langevin model".into())),
    };
    if d != 1 {
        return Err(Error::Usage("langevin_constants is defined for d = 1".into()));
    }
    let c_api = model.coefficients();
    let fast_f = |_: &[T], _: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]| {
        c_api.fast_forcing(y, nu, y, nu, out)
    };
    let origin = Ensemble::from_raw(1, vec![T::zero()]);
    let p = hm.poisson_averages_with(&[T::zero()], &origin, &fast_f, true)?;
    let zeta = hm.converged_zeta(&origin)?;
    let nu = zeta.zeta.head(hm.cfg.poisson.law_particles.min(zeta.zeta.count()));
    let mut c = vec![T::zero(); 1];
    let c2 = p.c_nu.evaluate(|z, out| {
        let zt = [T::of(z[0])];
        c_api.fast_forcing(&zt, &nu, &zt, &nu, &mut c);
        out[0] = c[0].as_f64();
    })[0];
    let c2_se = if p.c_nu.is_zero() {
        0.0
    } else {
        let k = p.c_nu.nodes.len() as f64;
        let s: f64 = p
            .c_nu
            .nodes
            .iter()
            .zip(&p.c_nu.derivatives)
            .map(|(z, e)| {
                let zt = [T::of(z[0])];
                c_api.fast_forcing(&zt, &nu, &zt, &nu, &mut c);
                (c[0].as_f64() * e.std_error[0]).powi(2)
            })
            .sum();
        s.sqrt() / k
    };
    let c3 = p.h_phi.value[0];
    let eff = 2.0 / beta + 2.0 * c3;
    let tol = hm.cfg.psd_tol * (2.0 / beta);
    if eff < -tol {
        return Err(Error::NotPsd { eigenvalues: vec![eff] });
    }
    Ok(LangevinConstants {
        schema_version: SCHEMA_VERSION,
        c1: p.c_dy_phi.value[0],
        c2,
        c3,
        std_errors: [p.c_dy_phi.std_error[0], c2_se, p.h_phi.std_error[0]],
        beta,
        truncation_bound: p.truncation_bound,
        effective_diffusion_sq: eff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_examples() {
        let s = effective_diffusion_sqrt(&[1.0, 0.0, 0.0, 1.0], 2, 1e-8).unwrap();
        assert_eq!(s, vec![1.0, 0.0, 0.0, 1.0]);
        let s = effective_diffusion_sqrt(&[4.0, 0.0, 0.0, 9.0], 2, 1e-8).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[3] - 3.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let a = [2.0, 1.0, 1.0, 2.0];
        let s = effective_diffusion_sqrt(&a, 2, 1e-8).unwrap();
        let r = (3f64.sqrt() + 1.0) / 2.0;
        let o = (3f64.sqrt() - 1.0) / 2.0;
        assert!((s[0] - r).abs() < 1e-5 && (s[1] - o).abs() < 1e-5);
        assert!((s[0] - 1.36603).abs() < 1e-5 && (s[1] - 0.36603).abs() < 1e-5);
        let back = linalg::matmul(&s, &s, 2);
        for (b, x) in back.iter().zip(&a) {
            assert!((b - x).abs() < 1e-10);
        }
    }

    #[test]
    fn sqrt_rejects_negative_spectrum() {
        match effective_diffusion_sqrt(&[1.0, 0.0, 0.0, -0.5], 2, 1e-8) {
            Err(Error::NotPsd { eigenvalues }) => assert!(eigenvalues.iter().any(|&l| l < -0.4)),
            other => panic!("{other:?}"),
        }
        assert!(effective_diffusion_sqrt(&[1.0, 0.0, 0.0, -1e-10], 2, 1e-8).is_ok());
    }

    #[test]
    fn asymmetry_norm() {
        assert_eq!(asymmetry(&[1.0, 2.0, 2.0, 1.0], 2), 0.0);
        assert!((asymmetry(&[0.0, 1.0, -1.0, 0.0], 2) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cnu_field_average() {
        let f = CnuField {
            d1: 1,
            d2: 1,
            nodes: vec![vec![0.0], vec![1.0]],
            derivatives: vec![Estimate::exact(vec![2.0]), Estimate::exact(vec![4.0])],
        };
        assert_eq!(f.evaluate(|z, out| out[0] = 1.0 + z[0]), vec![(2.0 + 8.0) / 2.0]);
        assert_eq!(CnuField::zero(2, 1).evaluate(|_, out| out[0] = 1.0), vec![0.0, 0.0]);
    }
}
