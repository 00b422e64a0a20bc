//! Coefficient sets of two-time-scale McKean–Vlasov models and the built-in
//! analytic test models.
//!
//! The coupled system is
//!
//! ```text
//! dX = F(X, μ, Y, ν) dt + ε⁻¹ H(X, μ, Y, ν) dt + G(X, μ, Y, ν) dW¹
//! dY = ε⁻¹ c(X, μ, Y, ν) dt + ε⁻² b(μ, Y, ν) dt + ε⁻¹ σ(μ, Y, ν) dW²
//! ```
//!
//! with μ, ν the laws of X and Y. Matrices are row-major.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::measure::{wasserstein2_auto, Ensemble};
use crate::rng::{self, channel};
use crate::scalar::{all_finite, Real};

/// Evaluators of F, H, G, c, b, σ. Each writes its value into `out`, which
/// has length d1 (F, H), d1² (G), d2 (c, b) or d2² (σ).
pub trait Coefficients<T: Real>: Send + Sync {
    /// (d1, d2)
    fn dims(&self) -> (usize, usize);

    fn slow_drift(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]);

    fn singular_drift(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]);

    fn slow_diffusion(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]);

    fn fast_forcing(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]);

    fn fast_drift(&self, mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]);

    fn fast_diffusion(&self, mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]);

    /// ∂b_i/∂y_k at `out[i * d2 + k]`. Central differences unless overridden.
    fn fast_drift_jacobian(&self, mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        let d2 = y.len();
        let mut yp = y.to_vec();
        let mut up = vec![T::zero(); d2];
        let mut down = vec![T::zero(); d2];
        for k in 0..d2 {
            let h = jacobian_step(y[k]);
            yp[k] = y[k] + h;
            self.fast_drift(mu, &yp, nu, &mut up);
            yp[k] = y[k] - h;
            self.fast_drift(mu, &yp, nu, &mut down);
            yp[k] = y[k];
            for i in 0..d2 {
                out[i * d2 + k] = (up[i] - down[i]) / (T::of(2.0) * h);
            }
        }
    }

    /// ∂σ_ij/∂y_k at `out[k * d2² + i * d2 + j]`. Central differences unless
    /// overridden.
    fn fast_diffusion_jacobian(&self, mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        let d2 = y.len();
        let m = d2 * d2;
        let mut yp = y.to_vec();
        let mut up = vec![T::zero(); m];
        let mut down = vec![T::zero(); m];
        for k in 0..d2 {
            let h = jacobian_step(y[k]);
            yp[k] = y[k] + h;
            self.fast_diffusion(mu, &yp, nu, &mut up);
            yp[k] = y[k] - h;
            self.fast_diffusion(mu, &yp, nu, &mut down);
            yp[k] = y[k];
            for e in 0..m {
                out[k * m + e] = (up[e] - down[e]) / (T::of(2.0) * h);
            }
        }
    }
}

/// Step used by the default finite-difference Jacobians: 1e-5 · (1 + |y_k|).
pub fn jacobian_step<T: Real>(y: T) -> T {
    T::of(1e-5) * (T::one() + y.abs())
}

type SlowFn<T> = Box<dyn Fn(&[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]) + Send + Sync>;
type FastFn<T> = Box<dyn Fn(&Ensemble<T>, &[T], &Ensemble<T>, &mut [T]) + Send + Sync>;

/// Coefficients assembled from closures; unset coefficients are zero.
pub struct FnCoefficients<T: Real = f64> {
    d1: usize,
    d2: usize,
    f: Option<SlowFn<T>>,
    h: Option<SlowFn<T>>,
    g: Option<SlowFn<T>>,
    c: Option<SlowFn<T>>,
    b: Option<FastFn<T>>,
    sigma: Option<FastFn<T>>,
}

macro_rules! setter {
    ($name:ident, $field:ident, $kind:ident, $($arg:ty),+) => {
        pub fn $name(mut self, f: impl Fn($($arg),+) + Send + Sync + 'static) -> Self {
            self.$field = Some(Box::new(f) as $kind<T>);
            self
        }
    };
}

impl<T: Real> FnCoefficients<T> {
    pub fn new(d1: usize, d2: usize) -> Self {
        Self { d1, d2, f: None, h: None, g: None, c: None, b: None, sigma: None }
    }

    setter!(slow_drift, f, SlowFn, &[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]);
    setter!(singular_drift, h, SlowFn, &[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]);
    setter!(slow_diffusion, g, SlowFn, &[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]);
    setter!(fast_forcing, c, SlowFn, &[T], &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]);
    setter!(fast_drift, b, FastFn, &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]);
    setter!(fast_diffusion, sigma, FastFn, &Ensemble<T>, &[T], &Ensemble<T>, &mut [T]);
}

fn call_slow<T: Real>(
    f: &Option<SlowFn<T>>,
    x: &[T],
    mu: &Ensemble<T>,
    y: &[T],
    nu: &Ensemble<T>,
    out: &mut [T],
) {
    match f {
        Some(f) => f(x, mu, y, nu, out),
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
}

fn call_fast<T: Real>(f: &Option<FastFn<T>>, mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
    match f {
        Some(f) => f(mu, y, nu, out),
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
}

impl<T: Real> Coefficients<T> for FnCoefficients<T> {
    fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }
    fn slow_drift(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        call_slow(&self.f, x, mu, y, nu, out)
    }
    fn singular_drift(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        call_slow(&self.h, x, mu, y, nu, out)
    }
    fn slow_diffusion(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        call_slow(&self.g, x, mu, y, nu, out)
    }
    fn fast_forcing(&self, x: &[T], mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        call_slow(&self.c, x, mu, y, nu, out)
    }
    fn fast_drift(&self, mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        call_fast(&self.b, mu, y, nu, out)
    }
    fn fast_diffusion(&self, mu: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        call_fast(&self.sigma, mu, y, nu, out)
    }
}

/// Constants of the dissipativity condition
/// ‖σ(μ,y₁,ν₁) − σ(μ,y₂,ν₂)‖² + ⟨b(μ,y₁,ν₁) − b(μ,y₂,ν₂), y₁ − y₂⟩
///   ≤ c1·W₂(ν₁,ν₂)² − c2·|y₁ − y₂|².
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DissipativityParams {
    pub c1: f64,
    pub c2: f64,
    /// True when the constants were derived analytically.
    pub declared: bool,
}

impl DissipativityParams {
    pub fn new(c1: f64, c2: f64, declared: bool) -> Result<Self> {
        if !(c1 >= 0.0 && c2 > c1 && c2.is_finite()) {
            return Err(Error::Parameter(format!("dissipativity needs c2 > c1 >= 0, got c1={c1}, c2={c2}")));
        }
        Ok(Self { c1, c2, declared })
    }

    /// Contraction margin c2 − c1.
    pub fn gap(&self) -> f64 {
        self.c2 - self.c1
    }
}

/// Which arguments the coefficients actually read. Lets the averaging
/// machinery share work across slow states. Defaults assume every
/// dependence is present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelStructure {
    /// b or σ depend on μ.
    pub fast_reads_slow_law: bool,
    /// H depends on x or μ.
    pub singular_reads_slow: bool,
    /// c ≡ 0.
    pub forcing_vanishes: bool,
    /// c depends on x or μ.
    pub forcing_reads_slow: bool,
    /// c depends on y or ν.
    pub forcing_reads_fast: bool,
    /// F or G depend on y or ν.
    pub slow_reads_fast: bool,
}

impl Default for ModelStructure {
    fn default() -> Self {
        Self {
            fast_reads_slow_law: true,
            singular_reads_slow: true,
            forcing_vanishes: false,
            forcing_reads_slow: true,
            forcing_reads_fast: true,
            slow_reads_fast: true,
        }
    }
}

/// Parameters of the linear test model
/// b = −κy + α·mean(ν), σ = s, F = −x, H = y, G = g, c = c₀.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearParams {
    pub kappa: f64,
    pub alpha: f64,
    pub s: f64,
    pub g_slow: f64,
    pub c0: f64,
}

impl LinearParams {
    /// Variance of the frozen invariant law ζ = N(0, s²/(2κ)).
    pub fn invariant_variance(&self) -> f64 {
        self.s * self.s / (2.0 * self.kappa)
    }

    /// Φ(y, ν) = y/κ + α·mean(ν)/(κ(κ−α)).
    pub fn phi(&self, y: f64, nu_mean: f64) -> f64 {
        y / self.kappa + self.phi_dnu() * nu_mean
    }

    /// ∂_yΦ = 1/κ.
    pub fn phi_dy(&self) -> f64 {
        1.0 / self.kappa
    }

    /// ∂_νΦ(y,ν)(z̃) = α/(κ(κ−α)), constant in z̃.
    pub fn phi_dnu(&self) -> f64 {
        self.alpha / (self.kappa * (self.kappa - self.alpha))
    }

    /// Constant part of the limit drift: c₀∂_yΦ plus the measure-derivative
    /// term c₀α/(κ(κ−α)), which sum to c₀/(κ−α).
    pub fn limit_drift_offset(&self) -> f64 {
        self.c0 / (self.kappa - self.alpha)
    }

    /// Limit drift −x + c₀/(κ−α).
    pub fn limit_drift(&self, x: f64) -> f64 {
        -x + self.limit_drift_offset()
    }

    /// g² + 2∫HΦ dζ = g² + s²/κ².
    pub fn limit_diffusion_sq(&self) -> f64 {
        self.g_slow * self.g_slow + self.s * self.s / (self.kappa * self.kappa)
    }

    /// Stationary variance of the limit OU process.
    pub fn limit_stationary_variance(&self) -> f64 {
        self.limit_diffusion_sq() / 2.0
    }
}

/// Built-in model families; carries the parameters needed for closed-form
/// oracles and family-specific post-processing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ModelKind {
    Linear(LinearParams),
    /// Langevin system in a two-scale potential, dimension d, inverse
    /// temperature β.
    Langevin { d: usize, beta: f64 },
    Custom,
}

#[derive(Clone)]
pub struct ModelSpec<T: Real = f64> {
    d1: usize,
    d2: usize,
    coefficients: Arc<dyn Coefficients<T>>,
    pub dissipativity: DissipativityParams,
    pub structure: ModelStructure,
    pub kind: ModelKind,
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl<T: Real> std::fmt::Debug for ModelSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("d1", &self.d1)
            .field("d2", &self.d2)
            .field("params", &self.params)
            .field("dissipativity", &self.dissipativity)
            .field("structure", &self.structure)
            .finish()
    }
}

impl<T: Real> ModelSpec<T> {
    pub fn new(
        d1: usize,
        d2: usize,
        coefficients: impl Coefficients<T> + 'static,
        dissipativity: DissipativityParams,
        structure: ModelStructure,
    ) -> Result<Self> {
        if d1 == 0 || d2 == 0 {
            return Err(Error::Structural(format!("dimensions must be positive, got ({d1}, {d2})")));
        }
        if coefficients.dims() != (d1, d2) {
            return Err(Error::Structural(format!(
                "coefficients report dims {:?}, model declares ({d1}, {d2})",
                coefficients.dims()
            )));
        }
        DissipativityParams::new(dissipativity.c1, dissipativity.c2, dissipativity.declared)?;
        Ok(Self {
            d1,
            d2,
            coefficients: Arc::new(coefficients),
            dissipativity,
            structure,
            kind: ModelKind::Custom,
            name: "custom".into(),
            params: BTreeMap::new(),
        })
    }

    pub fn with_name(mut self, name: &str, params: &[(&str, f64)]) -> Self {
        self.name = name.to_string();
        self.params = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self
    }

    #[inline]
    pub fn d1(&self) -> usize {
        self.d1
    }

    #[inline]
    pub fn d2(&self) -> usize {
        self.d2
    }

    #[inline]
    pub fn coefficients(&self) -> &dyn Coefficients<T> {
        self.coefficients.as_ref()
    }

    pub fn linear_params(&self) -> Option<&LinearParams> {
        match &self.kind {
            ModelKind::Linear(p) => Some(p),
            _ => None,
        }
    }

    /// Hex SHA-256 of the model name and parameters.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for (k, v) in &self.params {
            h.update(k.as_bytes());
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    /// F + H/ε into `out` (length d1); `scratch` has length d1.
    #[allow(clippy::too_many_arguments)]
    pub fn slow_channel_drift(
        &self,
        x: &[T],
        mu: &Ensemble<T>,
        y: &[T],
        nu: &Ensemble<T>,
        eps: T,
        out: &mut [T],
        scratch: &mut [T],
    ) {
        let c = self.coefficients();
        c.slow_drift(x, mu, y, nu, out);
        c.singular_drift(x, mu, y, nu, scratch);
        for (o, &s) in out.iter_mut().zip(scratch.iter()) {
            *o += s / eps;
        }
    }

    /// c/ε + b/ε² into `out` (length d2); `scratch` has length d2.
    #[allow(clippy::too_many_arguments)]
    pub fn fast_channel_drift(
        &self,
        x: &[T],
        mu: &Ensemble<T>,
        y: &[T],
        nu: &Ensemble<T>,
        eps: T,
        out: &mut [T],
        scratch: &mut [T],
    ) {
        let c = self.coefficients();
        c.fast_drift(mu, y, nu, out);
        let inv2 = T::one() / (eps * eps);
        out.iter_mut().for_each(|o| *o *= inv2);
        if !self.structure.forcing_vanishes {
            c.fast_forcing(x, mu, y, nu, scratch);
            for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                *o += s / eps;
            }
        }
    }
}

struct LinearCoefficients<T: Real> {
    kappa: T,
    alpha: T,
    s: T,
    g: T,
    c0: T,
}

impl<T: Real> Coefficients<T> for LinearCoefficients<T> {
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }
    fn slow_drift(&self, x: &[T], _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out[0] = -x[0];
    }
    fn singular_drift(&self, _: &[T], _: &Ensemble<T>, y: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out[0] = y[0];
    }
    fn slow_diffusion(&self, _: &[T], _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out[0] = self.g;
    }
    fn fast_forcing(&self, _: &[T], _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out[0] = self.c0;
    }
    fn fast_drift(&self, _: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        out[0] = -self.kappa * y[0] + self.alpha * nu.mean()[0];
    }
    fn fast_diffusion(&self, _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out[0] = self.s;
    }
    fn fast_drift_jacobian(&self, _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out[0] = -self.kappa;
    }
    fn fast_diffusion_jacobian(&self, _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out[0] = T::zero();
    }
}

/// Linear model with b = −κy + α·mean(ν), σ = s, F = −x, H = y, G = g_slow,
/// c = 0. Dissipativity constants c1 = α/2, c2 = κ − α/2 are declared.
pub fn builtin_linear_model<T: Real>(kappa: f64, alpha: f64, s: f64, g_slow: f64) -> Result<ModelSpec<T>> {
    builtin_linear_model_forced(kappa, alpha, s, g_slow, 0.0)
}

/// Linear model with constant fast forcing c ≡ c0.
pub fn builtin_linear_model_forced<T: Real>(
    kappa: f64,
    alpha: f64,
    s: f64,
    g_slow: f64,
    c0: f64,
) -> Result<ModelSpec<T>> {
    for (name, v) in [("kappa", kappa), ("alpha", alpha), ("s", s), ("g_slow", g_slow), ("c0", c0)] {
        if !v.is_finite() {
            return Err(Error::Parameter(format!("{name} must be finite")));
        }
    }
    if alpha < 0.0 {
        return Err(Error::Parameter(format!("alpha must be nonnegative, got {alpha}")));
    }
    if kappa <= alpha {
        return Err(Error::Parameter(format!(
            "linear model is not dissipative: kappa ({kappa}) must exceed alpha ({alpha})"
        )));
    }
    if s <= 0.0 {
        return Err(Error::Parameter(format!("s must be positive, got {s}")));
    }
    let coeffs = LinearCoefficients { kappa: T::of(kappa), alpha: T::of(alpha), s: T::of(s), g: T::of(g_slow), c0: T::of(c0) };
    let diss = DissipativityParams::new(alpha / 2.0, kappa - alpha / 2.0, true)?;
    let structure = ModelStructure {
        fast_reads_slow_law: false,
        singular_reads_slow: false,
        forcing_vanishes: c0 == 0.0,
        forcing_reads_slow: false,
        forcing_reads_fast: false,
        slow_reads_fast: false,
    };
    let mut spec = ModelSpec::new(1, 1, coeffs, diss, structure)?.with_name(
        "linear",
        &[("kappa", kappa), ("alpha", alpha), ("s", s), ("g_slow", g_slow), ("c0", c0)],
    );
    spec.kind = ModelKind::Linear(LinearParams { kappa, alpha, s, g_slow, c0 });
    Ok(spec)
}

type PairFn<T> = Arc<dyn Fn(&[T], &Ensemble<T>, &mut [T]) + Send + Sync>;

struct LangevinCoefficients<T: Real> {
    d: usize,
    f: PairFn<T>,
    h: PairFn<T>,
    noise: T,
}

impl<T: Real> LangevinCoefficients<T> {
    fn scaled_identity(&self, out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..self.d {
            out[i * self.d + i] = self.noise;
        }
    }
}

impl<T: Real> Coefficients<T> for LangevinCoefficients<T> {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.d)
    }
    fn slow_drift(&self, x: &[T], mu: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        (self.f)(x, mu, out)
    }
    fn singular_drift(&self, _: &[T], _: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        (self.h)(y, nu, out)
    }
    fn slow_diffusion(&self, _: &[T], _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        self.scaled_identity(out)
    }
    fn fast_forcing(&self, x: &[T], mu: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        (self.f)(x, mu, out)
    }
    fn fast_drift(&self, _: &Ensemble<T>, y: &[T], nu: &Ensemble<T>, out: &mut [T]) {
        (self.h)(y, nu, out)
    }
    fn fast_diffusion(&self, _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        self.scaled_identity(out)
    }
    fn fast_diffusion_jacobian(&self, _: &Ensemble<T>, _: &[T], _: &Ensemble<T>, out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Langevin dynamics in a two-scale potential, rewritten with Y = X/ε:
/// slow drift F(x,μ) + H(y,ν)/ε, fast drift F(x,μ)/ε + H(y,ν)/ε², both
/// noises √(2/β). So b := H, c := F and G = σ = √(2/β)·I. The caller
/// declares the dissipativity constants of H.
pub fn builtin_langevin_model<T: Real>(
    d: usize,
    f_eval: impl Fn(&[T], &Ensemble<T>, &mut [T]) + Send + Sync + 'static,
    h_eval: impl Fn(&[T], &Ensemble<T>, &mut [T]) + Send + Sync + 'static,
    beta: f64,
    dissipativity: DissipativityParams,
) -> Result<ModelSpec<T>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    let coeffs = LangevinCoefficients { d, f: Arc::new(f_eval), h: Arc::new(h_eval), noise: T::of((2.0 / beta).sqrt()) };
    let structure = ModelStructure {
        fast_reads_slow_law: false,
        singular_reads_slow: false,
        forcing_vanishes: false,
        forcing_reads_slow: true,
        forcing_reads_fast: false,
        slow_reads_fast: false,
    };
    let mut spec = ModelSpec::new(d, d, coeffs, dissipativity, structure)?.with_name("langevin", &[("beta", beta)]);
    spec.kind = ModelKind::Langevin { d, beta };
    Ok(spec)
}

/// One-dimensional Langevin model with F(x,μ) = −f_rate·x and
/// H(y,ν) = −κy + α·mean(ν).
pub fn builtin_langevin_linear<T: Real>(kappa: f64, alpha: f64, f_rate: f64, beta: f64) -> Result<ModelSpec<T>> {
    if !(kappa > alpha && alpha >= 0.0) {
        return Err(Error::Parameter(format!("need kappa > alpha >= 0, got kappa={kappa}, alpha={alpha}")));
    }
    let (k, a, fr) = (T::of(kappa), T::of(alpha), T::of(f_rate));
    let diss = DissipativityParams::new(alpha / 2.0, kappa - alpha / 2.0, true)?;
    let mut spec = builtin_langevin_model(
        1,
        move |x: &[T], _: &Ensemble<T>, out: &mut [T]| out[0] = -fr * x[0],
        move |y: &[T], nu: &Ensemble<T>, out: &mut [T]| out[0] = -k * y[0] + a * nu.mean()[0],
        beta,
        diss,
    )?;
    spec.params = [("kappa", kappa), ("alpha", alpha), ("f_rate", f_rate), ("beta", beta)]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    Ok(spec)
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub probes: usize,
    pub violations: usize,
    /// min over probes of c1·W₂² − c2·|Δy|² − (‖Δσ‖² + ⟨Δb, Δy⟩).
    pub worst_margin: f64,
    pub worst_probe: usize,
    pub c1: f64,
    pub c2: f64,
    pub declared: bool,
}

/// Relative tolerance of the dissipativity probe.
pub const DISSIPATIVITY_TOL: f64 = 1e-8;
const PROBE_PARTICLES: usize = 8;

fn guarded<R>(what: &str, f: impl FnOnce() -> R) -> Result<R> {
    catch_unwind(AssertUnwindSafe(f))
        .map_err(|_| Error::Structural(format!("{what} evaluator failed on buffers sized from (d1, d2)")))
}

fn check_finite<T: Real>(what: &str, v: &[T]) -> Result<()> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(Error::Evaluation(format!("{what} returned a non-finite value")))
    }
}

fn random_ensemble<T: Real>(rng: &mut rng::StreamRng, dim: usize, center: T, scale: T) -> Ensemble<T> {
    let mut data = vec![T::zero(); PROBE_PARTICLES * dim];
    rng::fill_normal(rng, scale, &mut data);
    data.iter_mut().for_each(|v| *v += center);
    Ensemble::from_raw(dim, data)
}

/// Probe the dissipativity inequality at `probes` random pairs
/// (y₁,ν₁), (y₂,ν₂) sharing a random μ. Every coefficient is also evaluated
/// once per probe to catch shape and finiteness defects.
pub fn validate_model<T: Real>(spec: &ModelSpec<T>, probes: usize, seed: u64) -> Result<ValidationReport> {
    if probes == 0 {
        return Err(Error::Usage("validate_model needs at least one probe".into()));
    }
    let (d1, d2) = (spec.d1(), spec.d2());
    let c = spec.coefficients();
    let (c1, c2) = (spec.dissipativity.c1, spec.dissipativity.c2);
    let mut worst = f64::INFINITY;
    let mut worst_probe = 0;
    let mut violations = 0;
    let mut vx = vec![T::zero(); d1];
    let mut vg = vec![T::zero(); d1 * d1];
    let mut vc = vec![T::zero(); d2];
    let (mut b1, mut b2) = (vec![T::zero(); d2], vec![T::zero(); d2]);
    let (mut s1, mut s2) = (vec![T::zero(); d2 * d2], vec![T::zero(); d2 * d2]);

    for p in 0..probes {
        let mut r = rng::stream(seed, channel::VALIDATE, p as u64);
        let spread = T::of(3.0);
        let center = rng::normal::<T>(&mut r);
        let mu = random_ensemble(&mut r, d1, center, T::of(2.0));
        let mut x = vec![T::zero(); d1];
        rng::fill_normal(&mut r, spread, &mut x);
        let mut y1 = vec![T::zero(); d2];
        let mut y2 = vec![T::zero(); d2];
        rng::fill_normal(&mut r, spread, &mut y1);
        rng::fill_normal(&mut r, spread, &mut y2);
        let center1 = spread * rng::normal::<T>(&mut r);
        let nu1 = random_ensemble(&mut r, d2, center1, T::of(1.5));
        let center2 = spread * rng::normal::<T>(&mut r);
        let mut nu2 = random_ensemble(&mut r, d2, center2, T::of(1.5));
        match p % 3 {
            0 => nu2 = nu1.clone(),
            1 => y2.copy_from_slice(&y1),
            _ => {}
        }

        guarded("F", || c.slow_drift(&x, &mu, &y1, &nu1, &mut vx))?;
        check_finite("F", &vx)?;
        guarded("H", || c.singular_drift(&x, &mu, &y1, &nu1, &mut vx))?;
        check_finite("H", &vx)?;
        guarded("G", || c.slow_diffusion(&x, &mu, &y1, &nu1, &mut vg))?;
        check_finite("G", &vg)?;
        guarded("c", || c.fast_forcing(&x, &mu, &y1, &nu1, &mut vc))?;
        check_finite("c", &vc)?;
        guarded("b", || {
            c.fast_drift(&mu, &y1, &nu1, &mut b1);
            c.fast_drift(&mu, &y2, &nu2, &mut b2);
        })?;
        check_finite("b", &b1)?;
        check_finite("b", &b2)?;
        guarded("sigma", || {
            c.fast_diffusion(&mu, &y1, &nu1, &mut s1);
            c.fast_diffusion(&mu, &y2, &nu2, &mut s2);
        })?;
        check_finite("sigma", &s1)?;
        check_finite("sigma", &s2)?;

        let sig: f64 = s1.iter().zip(&s2).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
        let inner: f64 = b1
            .iter()
            .zip(&b2)
            .zip(y1.iter().zip(&y2))
            .map(|((&a, &b), (&u, &v))| ((a - b) * (u - v)).as_f64())
            .sum();
        let dy2: f64 = y1.iter().zip(&y2).map(|(&u, &v)| (u - v).as_f64().powi(2)).sum();
        let w2 = wasserstein2_auto(&nu1, &nu2)?.as_f64();
        let lhs = sig + inner;
        let rhs = c1 * w2 * w2 - c2 * dy2;
        let margin = rhs - lhs;
        let scale = 1.0 + lhs.abs() + (c1 * w2 * w2).abs() + (c2 * dy2).abs();
        if margin < -DISSIPATIVITY_TOL * scale {
            violations += 1;
        }
        if margin < worst {
            worst = margin;
            worst_probe = p;
        }
    }
    Ok(ValidationReport {
        passed: violations == 0,
        probes,
        violations,
        worst_margin: worst,
        worst_probe,
        c1,
        c2,
        declared: spec.dissipativity.declared,
    })
}
