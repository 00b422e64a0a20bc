//! Flat JSON experiment configuration.
//!
//! Every key is optional; unknown keys and ill-typed values are rejected
//! with the name of the first offending key in document order.

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::dynamics::InitialLaw;
use crate::error::{Error, Result};
use crate::homogenize::HomogenizeConfig;
use crate::model::{builtin_langevin_linear, builtin_linear_model_forced, ModelSpec};
use crate::dynamics::InvariantConfig;
use crate::poisson::PoissonConfig;
use crate::scalar::Real;
use crate::Ensemble;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// b = −κy + α·mean(ν), σ = s, F = −x, H = y, G = g_slow, c = c0.
    Linear,
    /// F(x) = −f_rate·x, H(y, ν) = −κy + α·mean(ν), noise √(2/β).
    Langevin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Mean,
    Variance,
    SecondMoment,
}

impl Observable {
    pub fn eval<T: Real>(&self, e: &Ensemble<T>) -> f64 {
        match self {
            Observable::Mean => e.mean()[0].as_f64(),
            Observable::Variance => e.variance()[0].as_f64(),
            Observable::SecondMoment => e.second_moment()[0].as_f64(),
        }
    }
}

/// What the ε-system is compared against in the convergence study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Limit,
    /// The ε-system itself; every error is 0.
    #[serde(rename = "self")]
    SelfCompare,
}

/// Integrand of the fluctuation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FluctuationFn {
    /// f = y.
    Fast,
    Zero,
    One,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    pub kappa: f64,
    pub alpha: f64,
    pub s: f64,
    pub g_slow: f64,
    pub c0: f64,
    pub f_rate: f64,
    pub beta: f64,

    pub eps_list: Vec<f64>,
    pub particles: usize,
    pub t_end: f64,
    /// Step rule h = ε²/h_divisor.
    pub h_divisor: f64,
    pub observable: Observable,
    pub reps: usize,
    pub seed: u64,
    pub x0: f64,
    pub x0_var: f64,
    pub y0: f64,
    pub y0_var: f64,
    pub slope_min: f64,
    pub slope_max: f64,
    pub reference: Reference,
    pub fluctuation_f: FluctuationFn,
    pub outputs: usize,

    pub zeta_particles: usize,
    pub zeta_t: f64,
    pub zeta_h: f64,
    pub init_means: Vec<f64>,
    pub init_vars: Vec<f64>,
    pub decoupled_starts: Vec<f64>,
    pub decoupled_paths: usize,
    pub decoupled_t: f64,

    pub poisson_paths: usize,
    pub law_groups: usize,
    pub law_particles: usize,
    pub poisson_h: f64,
    pub horizon: Option<f64>,
    pub truncation_tol: f64,
    pub inconclusive_se: f64,
    pub residual_tol: f64,

    pub lions_nodes: usize,
    pub limit_h: f64,
    pub limit_t: f64,
    pub limit_particles: usize,
    pub x_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Linear,
            kappa: 2.0,
            alpha: 1.0,
            s: 2.0,
            g_slow: std::f64::consts::SQRT_2,
            c0: 0.0,
            f_rate: 1.0,
            beta: 1.0,
            eps_list: vec![0.3, 0.2, 0.1, 0.05],
            particles: 2000,
            t_end: 0.5,
            h_divisor: 20.0,
            observable: Observable::SecondMoment,
            reps: 8,
            seed: 0,
            x0: 8.0,
            x0_var: 0.0,
            y0: 8.0,
            y0_var: 0.0,
            slope_min: 0.7,
            slope_max: 1.3,
            reference: Reference::Limit,
            fluctuation_f: FluctuationFn::Fast,
            outputs: 20,
            zeta_particles: 10_000,
            zeta_t: 20.0,
            zeta_h: 0.01,
            init_means: vec![5.0, 0.0],
            init_vars: vec![0.0, 4.0],
            decoupled_starts: vec![-2.0, 1.0, 3.0],
            decoupled_paths: 2000,
            decoupled_t: 3.0,
            poisson_paths: 10_000,
            law_groups: 10,
            law_particles: 1000,
            poisson_h: 1e-3,
            horizon: None,
            truncation_tol: 1e-3,
            inconclusive_se: 0.25,
            residual_tol: 1e-3,
            lions_nodes: 8,
            limit_h: 0.01,
            limit_t: 10.0,
            limit_particles: 4000,
            x_grid: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), reason: reason.into() }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| bad(key, "expected a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, "expected a finite number"))
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| bad(key, "expected a nonnegative integer"))
}

fn as_list(key: &str, v: &Value) -> Result<Vec<f64>> {
    let a = v.as_array().ok_or_else(|| bad(key, "expected an array of numbers"))?;
    a.iter().map(|x| as_f64(key, x)).collect()
}

fn as_choice<E: Copy>(key: &str, v: &Value, options: &[(&str, E)]) -> Result<E> {
    let s = v.as_str().ok_or_else(|| bad(key, "expected a string"))?;
    options.iter().find(|(n, _)| *n == s).map(|(_, e)| *e).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        bad(key, format!("unknown value `{s}`, expected one of {names:?}"))
    })
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| bad("<document>", e.to_string()))?;
        let map = v.as_object().ok_or_else(|| bad("<document>", "expected a JSON object"))?;
        Self::from_map(map)
    }

    pub fn from_map(map: &Map<String, Value>) -> Result<Self> {
        let mut c = Self::default();
        for (key, v) in map {
            let k = key.as_str();
            match k {
                "model" => {
                    c.model = as_choice(k, v, &[("linear", ModelChoice::Linear), ("langevin", ModelChoice::Langevin)])?
                }
                "kappa" => c.kappa = as_f64(k, v)?,
                "alpha" => c.alpha = as_f64(k, v)?,
                "s" => c.s = as_f64(k, v)?,
                "g_slow" => c.g_slow = as_f64(k, v)?,
                "c0" => c.c0 = as_f64(k, v)?,
                "f_rate" => c.f_rate = as_f64(k, v)?,
                "beta" => c.beta = as_f64(k, v)?,
                "eps_list" => c.eps_list = as_list(k, v)?,
                "particles" => c.particles = as_usize(k, v)?,
                "t_end" => c.t_end = as_f64(k, v)?,
                "h_divisor" => c.h_divisor = as_f64(k, v)?,
                "observable" => {
                    c.observable = as_choice(
                        k,
                        v,
                        &[
                            ("mean", Observable::Mean),
                            ("variance", Observable::Variance),
                            ("second_moment", Observable::SecondMoment),
                        ],
                    )?
                }
                "reps" => c.reps = as_usize(k, v)?,
                "seed" => c.seed = v.as_u64().ok_or_else(|| bad(k, "expected a nonnegative integer"))?,
                "x0" => c.x0 = as_f64(k, v)?,
                "x0_var" => c.x0_var = as_f64(k, v)?,
                "y0" => c.y0 = as_f64(k, v)?,
                "y0_var" => c.y0_var = as_f64(k, v)?,
                "slope_min" => c.slope_min = as_f64(k, v)?,
                "slope_max" => c.slope_max = as_f64(k, v)?,
                "reference" => {
                    c.reference = as_choice(k, v, &[("limit", Reference::Limit), ("self", Reference::SelfCompare)])?
                }
                "fluctuation_f" => {
                    c.fluctuation_f = as_choice(
                        k,
                        v,
                        &[("fast", FluctuationFn::Fast), ("zero", FluctuationFn::Zero), ("one", FluctuationFn::One)],
                    )?
                }
                "outputs" => c.outputs = as_usize(k, v)?,
                "zeta_particles" => c.zeta_particles = as_usize(k, v)?,
                "zeta_t" => c.zeta_t = as_f64(k, v)?,
                "zeta_h" => c.zeta_h = as_f64(k, v)?,
                "init_means" => c.init_means = as_list(k, v)?,
                "init_vars" => c.init_vars = as_list(k, v)?,
                "decoupled_starts" => c.decoupled_starts = as_list(k, v)?,
                "decoupled_paths" => c.decoupled_paths = as_usize(k, v)?,
                "decoupled_t" => c.decoupled_t = as_f64(k, v)?,
                "poisson_paths" => c.poisson_paths = as_usize(k, v)?,
                "law_groups" => c.law_groups = as_usize(k, v)?,
                "law_particles" => c.law_particles = as_usize(k, v)?,
                "poisson_h" => c.poisson_h = as_f64(k, v)?,
                "horizon" => c.horizon = if v.is_null() { None } else { Some(as_f64(k, v)?) },
                "truncation_tol" => c.truncation_tol = as_f64(k, v)?,
                "inconclusive_se" => c.inconclusive_se = as_f64(k, v)?,
                "residual_tol" => c.residual_tol = as_f64(k, v)?,
                "lions_nodes" => c.lions_nodes = as_usize(k, v)?,
                "limit_h" => c.limit_h = as_f64(k, v)?,
                "limit_t" => c.limit_t = as_f64(k, v)?,
                "limit_particles" => c.limit_particles = as_usize(k, v)?,
                "x_grid" => c.x_grid = as_list(k, v)?,
                _ => return Err(bad(k, "unknown key")),
            }
        }
        c.check()?;
        Ok(c)
    }

    /// Range and consistency checks, reported against the key at fault.
    pub fn check(&self) -> Result<()> {
        if self.eps_list.is_empty() {
            return Err(bad("eps_list", "must not be empty"));
        }
        if self.eps_list.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(bad("eps_list", "every ε must lie in (0, 1]"));
        }
        if self.eps_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(bad("eps_list", "must be strictly decreasing"));
        }
        let positive = [
            ("s", self.s),
            ("beta", self.beta),
            ("t_end", self.t_end),
            ("zeta_t", self.zeta_t),
            ("zeta_h", self.zeta_h),
            ("decoupled_t", self.decoupled_t),
            ("poisson_h", self.poisson_h),
            ("truncation_tol", self.truncation_tol),
            ("inconclusive_se", self.inconclusive_se),
            ("residual_tol", self.residual_tol),
            ("limit_h", self.limit_h),
            ("limit_t", self.limit_t),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(bad(k, "must be positive"));
            }
        }
        if self.h_divisor < 10.0 {
            return Err(bad("h_divisor", "must be at least 10 (step guard h ≤ ε²/10)"));
        }
        for (k, v) in [("x0_var", self.x0_var), ("y0_var", self.y0_var)] {
            if v < 0.0 {
                return Err(bad(k, "must be nonnegative"));
            }
        }
        if self.init_vars.iter().any(|&v| v < 0.0) {
            return Err(bad("init_vars", "must be nonnegative"));
        }
        let at_least = [
            ("particles", self.particles, 2),
            ("reps", self.reps, 1),
            ("outputs", self.outputs, 1),
            ("zeta_particles", self.zeta_particles, 2),
            ("decoupled_paths", self.decoupled_paths, 2),
            ("poisson_paths", self.poisson_paths, 2),
            ("law_groups", self.law_groups, 2),
            ("law_particles", self.law_particles, 1),
            ("lions_nodes", self.lions_nodes, 1),
            ("limit_particles", self.limit_particles, 2),
        ];
        for (k, v, min) in at_least {
            if v < min {
                return Err(bad(k, format!("must be at least {min}")));
            }
        }
        if self.poisson_paths % self.law_groups != 0 {
            return Err(bad("law_groups", "must divide poisson_paths"));
        }
        if self.init_means.is_empty() {
            return Err(bad("init_means", "must not be empty"));
        }
        if self.init_means.len() != self.init_vars.len() {
            return Err(bad("init_vars", "must have the same length as init_means"));
        }
        if self.slope_min >= self.slope_max {
            return Err(bad("slope_max", "must exceed slope_min"));
        }
        if matches!(self.horizon, Some(h) if h <= 0.0) {
            return Err(bad("horizon", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The selected builtin model; construction failures name the key.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let built = match self.model {
            ModelChoice::Linear => builtin_linear_model_forced(self.kappa, self.alpha, self.s, self.g_slow, self.c0),
            ModelChoice::Langevin => builtin_langevin_linear(self.kappa, self.alpha, self.f_rate, self.beta),
        };
        built.map_err(|e| bad("kappa", e.to_string()))
    }

    pub fn step(&self, eps: f64) -> f64 {
        eps * eps / self.h_divisor
    }

    pub fn slow_law(&self) -> InitialLaw {
        law(self.x0, self.x0_var)
    }

    pub fn fast_law(&self) -> InitialLaw {
        law(self.y0, self.y0_var)
    }

    pub fn poisson_config(&self) -> PoissonConfig {
        PoissonConfig {
            paths: self.poisson_paths,
            law_groups: self.law_groups,
            law_particles: self.law_particles,
            h: self.poisson_h,
            horizon: self.horizon,
            truncation_tol: self.truncation_tol,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn invariant_config(&self) -> InvariantConfig {
        InvariantConfig { max_t: self.zeta_t, h: self.zeta_h, seed: self.seed, ..Default::default() }
    }

    pub fn homogenize_config(&self) -> HomogenizeConfig {
        HomogenizeConfig {
            zeta_particles: self.zeta_particles,
            zeta_init: InitialLaw::Point(vec![self.init_means[0]]),
            invariant: self.invariant_config(),
            poisson: self.poisson_config(),
            lions_nodes: self.lions_nodes,
            seed: self.seed,
            ..Default::default()
        }
    }
}

pub(crate) fn law(mean: f64, var: f64) -> InitialLaw {
    if var == 0.0 {
        InitialLaw::Point(vec![mean])
    } else {
        InitialLaw::Gaussian { mean: vec![mean], cov: vec![var] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(ExperimentConfig::from_json_str("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn first_offending_key_is_reported() {
        let e = ExperimentConfig::from_json_str(r#"{"reps": 3, "particles": "many", "bogus": 1}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "particles"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"bogus": 1, "particles": "many"}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "bogus"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"eps_list": [0.1, 0.2]}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "eps_list"), "{e}");
        let e = ExperimentConfig::from_json_str("[1]").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "<document>"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn model_errors_name_a_key() {
        let e = ExperimentConfig::from_json_str(r#"{"alpha": 3.0}"#).unwrap().model_spec().unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
    }
}
