//! Invariant measure of the frozen equation and ergodicity diagnostics.

use serde::Serialize;

use super::FrozenSystem;
use crate::error::{Error, Result};
use crate::measure::{w2_noise_floor, wasserstein2_auto, Ensemble};
use crate::model::ModelSpec;
use crate::scalar::Real;
use crate::stats::weighted_line_fit;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantConfig {
    /// Converged once W₂(ν̂_{t/2}, ν̂_t) ≤ tol + 3·(noise floor).
    pub stationarity_tol: f64,
    pub max_t: f64,
    /// Do not stop before this time even if the gap criterion holds.
    pub min_t: f64,
    /// First doubling-window check time.
    pub window0: f64,
    /// Spacing of the stored diagnostic snapshots.
    pub diag_dt: f64,
    pub h: f64,
    pub seed: u64,
    /// Particles of the fallback synchronous-coupling run.
    pub coupling_particles: usize,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        Self {
            stationarity_tol: 0.0,
            max_t: 20.0,
            min_t: 0.0,
            window0: 0.5,
            diag_dt: 0.25,
            h: 0.01,
            seed: 0,
            coupling_particles: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RateSource {
    /// Fit of ln W₂(ν̂_t, ζ̂) against t.
    DecayFit,
    /// Synchronous coupling of two frozen systems.
    Coupling,
}

#[derive(Clone, Debug, Serialize)]
pub struct ErgodicityDiagnostics {
    pub times: Vec<f64>,
    pub w2_to_final: Vec<f64>,
    /// W₂ sampling noise of the terminal ensemble (half-split estimate).
    pub noise_floor: f64,
    pub fitted_rate: f64,
    /// Ĉ in W₂(ν̂_t, ζ̂) ≤ Ĉ e^{−λ̂t} W₂(ν₀, ζ̂), at least 1.
    pub fitted_prefactor: f64,
    pub rate_source: RateSource,
    pub final_w2_gap: f64,
    /// (t, W₂(ν̂_{t/2}, ν̂_t), noise floor at t) for each window check.
    pub window_checks: Vec<(f64, f64, f64)>,
}

impl ErgodicityDiagnostics {
    /// No increase of `w2_to_final` by more than `k` noise floors.
    pub fn is_monotone_within(&self, k: f64) -> bool {
        self.w2_to_final.windows(2).all(|w| w[1] <= w[0] + k * self.noise_floor)
    }
}

#[derive(Clone, Debug)]
pub struct InvariantMeasureEstimate<T: Real = f64> {
    pub zeta: Ensemble<T>,
    pub burn_in: f64,
    pub model_params_hash: String,
    pub converged: bool,
    pub diagnostics: ErgodicityDiagnostics,
}

impl<T: Real> InvariantMeasureEstimate<T> {
    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged { gap: self.diagnostics.final_w2_gap })
        }
    }

    /// Wraps an ensemble known to be stationary (tests, loaded artifacts).
    pub fn assume_stationary(zeta: Ensemble<T>, rate: f64, prefactor: f64, hash: &str) -> Self {
        Self {
            zeta,
            burn_in: 0.0,
            model_params_hash: hash.to_string(),
            converged: true,
            diagnostics: ErgodicityDiagnostics {
                times: vec![],
                w2_to_final: vec![],
                noise_floor: 0.0,
                fitted_rate: rate,
                fitted_prefactor: prefactor.max(1.0),
                rate_source: RateSource::DecayFit,
                final_w2_gap: 0.0,
                window_checks: vec![],
            },
        }
    }
}

/// Run the frozen equation from `nu0`, checking the doubling-window gap at
/// t = window0·2^k, and fit (Ĉ, λ̂) from the decay of W₂ to the terminal
/// ensemble. Non-convergence is flagged, not raised.
pub fn estimate_invariant<T: Real>(
    model: &ModelSpec<T>,
    mu: &Ensemble<T>,
    nu0: &Ensemble<T>,
    cfg: &InvariantConfig,
) -> Result<InvariantMeasureEstimate<T>> {
    if !(cfg.max_t > 0.0) || !(cfg.h > 0.0) || !(cfg.window0 > 0.0) {
        return Err(Error::Usage("max_t, h and window0 must be positive".into()));
    }
    let diag_dt = cfg.diag_dt.max(cfg.h).max(cfg.max_t / 1000.0);
    let per_diag = (diag_dt / cfg.h).round().max(1.0) as usize;
    let diag_dt = per_diag as f64 * cfg.h;
    let mut sys = FrozenSystem::new(model, mu, nu0.clone(), cfg.h, cfg.seed, false)?;
    let mut snaps: Vec<(f64, Ensemble<T>)> = vec![(0.0, nu0.clone())];
    let mut next_check = cfg.window0;
    let mut converged = false;
    let mut last_gap = f64::INFINITY;
    let mut checks = Vec::new();
    loop {
        for _ in 0..per_diag {
            sys.step()?;
        }
        let t = sys.t();
        snaps.push((t, sys.ensemble().clone()));
        let at_end = t >= cfg.max_t - 1e-9 * diag_dt;
        if t >= next_check - 1e-9 * diag_dt || (at_end && t >= cfg.window0) {
            let half = snaps
                .iter()
                .min_by(|a, b| (a.0 - t / 2.0).abs().partial_cmp(&(b.0 - t / 2.0).abs()).unwrap())
                .map(|s| &s.1)
                .unwrap();
            let gap = wasserstein2_auto(half, sys.ensemble())?.as_f64();
            let floor = w2_noise_floor(sys.ensemble()).as_f64();
            checks.push((t, gap, floor));
            last_gap = gap;
            while next_check <= t + 1e-9 * diag_dt {
                next_check *= 2.0;
            }
            if gap <= cfg.stationarity_tol + 3.0 * floor && t >= cfg.min_t {
                converged = true;
                break;
            }
        }
        if at_end {
            break;
        }
    }

    let zeta = sys.ensemble().clone();
    let burn_in = sys.t();
    let floor = w2_noise_floor(&zeta).as_f64();
    let mut times = Vec::with_capacity(snaps.len());
    let mut w2 = Vec::with_capacity(snaps.len());
    for (t, e) in &snaps {
        times.push(*t);
        w2.push(wasserstein2_auto(e, &zeta)?.as_f64());
    }
    let w0 = w2[0];
    let (ft, fv): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&w2)
        .filter(|(&t, &v)| t < burn_in && v > 3.0 * floor && v > 0.0)
        .map(|(&t, &v)| (t, v.ln()))
        .unzip();
    let fit = if ft.len() >= 3 { weighted_line_fit(&ft, &fv, None).filter(|f| f.slope < 0.0) } else { None };
    let (rate, prefactor, source) = match fit {
        Some(f) => {
            let c = if w0 > 0.0 { f.intercept.exp() / w0 } else { 1.0 };
            (-f.slope, c.max(1.0), RateSource::DecayFit)
        }
        None => {
            let report = coupling_contraction(model, mu, nu0, 1.0, (cfg.max_t).min(10.0), cfg.h, cfg.seed, cfg.coupling_particles)?;
            (report.rate, report.prefactor, RateSource::Coupling)
        }
    };
    Ok(InvariantMeasureEstimate {
        zeta,
        burn_in,
        model_params_hash: model.params_hash(),
        converged,
        diagnostics: ErgodicityDiagnostics {
            times,
            w2_to_final: w2,
            noise_floor: floor,
            fitted_rate: rate,
            fitted_prefactor: prefactor,
            rate_source: source,
            final_w2_gap: last_gap,
            window_checks: checks,
        },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    pub times: Vec<f64>,
    /// sqrt((1/N) Σ |Y_i − Y'_i|²) under common noise.
    pub distances: Vec<f64>,
    pub rate: f64,
    pub prefactor: f64,
}

/// Two frozen systems, from `nu0` and from `nu0` shifted by `shift` in every
/// coordinate, driven by the same noise. Fits the decay of their
/// synchronous-coupling distance, which bounds W₂ from above.
#[allow(clippy::too_many_arguments)]
pub fn coupling_contraction<T: Real>(
    model: &ModelSpec<T>,
    mu: &Ensemble<T>,
    nu0: &Ensemble<T>,
    shift: f64,
    t_end: f64,
    h: f64,
    seed: u64,
    particles: usize,
) -> Result<ContractionReport> {
    let n = particles.max(1);
    let d2 = nu0.dim();
    let mut data = Vec::with_capacity(n * d2);
    for i in 0..n {
        data.extend_from_slice(nu0.particle(i % nu0.count()));
    }
    let a0 = Ensemble::new(d2, data)?;
    let b0 = a0.translated(&vec![T::of(shift); d2]);
    let mut a = FrozenSystem::new(model, mu, a0, h, seed, false)?;
    let mut b = FrozenSystem::new(model, mu, b0, h, seed, false)?;
    let per = ((t_end / 50.0) / h).round().max(1.0) as usize;
    let dist = |a: &Ensemble<T>, b: &Ensemble<T>| {
        let s: f64 = a.particles().iter().zip(b.particles()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum();
        (s / n as f64).sqrt()
    };
    let mut times = vec![0.0];
    let mut distances = vec![dist(a.ensemble(), b.ensemble())];
    let d0 = distances[0];
    while a.t() < t_end - 1e-9 * h {
        for _ in 0..per {
            a.step()?;
            b.step()?;
        }
        let d = dist(a.ensemble(), b.ensemble());
        times.push(a.t());
        distances.push(d);
        if d < 1e-10 * d0 {
            break;
        }
    }
    let (ft, fv): (Vec<f64>, Vec<f64>) =
        times.iter().zip(&distances).filter(|(_, &d)| d > 1e-10 * d0).map(|(&t, &d)| (t, d.ln())).unzip();
    let fit = weighted_line_fit(&ft, &fv, None)
        .ok_or_else(|| Error::Evaluation("coupling distance vanished immediately".into()))?;
    Ok(ContractionReport {
        times,
        distances,
        rate: -fit.slope,
        prefactor: (fit.intercept.exp() / d0).max(1.0),
    })
}
