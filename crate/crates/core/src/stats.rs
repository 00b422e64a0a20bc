//! Monte-Carlo bookkeeping: estimates with standard errors, bootstrap, and
//! least-squares fits on log scales.

use serde::Serialize;

use crate::rng::{self, StreamRng};
use crate::scalar::Real;
use rand::Rng;

/// A vector-valued Monte-Carlo estimate and the standard error of each entry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate<T: Real = f64> {
    pub value: Vec<T>,
    pub std_error: Vec<T>,
}

impl<T: Real> Estimate<T> {
    pub fn exact(value: Vec<T>) -> Self {
        let n = value.len();
        Self { value, std_error: vec![T::zero(); n] }
    }

    /// Column means and standard errors of `samples`, a row-major matrix
    /// with `width` columns and one row per independent sample.
    pub fn from_samples(samples: &[T], width: usize) -> Self {
        let rows = if width == 0 { 0 } else { samples.len() / width };
        let mut value = vec![T::zero(); width];
        let mut std_error = vec![T::zero(); width];
        if rows == 0 {
            return Self { value, std_error };
        }
        for row in samples.chunks_exact(width) {
            for (m, &v) in value.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = T::of_usize(rows);
        for m in value.iter_mut() {
            *m /= n;
        }
        if rows > 1 {
            for row in samples.chunks_exact(width) {
                for ((s, &v), &m) in std_error.iter_mut().zip(row).zip(&value) {
                    *s += (v - m) * (v - m);
                }
            }
            for s in std_error.iter_mut() {
                *s = (*s / (T::of_usize(rows - 1) * n)).sqrt();
            }
        } else {
            std_error.iter_mut().for_each(|s| *s = T::infinity());
        }
        Self { value, std_error }
    }

    pub fn scalar(&self) -> (T, T) {
        (self.value[0], self.std_error[0])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn max_std_error(&self) -> T {
        self.std_error.iter().fold(T::zero(), |a, &b| a.max(b))
    }

    /// True when every entry lies within `k` standard errors (plus `slack`)
    /// of `target`.
    pub fn agrees_with(&self, target: &[T], k: T, slack: T) -> bool {
        self.value
            .iter()
            .zip(&self.std_error)
            .zip(target)
            .all(|((&v, &s), &t)| (v - t).abs() <= k * s + slack)
    }

    pub fn to_f64(&self) -> Estimate<f64> {
        Estimate {
            value: self.value.iter().map(|v| v.as_f64()).collect(),
            std_error: self.std_error.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

pub fn mean<T: Real>(v: &[T]) -> T {
    if v.is_empty() {
        return T::nan();
    }
    v.iter().copied().sum::<T>() / T::of_usize(v.len())
}

/// Sample mean and its standard error.
pub fn mean_se<T: Real>(v: &[T]) -> (T, T) {
    let e = Estimate::from_samples(v, 1);
    (e.value[0], e.std_error[0])
}

/// Bootstrap standard error of a vector-valued mean over `values` rows.
pub fn bootstrap_se<T: Real>(values: &[T], width: usize, resamples: usize, seed: u64) -> Vec<T> {
    let rows = values.len() / width.max(1);
    if rows < 2 || resamples < 2 {
        return vec![T::infinity(); width];
    }
    let mut rng: StreamRng = rng::stream(seed, rng::channel::BOOTSTRAP, 0);
    let mut means = vec![T::zero(); resamples * width];
    for b in 0..resamples {
        let acc = &mut means[b * width..(b + 1) * width];
        for _ in 0..rows {
            let r = rng.gen_range(0..rows);
            for (a, &v) in acc.iter_mut().zip(&values[r * width..(r + 1) * width]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= T::of_usize(rows));
    }
    let spread = Estimate::from_samples(&means, width);
    // from_samples divides by sqrt(resamples); undo that to get the spread.
    spread
        .std_error
        .iter()
        .map(|s| *s * T::of_usize(resamples).sqrt())
        .collect()
}

/// Result of fitting `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Weighted least squares. Non-finite or non-positive weights fall back to
/// an unweighted fit over all points.
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: Option<&[f64]>) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let usable = w.filter(|w| w.len() == n && w.iter().all(|v| v.is_finite() && *v > 0.0));
    let weights: Vec<f64> = match usable {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let sw: f64 = weights.iter().sum();
    let mx = x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += weights[i] * (x[i] - mx) * (x[i] - mx);
        sxy += weights[i] * (x[i] - mx) * (y[i] - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = (0..n)
            .map(|i| weights[i] * (y[i] - intercept - slope * x[i]).powi(2))
            .sum();
        (rss / ((n - 2) as f64) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(LineFit { slope, intercept, slope_se })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_from_samples_matches_hand_computation() {
        let e: Estimate = Estimate::from_samples(&[1.0, 10.0, 3.0, 20.0], 2);
        assert_eq!(e.value, vec![2.0, 15.0]);
        // sample sd of {1,3} is sqrt(2); se = sqrt(2)/sqrt(2) = 1
        assert!((e.std_error[0] - 1.0).abs() < 1e-15);
        assert!((e.std_error[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 + 2.0 * v).collect();
        let f = weighted_line_fit(&x, &y, Some(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_se_tracks_classical_se() {
        let v: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64).collect();
        let classical = mean_se(&v).1;
        let boot = bootstrap_se(&v, 1, 400, 3)[0];
        assert!((boot / classical - 1.0).abs() < 0.2, "{boot} vs {classical}");
    }
}
