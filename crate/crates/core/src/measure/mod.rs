//! Empirical measures on R^d and the operations the engine performs on them.
//!
//! An [`Ensemble`] of N particles stands for the measure (1/N) Σ δ_{z_i}.
//! Particle order carries no meaning but is preserved, so every reduction is
//! performed in index order and results are reproducible bit for bit.

mod wasserstein;

pub use wasserstein::{w2_noise_floor, wasserstein2, wasserstein2_auto, W2Method};

use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble<T: Real = f64> {
    dim: usize,
    data: Vec<T>,
    mean: Vec<T>,
}

impl<T: Real> Ensemble<T> {
    /// Build from a row-major `count × dim` buffer.
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Structural("ensemble dimension must be positive".into()));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Structural(format!(
                "ensemble buffer of length {} is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::Evaluation("ensemble contains non-finite entries".into()));
        }
        Ok(Self::from_raw(dim, data))
    }

    /// Caller guarantees the shape and finiteness invariants.
    pub(crate) fn from_raw(dim: usize, data: Vec<T>) -> Self {
        let count = data.len() / dim;
        let mut mean = vec![T::zero(); dim];
        for row in data.chunks_exact(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = T::of_usize(count);
        mean.iter_mut().for_each(|m| *m /= n);
        Self { dim, data, mean }
    }

    pub fn from_scalars(values: &[T]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    pub fn from_points(points: &[Vec<T>]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Structural("points have differing dimensions".into()));
        }
        Self::new(dim, points.concat())
    }

    /// Dirac mass at `p`.
    pub fn point(p: &[T]) -> Result<Self> {
        Self::new(p.len(), p.to_vec())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn particles(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn particle(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.dim)
    }

    /// Mean vector; cached at construction.
    #[inline]
    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Per-channel variance (population normalization).
    pub fn variance(&self) -> Vec<T> {
        let mut var = vec![T::zero(); self.dim];
        for row in self.iter() {
            for ((v, &z), &m) in var.iter_mut().zip(row).zip(&self.mean) {
                *v += (z - m) * (z - m);
            }
        }
        let n = T::of_usize(self.count());
        var.iter_mut().for_each(|v| *v /= n);
        var
    }

    /// Second-moment matrix (1/N) Σ z zᵀ, row-major.
    pub fn second_moment(&self) -> Vec<T> {
        let d = self.dim;
        let mut m = vec![T::zero(); d * d];
        for row in self.iter() {
            for a in 0..d {
                for b in 0..d {
                    m[a * d + b] += row[a] * row[b];
                }
            }
        }
        let n = T::of_usize(self.count());
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Covariance matrix, row-major.
    pub fn covariance(&self) -> Vec<T> {
        let d = self.dim;
        let mut c = self.second_moment();
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] -= self.mean[a] * self.mean[b];
            }
        }
        c
    }

    /// sqrt((1/N) Σ |z_i|²)
    pub fn rms_norm(&self) -> T {
        (self.data.iter().map(|&v| v * v).sum::<T>() / T::of_usize(self.count())).sqrt()
    }

    /// Copy with particle `i` replaced by `z`.
    pub fn with_particle(&self, i: usize, z: &[T]) -> Self {
        let mut data = self.data.clone();
        data[i * self.dim..(i + 1) * self.dim].copy_from_slice(z);
        Self::from_raw(self.dim, data)
    }

    /// Copy with coordinate `k` of particle `i` moved by `h`.
    pub fn with_particle_shifted(&self, i: usize, k: usize, h: T) -> Self {
        let mut data = self.data.clone();
        data[i * self.dim + k] += h;
        Self::from_raw(self.dim, data)
    }

    /// Copy where every particle is translated by `shift`.
    pub fn translated(&self, shift: &[T]) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.dim) {
            for (v, &s) in row.iter_mut().zip(shift) {
                *v += s;
            }
        }
        Self::from_raw(self.dim, data)
    }

    /// Particles reordered so that new particle `j` is old particle `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.particle(p));
        }
        Self::from_raw(self.dim, data)
    }

    /// First `n` particles (all of them when `n >= count`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.clamp(1, self.count());
        Self::from_raw(self.dim, self.data[..n * self.dim].to_vec())
    }

    /// Even- and odd-indexed halves; used to measure sampling noise.
    pub fn halves(&self) -> Option<(Self, Self)> {
        let n = self.count() / 2;
        if n == 0 {
            return None;
        }
        let mut even = Vec::with_capacity(n * self.dim);
        let mut odd = Vec::with_capacity(n * self.dim);
        for i in 0..n {
            even.extend_from_slice(self.particle(2 * i));
            odd.extend_from_slice(self.particle(2 * i + 1));
        }
        Some((Self::from_raw(self.dim, even), Self::from_raw(self.dim, odd)))
    }

    /// Hash of the exact bit pattern; identifies an ensemble in caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dim.hash(&mut h);
        for v in &self.data {
            v.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64(&self) -> Ensemble<f64> {
        Ensemble::from_raw(self.dim, self.data.iter().map(|v| v.as_f64()).collect())
    }

    /// One particle per row, comma-separated coordinates.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|k| format!("z{k}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{:e}", v.as_f64())).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut dim = 0;
        let mut data = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 && line.starts_with('z') {
                continue;
            }
            let row: Vec<T> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map(T::of))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Structural(format!("line {}: {e}", lineno + 1)))?;
            if dim == 0 {
                dim = row.len();
            } else if row.len() != dim {
                return Err(Error::Structural(format!("line {}: ragged row", lineno + 1)));
            }
            data.extend(row);
        }
        Self::new(dim, data)
    }
}

/// ⟨f, ν⟩ = (1/N) Σ f(z_i), summed in index order.
pub fn quadrature<T: Real>(ens: &Ensemble<T>, f: impl Fn(&[T]) -> T) -> Result<T> {
    let mut acc = T::zero();
    for (i, z) in ens.iter().enumerate() {
        let v = f(z);
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("integrand non-finite at particle {i}")));
        }
        acc += v;
    }
    Ok(acc / T::of_usize(ens.count()))
}

/// Vector-valued quadrature; `f` writes `width` values per particle.
pub fn quadrature_vec<T: Real>(
    ens: &Ensemble<T>,
    width: usize,
    f: impl Fn(&[T], &mut [T]),
) -> Result<Vec<T>> {
    let mut acc = vec![T::zero(); width];
    let mut buf = vec![T::zero(); width];
    for (i, z) in ens.iter().enumerate() {
        f(z, &mut buf);
        if !all_finite(&buf) {
            return Err(Error::Evaluation(format!("integrand non-finite at particle {i}")));
        }
        for (a, &b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let n = T::of_usize(ens.count());
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean vector (`order == 1`) or second-moment matrix (`order == 2`).
pub fn empirical_moment<T: Real>(ens: &Ensemble<T>, order: usize) -> Result<Vec<T>> {
    match order {
        1 => Ok(ens.mean().to_vec()),
        2 => Ok(ens.second_moment()),
        k => Err(Error::Usage(format!("moment order must be 1 or 2, got {k}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DifferenceScheme {
    Forward,
    Central,
}

/// Default step for the Lions finite difference: 1e-4 · (1 + RMS norm).
pub fn default_lions_step<T: Real>(ens: &Ensemble<T>) -> T {
    T::of(1e-4) * (T::one() + ens.rms_norm())
}

/// Finite-difference estimate of ∂_μφ(ν)(z_i) on the empirical projection:
/// N·(φ(ν with z_i moved by h·e_k) − φ(ν))/h for each coordinate k.
pub fn lions_derivative<T: Real>(
    phi: impl Fn(&Ensemble<T>) -> T,
    ens: &Ensemble<T>,
    i: usize,
    h: T,
    scheme: DifferenceScheme,
) -> Result<Vec<T>> {
    if i >= ens.count() {
        return Err(Error::Usage(format!("particle index {i} out of range ({})", ens.count())));
    }
    if !(h > T::zero()) {
        return Err(Error::Usage("Lions step must be positive".into()));
    }
    let n = T::of_usize(ens.count());
    let eval = |e: &Ensemble<T>| {
        let v = phi(e);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation("measure observable non-finite on perturbed ensemble".into()))
        }
    };
    let mut out = Vec::with_capacity(ens.dim());
    match scheme {
        DifferenceScheme::Forward => {
            let base = eval(ens)?;
            for k in 0..ens.dim() {
                let up = eval(&ens.with_particle_shifted(i, k, h))?;
                out.push(n * (up - base) / h);
            }
        }
        DifferenceScheme::Central => {
            for k in 0..ens.dim() {
                let up = eval(&ens.with_particle_shifted(i, k, h))?;
                let down = eval(&ens.with_particle_shifted(i, k, -h))?;
                out.push(n * (up - down) / (T::of(2.0) * h));
            }
        }
    }
    Ok(out)
}

/// Lions gradient at every particle of an ensemble.
#[derive(Clone, Debug, Serialize)]
pub struct LionsGradientEstimate<T: Real = f64> {
    /// Row-major N × d.
    pub values: Vec<T>,
    pub step: T,
    pub observable_id: String,
}

pub fn lions_gradient<T: Real>(
    phi: impl Fn(&Ensemble<T>) -> T,
    ens: &Ensemble<T>,
    h: T,
    scheme: DifferenceScheme,
    observable_id: &str,
) -> Result<LionsGradientEstimate<T>> {
    let mut values = Vec::with_capacity(ens.count() * ens.dim());
    for i in 0..ens.count() {
        values.extend(lions_derivative(&phi, ens, i, h, scheme)?);
    }
    Ok(LionsGradientEstimate { values, step: h, observable_id: observable_id.to_string() })
}
