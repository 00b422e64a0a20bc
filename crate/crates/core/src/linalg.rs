//! Small dense linear algebra on row-major `Vec<T>` matrices.
//!
//! The matrices in this engine are d×d with d the slow or fast dimension,
//! so cyclic Jacobi is both simple and accurate enough.

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn identity<T: Real>(n: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = T::one();
    }
    m
}

pub fn transpose<T: Real>(a: &[T], n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// `a * a^T`
pub fn outer_self<T: Real>(a: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = T::zero();
            for k in 0..n {
                s += a[i * n + k] * a[j * n + k];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[inline]
pub fn mat_vec_into<T: Real>(a: &[T], v: &[T], out: &mut [T]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * n..(i + 1) * n];
        *o = row.iter().zip(v).map(|(&x, &y)| x * y).sum();
    }
}

pub fn symmetrize<T: Real>(a: &[T], n: usize) -> Vec<T> {
    let half = T::of(0.5);
    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = half * (a[i * n + j] + a[j * n + i]);
        }
    }
    s
}

pub fn frobenius<T: Real>(a: &[T]) -> T {
    a.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as columns.
pub fn sym_eigen<T: Real>(a: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut m = symmetrize(a, n);
    let mut v = identity::<T>(n);
    let scale = frobenius(&m).max(T::min_positive_value());
    let tol = T::epsilon() * scale * T::of(1e-2);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[i * n + i]).collect();
    (eig, v)
}

/// Principal square root of the symmetric part of `a`.
///
/// Eigenvalues in `[-tol, 0)` are clipped to zero; anything more negative is
/// reported as [`Error::NotPsd`].
pub fn psd_sqrt<T: Real>(a: &[T], n: usize, tol: T) -> Result<Vec<T>> {
    if a.len() != n * n {
        return Err(Error::Structural(format!(
            "expected a {n}x{n} matrix, got {} entries",
            a.len()
        )));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Evaluation("matrix has non-finite entries".into()));
    }
    if n == 1 {
        let v = a[0];
        if v < -tol {
            return Err(Error::NotPsd { eigenvalues: vec![v.as_f64()] });
        }
        return Ok(vec![v.max(T::zero()).sqrt()]);
    }
    let (eig, vecs) = sym_eigen(a, n);
    if eig.iter().any(|&l| l < -tol) {
        return Err(Error::NotPsd { eigenvalues: eig.iter().map(|v| v.as_f64()).collect() });
    }
    let roots: Vec<T> = eig.iter().map(|&l| l.max(T::zero()).sqrt()).collect();
    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for k in 0..n {
                acc += vecs[i * n + k] * roots[k] * vecs[j * n + k];
            }
            s[i * n + j] = acc;
        }
    }
    Ok(s)
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix.
/// Zero pivots are tolerated (the corresponding column is left zero).
pub fn cholesky<T: Real>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(T::zero(), T::max);
    let tol = T::epsilon() * T::of(64.0) * scale.max(T::one());
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d < -tol {
            return Err(Error::NotPsd { eigenvalues: sym_eigen(a, n).0.iter().map(|v| v.as_f64()).collect() });
        }
        let d = d.max(T::zero()).sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = if d > T::zero() { s / d } else { T::zero() };
        }
    }
    Ok(l)
}

/// Matrix exponential by scaling and squaring with a Taylor kernel.
pub fn expm<T: Real>(a: &[T], n: usize) -> Vec<T> {
    if n == 1 {
        return vec![a[0].exp()];
    }
    let norm = frobenius(a);
    let mut squarings = 0;
    let mut scale = T::one();
    while norm * scale > T::of(0.5) {
        scale /= T::of(2.0);
        squarings += 1;
    }
    let scaled: Vec<T> = a.iter().map(|&v| v * scale).collect();
    let mut result = identity::<T>(n);
    let mut term = identity::<T>(n);
    for k in 1..=16 {
        term = matmul(&term, &scaled, n);
        let inv = T::one() / T::of_usize(k);
        term.iter_mut().for_each(|v| *v *= inv);
        result.iter_mut().zip(&term).for_each(|(r, &t)| *r += t);
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, n);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        let (mut eig, _) = sym_eigen::<f64>(&[2.0, 1.0, 1.0, 2.0], 2);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-14 && (eig[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_reconstructs() {
        let a: [f64; 9] = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let back = outer_self(&l, 3);
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        assert!(matches!(psd_sqrt(&[1.0, 0.0, 0.0, -1.0], 2, 1e-8), Err(Error::NotPsd { .. })));
        let s = psd_sqrt(&[1.0, 0.0, 0.0, -1e-10], 2, 1e-8).unwrap();
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn expm_of_diagonal_and_rotation() {
        let e = expm::<f64>(&[1.0, 0.0, 0.0, -2.0], 2);
        assert!((e[0] - 1f64.exp()).abs() < 1e-13 && (e[3] - (-2f64).exp()).abs() < 1e-14);
        let r = expm::<f64>(&[0.0, -1.0, 1.0, 0.0], 2);
        assert!((r[0] - 1f64.cos()).abs() < 1e-13 && (r[2] - 1f64.sin()).abs() < 1e-13);
    }
}
