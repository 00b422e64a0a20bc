//! Quadratic Wasserstein distance between empirical measures.

use serde::Serialize;

use super::Ensemble;
use crate::error::{Error, Result};
use crate::rng::{self, channel};
use crate::scalar::Real;

/// Largest N·M accepted by the exact transport solver.
pub const EXACT_ASSIGNMENT_LIMIT: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum W2Method {
    /// Sorted matching; d = 1 and equal particle counts.
    Exact1d,
    /// Exact discrete optimal transport; N·M ≤ 10⁴.
    ExactAssignment,
    /// Average of 1-D distances over `directions` random unit directions.
    Sliced { directions: usize, seed: u64 },
}

pub fn wasserstein2<T: Real>(a: &Ensemble<T>, b: &Ensemble<T>, method: W2Method) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::Structural(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    match method {
        W2Method::Exact1d => {
            if a.dim() != 1 {
                return Err(Error::Usage("exact1d requires one-dimensional ensembles".into()));
            }
            if a.count() != b.count() {
                return Err(Error::Usage(format!(
                    "exact1d requires equal particle counts ({} vs {}); use exact_assignment or sliced",
                    a.count(),
                    b.count()
                )));
            }
            Ok(sorted_w2_sq(&sorted(a.particles()), &sorted(b.particles())).sqrt())
        }
        W2Method::ExactAssignment => {
            if a.count() * b.count() > EXACT_ASSIGNMENT_LIMIT {
                return Err(Error::Usage(format!(
                    "exact_assignment limited to N·M ≤ {EXACT_ASSIGNMENT_LIMIT}, got {}",
                    a.count() * b.count()
                )));
            }
            Ok(transport_cost(a, b).max(T::zero()).sqrt())
        }
        W2Method::Sliced { directions, seed } => {
            if directions == 0 {
                return Err(Error::Usage("sliced W2 needs at least one direction".into()));
            }
            Ok(sliced_w2_sq(a, b, directions, seed).sqrt())
        }
    }
}

/// Picks exact methods when they apply and 64-direction sliced otherwise.
pub fn wasserstein2_auto<T: Real>(a: &Ensemble<T>, b: &Ensemble<T>) -> Result<T> {
    if a.dim() == 1 {
        if a.count() == b.count() {
            return wasserstein2(a, b, W2Method::Exact1d);
        }
        return Ok(quantile_w2_sq(&sorted(a.particles()), &sorted(b.particles())).sqrt());
    }
    if a.count() * b.count() <= EXACT_ASSIGNMENT_LIMIT {
        return wasserstein2(a, b, W2Method::ExactAssignment);
    }
    wasserstein2(a, b, W2Method::Sliced { directions: 64, seed: 0 })
}

/// Sampling-noise scale of an ensemble: W₂ between its even and odd halves
/// divided by √2. Zero for ensembles with fewer than two particles.
pub fn w2_noise_floor<T: Real>(ens: &Ensemble<T>) -> T {
    match ens.halves() {
        Some((even, odd)) => {
            wasserstein2_auto(&even, &odd).unwrap_or(T::zero()) / T::of(std::f64::consts::SQRT_2)
        }
        None => T::zero(),
    }
}

fn sorted<T: Real>(v: &[T]) -> Vec<T> {
    let mut s = v.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).expect("finite ensemble"));
    s
}

fn sorted_w2_sq<T: Real>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    s / T::of_usize(a.len())
}

/// ∫₀¹ (F_a⁻¹(u) − F_b⁻¹(u))² du for sorted samples of any sizes.
fn quantile_w2_sq<T: Real>(a: &[T], b: &[T]) -> T {
    if a.len() == b.len() {
        return sorted_w2_sq(a, b);
    }
    let (n, m) = (a.len() as u64, b.len() as u64);
    // Breakpoints i/n and j/m compared exactly as i·m vs j·n.
    let (mut i, mut j) = (0u64, 0u64);
    let mut prev = 0u64;
    let total = n * m;
    let mut acc = T::zero();
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let diff = a[i as usize] - b[j as usize];
        acc += diff * diff * T::of((next - prev) as f64);
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    acc / T::of(total as f64)
}

fn sliced_w2_sq<T: Real>(a: &Ensemble<T>, b: &Ensemble<T>, directions: usize, seed: u64) -> T {
    let d = a.dim();
    let mut rng = rng::stream(seed, channel::SLICED, 0);
    let mut dir = vec![T::zero(); d];
    let mut acc = T::zero();
    for _ in 0..directions {
        loop {
            for v in dir.iter_mut() {
                *v = rng::normal(&mut rng);
            }
            let norm = dir.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::of(1e-12) {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        let project = |e: &Ensemble<T>| -> Vec<T> {
            sorted(&e.iter().map(|z| crate::scalar::dot(z, &dir)).collect::<Vec<_>>())
        };
        acc += quantile_w2_sq(&project(a), &project(b));
    }
    acc / T::of_usize(directions)
}

/// Minimum of Σ π_ij |a_i − b_j|² over couplings of the two empirical
/// measures. Each source carries M units and each sink N units, so all
/// flows are integral; solved by successive shortest paths with potentials.
fn transport_cost<T: Real>(a: &Ensemble<T>, b: &Ensemble<T>) -> T {
    let (n, m) = (a.count(), b.count());
    let cost: Vec<T> = (0..n)
        .flat_map(|i| {
            let zi = a.particle(i);
            (0..m).map(move |j| {
                zi.iter().zip(b.particle(j)).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>()
            })
        })
        .collect();
    let mut supply = vec![m as u64; n];
    let mut demand = vec![n as u64; m];
    let mut flow = vec![0u64; n * m];
    let mut pot = vec![T::zero(); n + m];
    let inf = T::infinity();
    let mut dist = vec![inf; n + m];
    let mut prev = vec![usize::MAX; n + m];
    let mut done = vec![false; n + m];
    let mut remaining = (n * m) as u64;

    while remaining > 0 {
        dist.iter_mut().for_each(|v| *v = inf);
        prev.iter_mut().for_each(|v| *v = usize::MAX);
        done.iter_mut().for_each(|v| *v = false);
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = T::zero();
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = inf;
            for (v, &dv) in dist.iter().enumerate() {
                if !done[v] && dv < best {
                    best = dv;
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                let i = u;
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (cost[i * m + j] + pot[i] - pot[v]).max(T::zero());
                    if best + rc < dist[v] {
                        dist[v] = best + rc;
                        prev[v] = i;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] == 0 {
                        continue;
                    }
                    let rc = (pot[u] - pot[i] - cost[i * m + j]).max(T::zero());
                    if best + rc < dist[i] {
                        dist[i] = best + rc;
                        prev[i] = u;
                    }
                }
            }
        }
        let mut target = usize::MAX;
        let mut best = inf;
        for j in 0..m {
            if demand[j] > 0 && dist[n + j] < best {
                best = dist[n + j];
                target = n + j;
            }
        }
        debug_assert!(target != usize::MAX, "transport graph disconnected");
        for v in 0..n + m {
            pot[v] += dist[v].min(best);
        }
        // Walk back to a source, collecting the bottleneck.
        let mut amount = demand[target - n];
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        let source = v;
        amount = amount.min(supply[source]);
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                flow[v * m + (u - n)] -= amount;
            }
            v = u;
        }
        supply[source] -= amount;
        demand[target - n] -= amount;
        remaining -= amount;
    }

    let total: T = flow
        .iter()
        .zip(&cost)
        .filter(|(&f, _)| f > 0)
        .map(|(&f, &c)| T::of(f as f64) * c)
        .sum();
    total / T::of((n * m) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(v: &[f64]) -> Ensemble {
        Ensemble::from_scalars(v).unwrap()
    }

    fn brute_force(a: &Ensemble, b: &Ensemble) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for k in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(k, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = a.count();
        perms(n)
            .into_iter()
            .map(|p| {
                (0..n)
                    .map(|i| {
                        a.particle(i).iter().zip(b.particle(p[i])).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    #[test]
    fn one_dimensional_examples() {
        let d = wasserstein2(&e1(&[0.0, 1.0]), &e1(&[1.0, 0.0]), W2Method::Exact1d).unwrap();
        assert_eq!(d, 0.0);
        let d = wasserstein2(&e1(&[0.0, 0.0]), &e1(&[1.0, 1.0]), W2Method::Exact1d).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert!(wasserstein2(&e1(&[0.0, 1.0]), &e1(&[0.0, 1.0, 2.0]), W2Method::Exact1d).is_err());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let a = Ensemble::from_points(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5], vec![-1.0, 3.0]])
            .unwrap();
        let b = Ensemble::from_points(&[vec![1.0, 1.0], vec![0.0, 0.0], vec![3.0, 2.0], vec![-2.0, 2.5]])
            .unwrap();
        let exact = wasserstein2(&a, &b, W2Method::ExactAssignment).unwrap();
        assert!((exact - brute_force(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn unequal_counts_match_replication() {
        // A coupling of 2 vs 3 particles equals an assignment of 6 vs 6 replicas.
        let a = e1(&[0.0, 3.0]);
        let b = e1(&[1.0, 2.0, 5.0]);
        let exact = wasserstein2(&a, &b, W2Method::ExactAssignment).unwrap();
        let ar = e1(&[0.0, 0.0, 0.0, 3.0, 3.0, 3.0]);
        let br = e1(&[1.0, 1.0, 2.0, 2.0, 5.0, 5.0]);
        let sorted = wasserstein2(&ar, &br, W2Method::Exact1d).unwrap();
        assert!((exact - sorted).abs() < 1e-12);
        assert!((quantile_w2_sq::<f64>(&[0.0, 3.0], &[1.0, 2.0, 5.0]).sqrt() - sorted).abs() < 1e-12);
    }

    #[test]
    fn sliced_equals_exact_in_one_dimension() {
        let a = e1(&[0.0, 1.5, -2.0]);
        let b = e1(&[1.0, 0.2, 4.0]);
        let exact = wasserstein2(&a, &b, W2Method::Exact1d).unwrap();
        let sliced = wasserstein2(&a, &b, W2Method::Sliced { directions: 8, seed: 3 }).unwrap();
        assert!((exact - sliced).abs() < 1e-12);
    }

    #[test]
    fn translation_distance() {
        let a = Ensemble::from_points(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let b = a.translated(&[3.0, 4.0]);
        let d: f64 = wasserstein2(&a, &b, W2Method::ExactAssignment).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn size_limit_enforced() {
        let a = e1(&vec![0.0; 101]);
        let b = e1(&vec![0.0; 100]);
        assert!(wasserstein2(&a, &b, W2Method::ExactAssignment).is_err());
    }
}
