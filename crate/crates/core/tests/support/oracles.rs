//! Independent reference computations used by the integration tests.
//!
//! Everything here is built from dense matrices and textbook algorithms so
//! that it shares no code path with the library under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Dense `n × n` matrix of the `j`-th cyclic shift:
/// `(Π_j η)[i] = η[(i + tj) mod (m+1)t]` on the first `(m+1)t` rows.
pub fn shift_matrix(n: usize, m: usize, j: usize) -> DMatrix<f64> {
    let t = n / (m + 1);
    let len = (m + 1) * t;
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let src = if i < len { (i + t * j) % len } else { i };
        p[(i, src)] = 1.0;
    }
    p
}

/// Orthonormal basis of the orthogonal complement of `span(c)`, from the
/// full SVD of `c` padded with zero columns to a square matrix.
pub fn complement_basis(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.nrows();
    let k = c.ncols();
    assert!(k <= n, "more constraints than rows");
    let mut padded = DMatrix::zeros(n, n);
    padded.columns_mut(0, k).copy_from(c);
    let svd = padded.svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let tol = (n as f64) * f64::EPSILON * smax.max(1.0) * 100.0;
    let keep: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= tol).collect();
    DMatrix::from_fn(n, keep.len(), |i, j| u[(i, keep[j])])
}

/// Matrix whose columns must be orthogonal to `η*`, and the gap directions
/// `(Π₀ − Π₁)ᵀX_{[r]}`.
pub fn constraint_system(x: &DMatrix<f64>, m: usize, r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let shifts: Vec<DMatrix<f64>> = (0..=m).map(|j| shift_matrix(n, m, j)).collect();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 1..=m {
        // Nuisance inner products equal to those of η₀.
        let d = (&shifts[j] - &shifts[0]).transpose();
        for c in r..p {
            cols.push(&d * x.column(c));
        }
        // Tested inner products equal across j ≥ 1.
        if j >= 2 {
            let d1 = (&shifts[j] - &shifts[1]).transpose();
            for c in 0..r {
                cols.push(&d1 * x.column(c));
            }
        }
    }
    let c = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    let gap = (&shifts[0] - &shifts[1]).transpose() * x.columns(0, r);
    (c, gap)
}

/// `max ‖η‖=1 δ(η)` for one tested column, by projecting the gap direction
/// onto the null space of the constraints.
pub fn r1_objective(x: &DMatrix<f64>, m: usize) -> f64 {
    let (c, gap) = constraint_system(x, m, 1);
    let basis = complement_basis(&c);
    (basis.transpose() * gap.column(0)).norm()
}

/// `λ_max(BᵀPB)` with `M = I`, by power iteration on the `r × r` matrix.
pub fn general_objective(x: &DMatrix<f64>, m: usize, r: usize) -> f64 {
    let (c, gap) = constraint_system(x, m, r);
    let basis = complement_basis(&c);
    let reduced = basis.transpose() * gap;
    let k = reduced.transpose() * &reduced;
    power_iteration(&k)
}

pub fn power_iteration(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w = a * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Pearson χ² statistic and its upper-tail probability.
pub fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (stat, dist.sf(stat))
}

/// One-sample Kolmogorov–Smirnov test against Unif(0, 1) with the
/// asymptotic Kolmogorov distribution.
pub fn ks_uniform(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let lo = v - i as f64 / n;
            let hi = (i + 1) as f64 / n - v;
            lo.max(hi)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}
