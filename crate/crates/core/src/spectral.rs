//! Fast evaluation of `O*(ΠX)` for the ordering search.
//!
//! The shift maps act on the first `(m + 1)t` rows as a cyclic group of
//! `t`-row blocks, so a discrete Fourier transform across blocks splits the
//! matching constraints into `m` independent frequencies. At frequency `k`
//! the block transform `A_k = Σ_i X_i ω^{ik}` is a `t × p` complex matrix;
//! the optimal coefficient vector restricted to that frequency is the
//! residual `R_k` of the tested columns of `A_k` on its nuisance columns.
//! With `G_k = R_kᴴR_k` and `Q = (m + 1)⁻¹ Re Σ_{k≠0} G_k⁻¹`,
//!
//! * `r = 1`: `O* = (m + 1)^{1/2} (Σ_k 1/‖R_k‖²)^{−1/2}`,
//! * `r > 1`: `O* = λ_max(Q^{−1/2} M Q^{−1/2})`.
//!
//! Rows past `(m + 1)t` never enter. The cost is `O(m²tp + mtp²)` per
//! evaluation instead of a dense `n × mp` least-squares fit. Frequencies
//! where the tested directions lie in the nuisance span make the objective
//! zero; cases this module cannot resolve (rank-deficient tested residuals
//! with `r > 1`) return `None` and callers fall back to the dense route.

use nalgebra::{Complex, DMatrix};

use crate::construction::{ShiftPlan, WeightMatrix};
use crate::linalg;

type C64 = Complex<f64>;

/// Relative residual norm below which a column counts as dependent.
const DEPENDENCE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SpectralObjective {
    plan: ShiftPlan,
    r: usize,
    p: usize,
    /// Row-major copy of the design.
    rows: Vec<f64>,
    /// Column norms; transformed columns far below them are exact zeros
    /// lost to rounding (the intercept at every nonzero frequency).
    col_norms: Vec<f64>,
    /// `ω^j = exp(2πij/(m+1))`.
    twiddles: Vec<C64>,
    weight: Option<DMatrix<f64>>,
}

impl SpectralObjective {
    pub fn new(x: &DMatrix<f64>, plan: ShiftPlan, r: usize, weight: Option<&WeightMatrix>) -> Self {
        let (n, p) = x.shape();
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            rows.extend(x.row(i).iter());
        }
        let col_norms = x.column_iter().map(|c| c.norm()).collect();
        let big_m = plan.m + 1;
        let twiddles = (0..big_m)
            .map(|j| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * j as f64 / big_m as f64))
            .collect();
        let weight = if r > 1 {
            Some(
                weight
                    .map(|w| w.matrix().clone())
                    .unwrap_or_else(|| DMatrix::identity(r, r)),
            )
        } else {
            None
        };
        SpectralObjective {
            plan,
            r,
            p,
            rows,
            col_norms,
            twiddles,
            weight,
        }
    }

    /// `O*(ΠX)` where `(ΠX)[i] = X[perm[i]]`.
    pub fn value(&self, perm: &[usize]) -> Option<f64> {
        let big_m = self.plan.m + 1;
        let t = self.plan.t;
        let p = self.p;
        let r = self.r;
        let mut inv_sum = 0.0;
        let mut q_sum = DMatrix::<f64>::zeros(r, r);
        let mut a = vec![C64::new(0.0, 0.0); t * p];
        for k in 1..=big_m / 2 {
            let weight = if 2 * k == big_m { 1.0 } else { 2.0 };
            // Column-major t × p block transform.
            a.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            for block in 0..big_m {
                let w = self.twiddles[(block * k) % big_m];
                for q in 0..t {
                    let row = perm[block * t + q];
                    let src = &self.rows[row * p..(row + 1) * p];
                    for (c, &v) in src.iter().enumerate() {
                        a[c * t + q] += w * v;
                    }
                }
            }
            let residual = tested_residual(&a, t, &self.col_norms, r)?;
            match residual {
                FrequencyResidual::Infeasible => return Some(0.0),
                FrequencyResidual::Single(rho2) => inv_sum += weight / rho2,
                FrequencyResidual::Gram(g) => {
                    let inv = g.try_inverse()?;
                    for i in 0..r {
                        for j in 0..r {
                            q_sum[(i, j)] += weight * inv[(i, j)].re;
                        }
                    }
                }
            }
        }
        if r == 1 {
            return Some((big_m as f64 / inv_sum).sqrt());
        }
        let q = (q_sum.clone() + q_sum.transpose()) * (0.5 / big_m as f64);
        let chol = q.cholesky()?;
        let l_inv = chol.l().try_inverse()?;
        let w = self.weight.as_ref().expect("weight set for r > 1");
        let pencil = &l_inv * w * l_inv.transpose();
        let sym = (&pencil + pencil.transpose()) * 0.5;
        Some(linalg::sym_top_eigen(&sym).0.max(0.0))
    }
}

enum FrequencyResidual {
    Infeasible,
    Single(f64),
    Gram(DMatrix<C64>),
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Remove the components of `v` along the orthonormal `basis`, twice for
/// numerical orthogonality.
fn orthogonalize(v: &mut [C64], basis: &[Vec<C64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
    }
}

/// Residualize the first `r` columns of the column-major `t × p` matrix `a`
/// on the span of the remaining columns.
fn tested_residual(a: &[C64], t: usize, col_norms: &[f64], r: usize) -> Option<FrequencyResidual> {
    let p = col_norms.len();
    let vanishes = |c: usize, v: f64| v <= DEPENDENCE_TOLERANCE * col_norms[c];
    let mut basis: Vec<Vec<C64>> = Vec::new();
    for c in r..p {
        let mut v = a[c * t..(c + 1) * t].to_vec();
        let before = norm(&v);
        if vanishes(c, before) {
            continue;
        }
        orthogonalize(&mut v, &basis);
        let after = norm(&v);
        if after > DEPENDENCE_TOLERANCE * before {
            v.iter_mut().for_each(|z| *z /= after);
            basis.push(v);
        }
    }
    let mut residuals = Vec::with_capacity(r);
    for c in 0..r {
        let mut v = a[c * t..(c + 1) * t].to_vec();
        let before = norm(&v);
        orthogonalize(&mut v, &basis);
        let after = norm(&v);
        if vanishes(c, before) || after <= DEPENDENCE_TOLERANCE * before {
            if r == 1 {
                return Some(FrequencyResidual::Infeasible);
            }
            return None;
        }
        residuals.push(v);
    }
    if r == 1 {
        let rho = norm(&residuals[0]);
        return Some(FrequencyResidual::Single(rho * rho));
    }
    // The tested residuals themselves must be independent for G_k to be
    // invertible.
    let mut scratch: Vec<Vec<C64>> = Vec::new();
    for v in &residuals {
        let mut w = v.clone();
        let before = norm(&w);
        orthogonalize(&mut w, &scratch);
        let after = norm(&w);
        if after <= DEPENDENCE_TOLERANCE * before {
            return None;
        }
        w.iter_mut().for_each(|z| *z /= after);
        scratch.push(w);
    }
    let g = DMatrix::from_fn(r, r, |i, j| dot(&residuals[i], &residuals[j]));
    Some(FrequencyResidual::Gram(g))
}
