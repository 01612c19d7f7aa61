//! Coefficient vectors `η₀ … η_m` whose statistics `yᵀη_j` are invariant
//! under the cyclic permutation group when the tested coefficients vanish.
//!
//! Every `η_j` is a block-cyclic shift of one base vector `η*`: the first
//! `(m + 1)t` entries are rotated left by `t·j`, the last `s` entries stay
//! put. The base vector is chosen so that
//!
//! * the nuisance columns see the same inner product for every `j`
//!   (`X_{[−r]}ᵀη_j = γ_{[−r]}`), and
//! * the tested columns see a common value for `j ≥ 1` and a gap `δ` at
//!   `j = 0`, with `δ` (or `δᵀMδ` for several columns) as large as possible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, ColumnSpace};
use crate::{CptError, Result};

/// Relative tolerance for the matching conditions on solved systems.
pub const CONDITION_TOLERANCE: f64 = 1e-8;
/// Relative size below which the signal direction is treated as zero.
pub const VANISHING_TOLERANCE: f64 = 1e-12;

/// Block layout of the cyclic shifts: `n = (m + 1)t + s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftPlan {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub s: usize,
}

impl ShiftPlan {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(CptError::InvalidInput("m must be at least 1".into()));
        }
        let t = n / (m + 1);
        if t == 0 {
            return Err(CptError::InvalidInput(format!(
                "n = {n} is smaller than m + 1 = {}; no nontrivial shifts exist",
                m + 1
            )));
        }
        Ok(ShiftPlan {
            n,
            m,
            t,
            s: n - (m + 1) * t,
        })
    }

    /// Number of rotated coordinates, `(m + 1)t`.
    pub fn cycle_len(&self) -> usize {
        (self.m + 1) * self.t
    }

    fn map(&self, j: usize) -> Vec<usize> {
        let cyc = self.cycle_len();
        (0..self.n)
            .map(|i| if i < cyc { (i + self.t * j) % cyc } else { i })
            .collect()
    }

    /// `η_j` from `η*` by gathering through the shift map.
    pub fn shift(&self, j: usize, eta_star: &DVector<f64>) -> DVector<f64> {
        let map = self.map(j % (self.m + 1));
        DVector::from_iterator(self.n, map.iter().map(|&k| eta_star[k]))
    }
}

/// Index map of `Π_j`: `η_j[i] = η*[map[i]]`. `j = 0` is the identity.
pub fn shift_operator(plan: &ShiftPlan, j: usize) -> Result<Vec<usize>> {
    if j > plan.m {
        return Err(CptError::InvalidInput(format!(
            "shift index {j} outside [0, {}]",
            plan.m
        )));
    }
    Ok(plan.map(j))
}

/// `Π_jᵀ X` by scattering rows: row `i` of `X` lands at row `map[i]`.
fn shift_transpose_rows(x: &DMatrix<f64>, plan: &ShiftPlan, j: usize) -> DMatrix<f64> {
    let map = plan.map(j);
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, &k) in map.iter().enumerate() {
        out.row_mut(k).copy_from(&x.row(i));
    }
    out
}

/// `B(X) = ((Π₀ − Π_m)ᵀX ⋯ (Π_{m−1} − Π_m)ᵀX)`, an `n × mp` matrix with
/// `Π₀ = I`.
pub fn build_b(x: &DMatrix<f64>, plan: &ShiftPlan) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if n != plan.n {
        return Err(CptError::DimensionMismatch(format!(
            "design has {n} rows, shift plan expects {}",
            plan.n
        )));
    }
    let last = shift_transpose_rows(x, plan, plan.m);
    let mut b = DMatrix::zeros(n, plan.m * p);
    for k in 0..plan.m {
        let block = shift_transpose_rows(x, plan, k) - &last;
        b.columns_mut(k * p, p).copy_from(&block);
    }
    Ok(b)
}

/// Symmetric positive semidefinite weight `M` of the quadratic signal
/// criterion `δᵀMδ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(CptError::InvalidInput(format!(
                "weight matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if (&m - m.transpose()).amax() > 1e-12 {
            return Err(CptError::InvalidInput("weight matrix is not symmetric".into()));
        }
        let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(CptError::InvalidInput(format!(
                "weight matrix is not positive semidefinite (eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(WeightMatrix(m))
    }

    pub fn identity(r: usize) -> Self {
        WeightMatrix(DMatrix::identity(r, r))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// A solved set of coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSystem {
    pub plan: ShiftPlan,
    pub r: usize,
    pub eta_star: DVector<f64>,
    /// `η₀ … η_m`.
    pub etas: Vec<DVector<f64>>,
    /// Common inner products `Xᵀη_j` for `j ≥ 1` (all `p` columns).
    pub gamma: DVector<f64>,
    /// `X_{[r]}ᵀη₀ − γ_{[r]}`.
    pub delta: DVector<f64>,
    /// `O*(X)`: `‖η̃‖₂` for `r = 1`, `λ_max(M_r(X))` otherwise.
    pub objective: f64,
    /// Set when the signal direction vanished; the test stays valid but
    /// has trivial power.
    pub vanishing_signal: bool,
}

impl EtaSystem {
    fn assemble(
        x: &DMatrix<f64>,
        plan: ShiftPlan,
        r: usize,
        eta_star: DVector<f64>,
        delta: DVector<f64>,
        objective: f64,
        vanishing_signal: bool,
    ) -> Result<Self> {
        let etas: Vec<DVector<f64>> = (0..=plan.m).map(|j| plan.shift(j, &eta_star)).collect();
        let gamma = x.tr_mul(&etas[1]);
        let system = EtaSystem {
            plan,
            r,
            eta_star,
            etas,
            gamma,
            delta,
            objective,
            vanishing_signal,
        };
        system.verify(x)?;
        Ok(system)
    }

    pub fn m(&self) -> usize {
        self.plan.m
    }

    /// Tolerance `τ · ‖X‖_∞ · ‖η*‖` for the matching conditions.
    pub fn tolerance(&self, x: &DMatrix<f64>) -> f64 {
        CONDITION_TOLERANCE * linalg::inf_norm(x).max(f64::MIN_POSITIVE) * self.eta_star.norm()
    }

    /// Check nuisance matching, the common tested value for `j ≥ 1`, and
    /// the stored gap against the realized inner products.
    pub fn verify(&self, x: &DMatrix<f64>) -> Result<()> {
        let tol = self.tolerance(x);
        let p = x.ncols();
        let products: Vec<DVector<f64>> = self.etas.iter().map(|e| x.tr_mul(e)).collect();
        let mut nuisance = 0.0f64;
        let mut tested = 0.0f64;
        for (j, prod) in products.iter().enumerate() {
            for c in 0..p {
                let diff = (prod[c] - self.gamma[c]).abs();
                if c >= self.r {
                    nuisance = nuisance.max(diff);
                } else if j >= 1 {
                    tested = tested.max(diff);
                }
            }
        }
        if nuisance > tol {
            return Err(CptError::ConstructionTolerance {
                condition: "nuisance columns must match across shifts",
                residual: nuisance,
                tolerance: tol,
            });
        }
        let mut gap = 0.0f64;
        for c in 0..self.r {
            gap = gap.max((products[0][c] - products[1][c] - self.delta[c]).abs());
        }
        let worst = tested.max(gap);
        if worst > tol {
            return Err(CptError::ConstructionTolerance {
                condition: "tested columns must share one value for j >= 1 and differ by delta at j = 0",
                residual: worst,
                tolerance: tol,
            });
        }
        Ok(())
    }

    /// `S_j = yᵀη_j`.
    pub fn statistics(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        if y.len() != self.plan.n {
            return Err(CptError::DimensionMismatch(format!(
                "outcome has length {}, system expects {}",
                y.len(),
                self.plan.n
            )));
        }
        Ok(self.etas.iter().map(|e| e.dot(y)).collect())
    }
}

/// First unit vector with a non-negligible component in the orthogonal
/// complement of `space`, projected and normalized.
fn null_vector(space: &ColumnSpace, n: usize) -> Option<DVector<f64>> {
    (0..n).find_map(|i| {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let v = space.residual(&e);
        let norm = v.norm();
        (norm > 1e-8).then(|| v / norm)
    })
}

/// A coefficient vector satisfying only the cyclic-shift structure and the
/// nuisance matching, for designs whose columns are all nuisance.
///
/// Requires `n / (p − r) > m`. Returns `(η*, γ_{[−r]})`.
pub fn solve_validity_only(x_minus_r: &DMatrix<f64>, plan: &ShiftPlan) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, q) = x_minus_r.shape();
    if n != plan.n {
        return Err(CptError::DimensionMismatch(format!(
            "design has {n} rows, shift plan expects {}",
            plan.n
        )));
    }
    if q == 0 {
        let mut e = DVector::zeros(n);
        e[0] = 1.0;
        return Ok((e, DVector::zeros(0)));
    }
    if n <= plan.m * q {
        return Err(CptError::ValidityConditionViolated {
            n,
            nuisance: q,
            m: plan.m,
        });
    }
    let b = build_b(x_minus_r, plan)?;
    let space = ColumnSpace::of(&b);
    let eta_star = null_vector(&space, n).ok_or_else(|| CptError::DegenerateSystem("empty null space".into()))?;
    let system = EtaSystem::assemble(x_minus_r, *plan, 0, eta_star, DVector::zeros(0), 0.0, true)?;
    Ok((system.eta_star, system.gamma))
}

/// Closed-form optimal system for a single tested column (column 0).
///
/// `η̃` is the minimum-norm least-squares residual of `B(X)₁` on the
/// remaining columns of `B(X)`; `η* = η̃ / ‖η̃‖` and `O*(X) = δ = ‖η̃‖`.
pub fn solve_eta_r1(x: &DMatrix<f64>, plan: &ShiftPlan) -> Result<EtaSystem> {
    let (n, p) = x.shape();
    if n < p * plan.m {
        return Err(CptError::PowerConditionViolated { n, p, m: plan.m, r: 1 });
    }
    let b = build_b(x, plan)?;
    let b1 = b.column(0).into_owned();
    let rest = b.columns(1, b.ncols() - 1).into_owned();
    let eta_tilde = ColumnSpace::of(&rest).residual(&b1);
    let norm = eta_tilde.norm();
    if b1.norm() == 0.0 || norm <= VANISHING_TOLERANCE * b1.norm() {
        return vanishing_system(x, plan, 1, &b);
    }
    EtaSystem::assemble(
        x,
        *plan,
        1,
        eta_tilde / norm,
        DVector::from_element(1, norm),
        norm,
        false,
    )
}

/// Optimal system for `r ≥ 1` tested columns under the quadratic criterion
/// `δᵀMδ`, via the top eigenvector of
/// `M_r(X) = (I − H_{[−r]})B_{[r]} M B_{[r]}ᵀ(I − H_{[−r]})`.
pub fn solve_eta_general(x: &DMatrix<f64>, plan: &ShiftPlan, r: usize, weight: &WeightMatrix) -> Result<EtaSystem> {
    let (n, p) = x.shape();
    if r == 0 || r > p {
        return Err(CptError::TooManyConstraints { r, p });
    }
    if weight.dim() != r {
        return Err(CptError::DimensionMismatch(format!(
            "weight matrix is {0}x{0}, expected {r}x{r}",
            weight.dim()
        )));
    }
    if n + r < p * plan.m + 1 {
        return Err(CptError::PowerConditionViolated { n, p, m: plan.m, r });
    }
    let b = build_b(x, plan)?;
    let tested = b.columns(0, r).into_owned();
    let rest = b.columns(r, b.ncols() - r).into_owned();
    let resid = ColumnSpace::of(&rest).residual_matrix(&tested);

    // Nonzero spectrum of C M Cᵀ equals that of M^{1/2} CᵀC M^{1/2}; map the
    // small eigenvector back through C M^{1/2}.
    let m_half = linalg::psd_sqrt(weight.matrix());
    let small = &m_half * resid.tr_mul(&resid) * &m_half;
    let (lambda, w) = linalg::sym_top_eigen(&small);
    let u = &resid * (&m_half * w);
    let scale = weight.matrix().norm() * tested.norm_squared();
    if u.norm() == 0.0 || lambda <= VANISHING_TOLERANCE * scale {
        return vanishing_system(x, plan, r, &b);
    }
    let mut eta_star = &u / u.norm();
    let mut delta = tested.tr_mul(&eta_star);
    let mut oriented = delta.clone();
    linalg::fix_sign(&mut oriented);
    if oriented != delta {
        eta_star.neg_mut();
        delta.neg_mut();
    }
    EtaSystem::assemble(x, *plan, r, eta_star, delta, lambda.max(0.0), false)
}

/// Dispatch on `r`: the closed form for one column, the eigenvector
/// solution (default `M = I`) otherwise.
pub fn solve_eta(x: &DMatrix<f64>, plan: &ShiftPlan, r: usize, weight: Option<&WeightMatrix>) -> Result<EtaSystem> {
    if r == 1 {
        solve_eta_r1(x, plan)
    } else {
        let identity;
        let weight = match weight {
            Some(w) => w,
            None => {
                identity = WeightMatrix::identity(r);
                &identity
            }
        };
        solve_eta_general(x, plan, r, weight)
    }
}

/// When no direction separates `η₀` from the rest, fall back to a vector in
/// the null space of all of `B(X)ᵀ`: every column matches across shifts,
/// `δ = 0`.
fn vanishing_system(x: &DMatrix<f64>, plan: &ShiftPlan, r: usize, b: &DMatrix<f64>) -> Result<EtaSystem> {
    let space = ColumnSpace::of(b);
    let eta_star = null_vector(&space, plan.n).ok_or_else(|| CptError::DegenerateSystem("empty null space".into()))?;
    EtaSystem::assemble(x, *plan, r, eta_star, DVector::zeros(r), 0.0, true)
}
