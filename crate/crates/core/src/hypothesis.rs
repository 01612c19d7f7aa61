//! Reduction of a general linear hypothesis `H0: Rᵀβ = 0` to the
//! sub-hypothesis `H0: β₁ = … = β_r = 0` by an orthonormal change of basis
//! on the design columns.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, ColumnSpace};
use crate::{CptError, Result};

/// Which directions of β are tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContrastSpec {
    /// Column indices (0-based) whose coefficients are jointly zero under H0.
    Indices(Vec<usize>),
    /// A `p × r` contrast matrix `R` of full column rank.
    Contrast(DMatrix<f64>),
}

impl ContrastSpec {
    pub fn single(index: usize) -> Self {
        ContrastSpec::Indices(vec![index])
    }

    /// Number of tested directions `r`.
    pub fn r(&self) -> usize {
        match self {
            ContrastSpec::Indices(ix) => ix.len(),
            ContrastSpec::Contrast(c) => c.ncols(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReducedProblem {
    /// `X̃ = (X·U ⋮ X·V)`; the first `r` columns carry the tested directions.
    pub x: DMatrix<f64>,
    pub basis_u: DMatrix<f64>,
    pub basis_v: DMatrix<f64>,
    pub spec: ContrastSpec,
}

impl ReducedProblem {
    pub fn r(&self) -> usize {
        self.basis_u.ncols()
    }

    /// Factor converting the first reduced coefficient `β̃₁ = U₁ᵀβ` to the
    /// contrast value `Rᵀβ` when `r = 1`.
    pub fn contrast_scale(&self) -> Option<f64> {
        match &self.spec {
            ContrastSpec::Indices(ix) if ix.len() == 1 => Some(1.0),
            ContrastSpec::Contrast(c) if c.ncols() == 1 => Some(c.norm()),
            _ => None,
        }
    }
}

/// Rotate the design so that testing its first `r` coefficients is
/// equivalent to testing `Rᵀβ = 0`.
///
/// Index specs are a pure column reordering (tested columns first, in
/// ascending order, then the remaining columns in their original order).
pub fn reduce(x: &DMatrix<f64>, spec: &ContrastSpec) -> Result<ReducedProblem> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 {
        return Err(CptError::InvalidInput(format!("design must be non-empty, got {n}x{p}")));
    }
    match spec {
        ContrastSpec::Indices(indices) => reduce_indices(x, indices, spec),
        ContrastSpec::Contrast(contrast) => reduce_contrast(x, contrast, spec),
    }
}

fn reduce_indices(x: &DMatrix<f64>, indices: &[usize], spec: &ContrastSpec) -> Result<ReducedProblem> {
    let p = x.ncols();
    let r = indices.len();
    if r > p {
        return Err(CptError::TooManyConstraints { r, p });
    }
    if r == 0 {
        return Err(CptError::InvalidInput("no tested columns".into()));
    }
    let mut tested = indices.to_vec();
    tested.sort_unstable();
    if tested.windows(2).any(|w| w[0] == w[1]) {
        return Err(CptError::InvalidInput("duplicate tested column index".into()));
    }
    if let Some(&bad) = tested.iter().find(|&&i| i >= p) {
        return Err(CptError::InvalidInput(format!(
            "column index {bad} out of range for p = {p}"
        )));
    }
    let rest: Vec<usize> = (0..p).filter(|i| tested.binary_search(i).is_err()).collect();
    let order: Vec<usize> = tested.iter().chain(rest.iter()).copied().collect();
    let unit = |cols: &[usize]| DMatrix::from_fn(p, cols.len(), |i, j| f64::from(u8::from(i == cols[j])));
    Ok(ReducedProblem {
        x: linalg::select_columns(x, &order),
        basis_u: unit(&tested),
        basis_v: unit(&rest),
        spec: spec.clone(),
    })
}

fn reduce_contrast(x: &DMatrix<f64>, contrast: &DMatrix<f64>, spec: &ContrastSpec) -> Result<ReducedProblem> {
    let p = x.ncols();
    let r = contrast.ncols();
    if contrast.nrows() != p {
        return Err(CptError::DimensionMismatch(format!(
            "contrast has {} rows, design has {p} columns",
            contrast.nrows()
        )));
    }
    if r > p {
        return Err(CptError::TooManyConstraints { r, p });
    }
    if r == 0 {
        return Err(CptError::InvalidInput("contrast has no columns".into()));
    }
    let rank = ColumnSpace::of(contrast).rank();
    if rank < r {
        return Err(CptError::ContrastNotFullRank { rank, r });
    }
    // Thin QR keeps U₁ ∝ R₁ (with positive orientation) so one-column
    // contrasts map to β̃₁ = Rᵀβ / ‖R‖.
    let qr = contrast.clone().qr();
    let mut u = qr.q();
    let rmat = qr.r();
    for j in 0..r {
        if rmat[(j, j)] < 0.0 {
            u.column_mut(j).neg_mut();
        }
    }
    let v = linalg::orthonormal_complement(&u);
    let xu = x * &u;
    let xv = x * &v;
    let mut reduced = DMatrix::zeros(x.nrows(), p);
    reduced.columns_mut(0, r).copy_from(&xu);
    reduced.columns_mut(r, p - r).copy_from(&xv);
    Ok(ReducedProblem {
        x: reduced,
        basis_u: u,
        basis_v: v,
        spec: spec.clone(),
    })
}
