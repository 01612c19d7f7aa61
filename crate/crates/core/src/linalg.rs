//! Small dense linear-algebra helpers shared by the reduction and
//! construction steps.

use nalgebra::{DMatrix, DVector};

/// Numerical rank cut-off `max(rows, cols) · ε · σ_max`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Orthonormal basis of the column span of a matrix, with numerically
/// negligible directions dropped.
#[derive(Debug, Clone)]
pub struct ColumnSpace {
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl ColumnSpace {
    pub fn of(a: &DMatrix<f64>) -> Self {
        let (rows, cols) = a.shape();
        if rows == 0 || cols == 0 || a.iter().all(|v| *v == 0.0) {
            return ColumnSpace {
                basis: DMatrix::zeros(rows, 0),
                singular_values: Vec::new(),
            };
        }
        let svd = a.clone().svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let tol = rank_tolerance(rows, cols, sigma_max);
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > tol)
            .collect();
        let basis = DMatrix::from_fn(rows, keep.len(), |i, j| u[(i, keep[j])]);
        let singular_values = keep.iter().map(|&i| svd.singular_values[i]).collect();
        ColumnSpace { basis, singular_values }
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `(I − UUᵀ) v`: the minimum-norm least-squares residual of `v`.
    pub fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return v.clone();
        }
        let coef = self.basis.tr_mul(v);
        v - &self.basis * coef
    }

    /// Column-wise residual of a matrix.
    pub fn residual_matrix(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        if self.rank() == 0 {
            return v.clone();
        }
        let coef = self.basis.tr_mul(v);
        v - &self.basis * coef
    }
}

/// Largest eigenpair of a symmetric matrix.
pub fn sym_top_eigen(a: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = a.clone().symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

/// Symmetric PSD square root, with negative eigenvalues clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Orthonormal basis (`p × (p − r)`) of the orthogonal complement of the
/// span of the orthonormal columns of `u`.
pub fn orthonormal_complement(u: &DMatrix<f64>) -> DMatrix<f64> {
    let p = u.nrows();
    let r = u.ncols();
    let proj = DMatrix::<f64>::identity(p, p) - u * u.transpose();
    let eig = proj.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut v = DMatrix::zeros(p, p - r);
    for (j, &idx) in order.iter().take(p - r).enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        fix_sign(&mut col);
        v.set_column(j, &col);
    }
    v
}

/// Flip `v` so its first entry that is not numerically zero is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Induced ∞-norm: the largest absolute row sum.
pub fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Gather rows: `out[i] = a[map[i]]`.
pub fn gather_rows(a: &DMatrix<f64>, map: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(map.len(), a.ncols(), |i, j| a[(map[i], j)])
}

pub fn select_columns(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_orthogonal_to_span() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let space = ColumnSpace::of(&a);
        assert_eq!(space.rank(), 2);
        let v = DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0]);
        let res = space.residual(&v);
        assert!(a.tr_mul(&res).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_columns_are_dropped() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 3.0, 6.0, 0.0]);
        assert_eq!(ColumnSpace::of(&a).rank(), 1);
        assert_eq!(ColumnSpace::of(&DMatrix::zeros(3, 2)).rank(), 0);
    }

    #[test]
    fn complement_is_orthonormal() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let u = DMatrix::from_column_slice(2, 1, &[s, s]);
        let v = orthonormal_complement(&u);
        assert!((v[(0, 0)] - s).abs() < 1e-12);
        assert!((v[(1, 0)] + s).abs() < 1e-12);
    }
}
