//! Small dense linear-algebra helpers shared by the model, likelihood and
//! prediction code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{EblupError, Result};

/// Smallest admissible squared Cholesky pivot, relative to the largest
/// diagonal entry of the factored matrix.
const PIVOT_REL_TOL: f64 = 1e-13;

/// A symmetric matrix that is either a multiple-free identity or dense.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum SymMatrix {
    Identity(usize),
    Dense(DMatrix<f64>),
}

impl SymMatrix {
    pub(crate) fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymMatrix::Identity(n) => DMatrix::identity(*n, *n),
            SymMatrix::Dense(m) => m.clone(),
        }
    }

    /// `self * v`
    pub(crate) fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymMatrix::Identity(_) => v.clone(),
            SymMatrix::Dense(m) => m * v,
        }
    }

    /// `a * self`
    pub(crate) fn right_mul(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SymMatrix::Identity(_) => a.clone(),
            SymMatrix::Dense(m) => a * m,
        }
    }

    /// `target += scale * self`
    pub(crate) fn add_scaled_to(&self, target: &mut DMatrix<f64>, scale: f64) {
        match self {
            SymMatrix::Identity(n) => {
                for i in 0..*n {
                    target[(i, i)] += scale;
                }
            }
            SymMatrix::Dense(m) => *target += m * scale,
        }
    }

    /// `u' self v`
    pub(crate) fn bilinear(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        match self {
            SymMatrix::Identity(_) => u.dot(v),
            SymMatrix::Dense(m) => u.dot(&(m * v)),
        }
    }
}

/// Factorization of a symmetric positive-definite matrix. Exactly diagonal
/// inputs skip the dense Cholesky.
#[derive(Debug, Clone)]
pub(crate) enum SpdFactor {
    Diagonal(DVector<f64>),
    Dense(Cholesky<f64, Dyn>),
}

impl SpdFactor {
    pub(crate) fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.iter().any(|v| !v.is_finite()) {
            return Err(EblupError::NonFinite { what: "covariance matrix" });
        }
        let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
        if max_diag <= 0.0 {
            return Err(EblupError::NotPositiveDefinite);
        }
        let min_pivot = PIVOT_REL_TOL * max_diag;
        if is_diagonal(m) {
            let d = DVector::from_fn(n, |i, _| m[(i, i)]);
            if d.iter().any(|&v| v <= min_pivot) {
                return Err(EblupError::NotPositiveDefinite);
            }
            return Ok(SpdFactor::Diagonal(d));
        }
        let chol = Cholesky::new(m.clone()).ok_or(EblupError::NotPositiveDefinite)?;
        let l = chol.l_dirty();
        if (0..n).any(|i| l[(i, i)] * l[(i, i)] <= min_pivot) {
            return Err(EblupError::NotPositiveDefinite);
        }
        Ok(SpdFactor::Dense(chol))
    }

    pub(crate) fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Diagonal(d) => b.component_div(d),
            SpdFactor::Dense(c) => c.solve(b),
        }
    }

    pub(crate) fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SpdFactor::Diagonal(d) => {
                let mut out = b.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= d[i];
                }
                out
            }
            SpdFactor::Dense(c) => c.solve(b),
        }
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        match self {
            SpdFactor::Diagonal(d) => DMatrix::from_diagonal(&d.map(|v| 1.0 / v)),
            SpdFactor::Dense(c) => {
                let mut inv = c.inverse();
                symmetrize(&mut inv);
                inv
            }
        }
    }

    pub(crate) fn log_det(&self) -> f64 {
        match self {
            SpdFactor::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            SpdFactor::Dense(c) => {
                let l = c.l_dirty();
                2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
            }
        }
    }
}

pub(crate) fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Replace `m` by `(m + m') / 2` in place.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `tr(a * b)` without forming the product.
pub(crate) fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Numerical rank from the singular values, relative tolerance `rel_tol`
/// times the largest singular value.
pub(crate) fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rel_tol * max).count()
}

/// Inverse of a symmetric matrix `m` that must be positive definite
/// after scaling; returns `None` when the smallest eigenvalue is at most
/// `rel_tol` times `scale`.
pub(crate) fn spd_inverse_checked(m: &DMatrix<f64>, scale: f64, rel_tol: f64) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > rel_tol * scale) {
        return None;
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let q = &eig.eigenvectors;
    let mut inv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    symmetrize(&mut inv);
    Some(inv)
}
