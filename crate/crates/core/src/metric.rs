//! Weighted norms `‖x‖_A = ‖A^{-1/2} x‖` for symmetric positive definite `A`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};

/// Relative elementwise symmetry tolerance accepted by [`WeightedMetric::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A symmetric positive definite weight matrix together with its Cholesky
/// factorization. The squared weighted norm `xᵀ A⁻¹ x` is evaluated through
/// the factorization rather than by forming `A⁻¹`.
#[derive(Debug, Clone)]
pub struct WeightedMetric {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl WeightedMetric {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::invalid("weight matrix must be square"));
        }
        check_symmetric(&matrix, SYMMETRY_TOL)?;
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { matrix, chol })
    }

    pub fn identity(n: usize) -> Self {
        let matrix = DMatrix::identity(n, n);
        let chol = matrix.clone().cholesky().expect("identity is spd");
        Self { matrix, chol }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `xᵀ A⁻¹ x`. Clamped at zero: rounding can push the quadratic form of a
    /// near-null vector slightly negative.
    pub fn norm_sq(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("weighted norm", self.dim(), x.len())?;
        let solved = self.chol.solve(x);
        Ok(x.dot(&solved).max(0.0))
    }

    /// `A⁻¹ x` through the factorization.
    pub fn inv_apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("weighted metric solve", self.dim(), x.len())?;
        Ok(self.chol.solve(x))
    }
}

/// Squared weighted norm `xᵀ A⁻¹ x` of `x` under the metric `A`.
pub fn weighted_norm_sq(x: &DVector<f64>, metric: &WeightedMetric) -> Result<f64> {
    metric.norm_sq(x)
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    let mut max_rel = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let a = m[(i, j)];
            let b = m[(j, i)];
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                max_rel = max_rel.max((a - b).abs() / scale.max(1.0));
            }
        }
    }
    if max_rel > rel_tol {
        Err(Error::NotSymmetric { max_rel })
    } else {
        Ok(())
    }
}
