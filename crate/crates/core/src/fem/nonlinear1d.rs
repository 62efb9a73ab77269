//! 1d nonlinear diffusion model `-(exp(u) p')' = 10` on `(0, π)`, `p = 0` on
//! the boundary. The map `u ↦ p` is nonlinear in `u` while the assembled
//! system stays linear in `p`.

use nalgebra::{DMatrix, DVector};

use super::grid::Grid1D;
use super::ResidualModel;
use crate::error::{check_dim, Error, Result};

/// Largest |u| accepted before `exp(u)` is declared an overflow.
pub const EXP_ARG_LIMIT: f64 = 700.0;

#[derive(Debug, Clone)]
pub struct NonlinearForwardModel {
    grid: Grid1D,
    source: f64,
}

impl NonlinearForwardModel {
    pub fn new(grid: Grid1D) -> Self {
        Self { grid, source: 10.0 }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// Per-element diffusion coefficients: `exp(u)` is evaluated at the nodes
    /// and interpolated to the element midpoint. The nodal field is extended
    /// to the boundary by replicating the adjacent interior value, so a
    /// constant `u ≡ c` scales the whole operator by `exp(c)` exactly.
    fn element_coefficients(&self, u: &DVector<f64>) -> Result<Vec<f64>> {
        if u.iter().any(|&v| !v.is_finite() || v.abs() > EXP_ARG_LIMIT) {
            return Err(Error::NonFinite("exp(u) overflows"));
        }
        let n = self.grid.n_interior();
        let w = |j: usize| -> f64 {
            let idx = j.clamp(1, n);
            u[idx - 1].exp()
        };
        Ok((0..=n).map(|e| 0.5 * (w(e) + w(e + 1))).collect())
    }

    fn assemble(&self, u: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = self.grid.n_interior();
        let h = self.grid.h();
        let a = self.element_coefficients(u)?;
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            // Interior node i+1 couples elements i and i+1.
            k[(i, i)] = (a[i] + a[i + 1]) / h;
            if i + 1 < n {
                k[(i, i + 1)] = -a[i + 1] / h;
                k[(i + 1, i)] = -a[i + 1] / h;
            }
        }
        // ∫ f φ_i = f·h exactly for the constant source.
        let load = DVector::from_element(n, self.source * h);
        Ok((k, load))
    }
}

impl ResidualModel for NonlinearForwardModel {
    fn n_u(&self) -> usize {
        self.grid.n_interior()
    }

    fn n_p(&self) -> usize {
        self.grid.n_interior()
    }

    fn n_w(&self) -> usize {
        self.grid.n_interior()
    }

    fn residual(&self, u: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("nonlinear model parameter", self.n_u(), u.len())?;
        check_dim("nonlinear model state", self.n_p(), p.len())?;
        let (k, load) = self.assemble(u)?;
        Ok(k * p - load)
    }

    fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("nonlinear model parameter", self.n_u(), u.len())?;
        let (k, load) = self.assemble(u)?;
        let chol = k.cholesky().ok_or(Error::NotPositiveDefinite)?;
        Ok(chol.solve(&load))
    }

    fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        None
    }
}
