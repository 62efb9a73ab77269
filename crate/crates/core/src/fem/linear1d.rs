//! 1d reaction-diffusion model `-p'' + p = u` on `(0, π)`, `p = 0` on the
//! boundary, discretized with continuous piecewise-linear elements.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::grid::Grid1D;
use super::ResidualModel;
use crate::error::{check_dim, Result};

/// Interior system `A p = B u` with `A = K + M` (stiffness plus mass) and
/// `B = M` the consistent mass matrix; `u` is interpreted as the nodal vector
/// of a piecewise-linear field vanishing on the boundary.
#[derive(Debug, Clone)]
pub struct LinearForwardModel {
    grid: Grid1D,
    system: DMatrix<f64>,
    load: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl LinearForwardModel {
    pub fn new(grid: Grid1D) -> Self {
        let n = grid.n_interior();
        let h = grid.h();
        let stiffness = tridiag(n, 2.0 / h, -1.0 / h);
        let mass = tridiag(n, 4.0 * h / 6.0, h / 6.0);
        let system = &stiffness + &mass;
        let chol = system
            .clone()
            .cholesky()
            .expect("stiffness + mass is s.p.d.");
        Self {
            grid,
            system,
            load: mass,
            chol,
        }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn system_matrix(&self) -> &DMatrix<f64> {
        &self.system
    }

    pub fn load_matrix(&self) -> &DMatrix<f64> {
        &self.load
    }

    /// Dense solution operator `S = A⁻¹ B`.
    pub fn solution_matrix(&self) -> DMatrix<f64> {
        self.chol.solve(&self.load)
    }
}

impl ResidualModel for LinearForwardModel {
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
        check_dim("linear model parameter", self.n_u(), u.len())?;
        check_dim("linear model state", self.n_p(), p.len())?;
        Ok(&self.system * p - &self.load * u)
    }

    fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("linear model parameter", self.n_u(), u.len())?;
        Ok(self.chol.solve(&(&self.load * u)))
    }

    fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        Some((&self.system, &self.load))
    }
}

pub(crate) fn tridiag(n: usize, diag: f64, off: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = diag;
        if i + 1 < n {
            m[(i, i + 1)] = off;
            m[(i + 1, i)] = off;
        }
    }
    m
}

/// L² norm of the error between a piecewise-linear interior nodal field and
/// an exact function, by two-point Gauss quadrature per element.
pub(crate) fn l2_error_1d(grid: &Grid1D, p: &DVector<f64>, exact: impl Fn(f64) -> f64) -> f64 {
    let n = grid.n_interior();
    let h = grid.h();
    let value = |j: usize| -> f64 {
        if j == 0 || j == n + 1 {
            0.0
        } else {
            p[j - 1]
        }
    };
    let g = 1.0 / 3.0f64.sqrt();
    let mut acc = 0.0;
    for e in 0..=n {
        let x_l = grid.node(e);
        let v_l = value(e);
        let v_r = value(e + 1);
        for &xi in &[-g, g] {
            let s = 0.5 * (xi + 1.0);
            let x = x_l + s * h;
            let ph = v_l * (1.0 - s) + v_r * s;
            let diff = ph - exact(x);
            acc += 0.5 * h * diff * diff;
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_source_gives_zero_state() {
        let model = LinearForwardModel::new(Grid1D::new(32).unwrap());
        let p = model.solve(&DVector::zeros(32)).unwrap();
        assert!(p.abs().max() < 1e-14);
    }

    #[test]
    fn manufactured_sine_solution() {
        // -p'' + p = sin on (0, π) has the exact solution sin(x)/2.
        let grid = Grid1D::new(64).unwrap();
        let model = LinearForwardModel::new(grid);
        let u = DVector::from_vec(grid.interior_nodes().iter().map(|x| x.sin()).collect());
        let p = model.solve(&u).unwrap();
        let err = l2_error_1d(&grid, &p, |x| 0.5 * x.sin());
        assert!(err < 2e-4, "L² error {err:.3e}");
        let mid = grid.n_interior() / 2;
        assert_relative_eq!(p[mid], 0.5 * grid.node(mid + 1).sin(), max_relative = 1e-3);
    }

    #[test]
    fn halving_the_meshwidth_quarters_the_error() {
        let errs: Vec<f64> = [32usize, 65, 131]
            .iter()
            .map(|&n| {
                let grid = Grid1D::new(n).unwrap();
                let model = LinearForwardModel::new(grid);
                let u =
                    DVector::from_vec(grid.interior_nodes().iter().map(|x| x.sin()).collect());
                let p = model.solve(&u).unwrap();
                l2_error_1d(&grid, &p, |x| 0.5 * x.sin())
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn residual_vanishes_at_the_solution() {
        let grid = Grid1D::new(24).unwrap();
        let model = LinearForwardModel::new(grid);
        let mut rng = crate::rng::from_seed(5);
        for _ in 0..100 {
            let u = crate::rng::standard_normal_vector(&mut rng, 24);
            let p = model.solve(&u).unwrap();
            let r = model.residual(&u, &p).unwrap();
            assert!(r.abs().max() < 1e-12, "residual {:.3e}", r.abs().max());
        }
    }

    #[test]
    fn residual_is_nonzero_off_the_solution() {
        let grid = Grid1D::new(8).unwrap();
        let model = LinearForwardModel::new(grid);
        let p = DVector::from_element(8, 1.0);
        let r = model.residual(&DVector::zeros(8), &p).unwrap();
        assert!(r.abs().max() > 1e-3);
    }

    #[test]
    fn residual_is_linear() {
        let grid = Grid1D::new(12).unwrap();
        let model = LinearForwardModel::new(grid);
        let mut rng = crate::rng::from_seed(9);
        let u1 = crate::rng::standard_normal_vector(&mut rng, 12);
        let u2 = crate::rng::standard_normal_vector(&mut rng, 12);
        let p1 = crate::rng::standard_normal_vector(&mut rng, 12);
        let p2 = crate::rng::standard_normal_vector(&mut rng, 12);
        let lhs = model.residual(&(&u1 + &u2), &(&p1 + &p2)).unwrap();
        let rhs = model.residual(&u1, &p1).unwrap() + model.residual(&u2, &p2).unwrap();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }
}
