//! 2d Poisson model `-Δp = u` on `(0, 1)²`, `p = 0` on the boundary.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::mesh2d::Mesh2D;
use super::ResidualModel;
use crate::error::{check_dim, Result};

/// Interior system `K p = M u` with `K` the stiffness and `M` the consistent
/// mass matrix; `u` is the nodal vector of a piecewise-linear source
/// vanishing on the boundary.
#[derive(Debug, Clone)]
pub struct PoissonModel {
    mesh: Mesh2D,
    stiffness: DMatrix<f64>,
    load: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl PoissonModel {
    pub fn new(mesh: Mesh2D) -> Self {
        let stiffness = mesh.stiffness_interior();
        let load = mesh.mass_interior();
        let chol = stiffness
            .clone()
            .cholesky()
            .expect("Dirichlet stiffness is s.p.d.");
        Self {
            mesh,
            stiffness,
            load,
            chol,
        }
    }

    pub fn mesh(&self) -> &Mesh2D {
        &self.mesh
    }

    pub fn system_matrix(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    pub fn load_matrix(&self) -> &DMatrix<f64> {
        &self.load
    }
}

impl ResidualModel for PoissonModel {
    fn n_u(&self) -> usize {
        self.mesh.n_interior()
    }

    fn n_p(&self) -> usize {
        self.mesh.n_interior()
    }

    fn n_w(&self) -> usize {
        self.mesh.n_interior()
    }

    fn residual(&self, u: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("poisson parameter", self.n_u(), u.len())?;
        check_dim("poisson state", self.n_p(), p.len())?;
        Ok(&self.stiffness * p - &self.load * u)
    }

    fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("poisson parameter", self.n_u(), u.len())?;
        Ok(self.chol.solve(&(&self.load * u)))
    }

    fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        Some((&self.stiffness, &self.load))
    }
}

/// L² error of an interior nodal field against an exact function, by the
/// degree-2-exact edge-midpoint quadrature rule per triangle.
pub fn l2_error_2d(mesh: &Mesh2D, p: &DVector<f64>, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let value = |node: usize| -> f64 {
        match mesh.interior_index(node) {
            Some(i) => p[i],
            None => 0.0,
        }
    };
    let mut acc = 0.0;
    for t in mesh.triangles() {
        let [a, b, c] = [mesh.coords()[t[0]], mesh.coords()[t[1]], mesh.coords()[t[2]]];
        let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]));
        let va = value(t[0]);
        let vb = value(t[1]);
        let vc = value(t[2]);
        // Edge midpoints with barycentric weights (1/2, 1/2, 0) etc.
        let mids = [
            ([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])], 0.5 * (va + vb)),
            ([0.5 * (b[0] + c[0]), 0.5 * (b[1] + c[1])], 0.5 * (vb + vc)),
            ([0.5 * (c[0] + a[0]), 0.5 * (c[1] + a[1])], 0.5 * (vc + va)),
        ];
        for ([x, y], ph) in mids {
            let diff = ph - exact(x, y);
            acc += area / 3.0 * diff * diff;
        }
    }
    acc.sqrt()
}
