//! Pointwise observation of a finite-element state by linear interpolation.

use nalgebra::{DMatrix, DVector};

use super::grid::Grid1D;
use super::mesh2d::Mesh2D;
use crate::error::{check_dim, Error, Result};

/// Sparse interpolation rows over the full node set (interior + boundary).
/// Applying the operator to an interior state vector extends it by zero on
/// the Dirichlet boundary, so rows always form a partition of unity over the
/// full nodes while the interior matrix may have smaller row sums near the
/// boundary.
#[derive(Debug, Clone)]
pub struct ObservationOperator {
    rows: Vec<Vec<(usize, f64)>>,
    n_full: usize,
    /// Interior index of each full node, `None` on the boundary.
    interior_of_full: Vec<Option<usize>>,
}

impl ObservationOperator {
    /// Observation at points of `(0, π)` by linear interpolation between the
    /// two enclosing grid nodes.
    pub fn interpolate_1d(grid: &Grid1D, points: &[f64]) -> Result<Self> {
        let n = grid.n_interior();
        let h = grid.h();
        let n_full = n + 2;
        let mut rows = Vec::with_capacity(points.len());
        for &x in points {
            if !(0.0..=grid.domain_length()).contains(&x) {
                return Err(Error::invalid(format!(
                    "observation point {x} lies outside (0, π)"
                )));
            }
            let cell = ((x / h).floor() as usize).min(n);
            let xi = (x / h) - cell as f64;
            let mut row = Vec::new();
            if 1.0 - xi != 0.0 {
                row.push((cell, 1.0 - xi));
            }
            if xi != 0.0 {
                row.push((cell + 1, xi));
            }
            rows.push(row);
        }
        let interior_of_full = (0..n_full)
            .map(|j| {
                if j == 0 || j == n + 1 {
                    None
                } else {
                    Some(j - 1)
                }
            })
            .collect();
        Ok(Self {
            rows,
            n_full,
            interior_of_full,
        })
    }

    /// Observation at points of `(0, 1)²` by barycentric interpolation within
    /// the containing triangle.
    pub fn interpolate_2d(mesh: &Mesh2D, points: &[[f64; 2]]) -> Result<Self> {
        let mut rows = Vec::with_capacity(points.len());
        for &[x, y] in points {
            let (ti, w) = mesh.locate(x, y).ok_or_else(|| {
                Error::invalid(format!("observation point ({x}, {y}) lies outside the mesh"))
            })?;
            let tri = mesh.triangles()[ti];
            let mut row = Vec::new();
            for k in 0..3 {
                if w[k] != 0.0 {
                    row.push((tri[k], w[k]));
                }
            }
            rows.push(row);
        }
        let interior_of_full = (0..mesh.n_nodes()).map(|i| mesh.interior_index(i)).collect();
        Ok(Self {
            rows,
            n_full: mesh.n_nodes(),
            interior_of_full,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_full_nodes(&self) -> usize {
        self.n_full
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Apply to a full nodal vector (boundary values included).
    pub fn apply_full(&self, p_full: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("observation (full nodes)", self.n_full, p_full.len())?;
        Ok(DVector::from_fn(self.rows.len(), |i, _| {
            self.rows[i].iter().map(|&(j, w)| w * p_full[j]).sum()
        }))
    }

    /// Apply to an interior state vector; boundary values are zero.
    pub fn apply_interior(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let n_int = self.interior_of_full.iter().flatten().count();
        check_dim("observation (interior nodes)", n_int, p.len())?;
        Ok(DVector::from_fn(self.rows.len(), |i, _| {
            self.rows[i]
                .iter()
                .map(|&(j, w)| match self.interior_of_full[j] {
                    Some(k) => w * p[k],
                    None => 0.0,
                })
                .sum()
        }))
    }

    /// Dense matrix acting on interior state vectors.
    pub fn dense_interior(&self) -> DMatrix<f64> {
        let n_int = self.interior_of_full.iter().flatten().count();
        let mut m = DMatrix::zeros(self.rows.len(), n_int);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                if let Some(k) = self.interior_of_full[j] {
                    m[(i, k)] = w;
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rows_form_a_partition_of_unity() {
        let grid = Grid1D::new(16).unwrap();
        let obs = ObservationOperator::interpolate_1d(&grid, &[0.3, 1.1, 2.9]).unwrap();
        let ones = DVector::from_element(obs.n_full_nodes(), 1.0);
        let y = obs.apply_full(&ones).unwrap();
        for v in y.iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-14);
        }
        for row in obs.rows() {
            assert!(row.len() <= 2);
            assert!(row.iter().all(|&(_, w)| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn point_at_a_node_reads_the_nodal_value_exactly() {
        let grid = Grid1D::new(16).unwrap();
        let x = grid.node(5);
        let obs = ObservationOperator::interpolate_1d(&grid, &[x]).unwrap();
        let mut p = DVector::zeros(16);
        p[4] = 3.25; // interior index of full node 5
        let y = obs.apply_interior(&p).unwrap();
        assert_eq!(y[0], 3.25);
    }

    #[test]
    fn midpoint_between_nodes_averages_them() {
        let grid = Grid1D::new(16).unwrap();
        let x = 0.5 * (grid.node(4) + grid.node(5));
        let obs = ObservationOperator::interpolate_1d(&grid, &[x]).unwrap();
        let mut p = DVector::zeros(16);
        p[3] = 2.0;
        p[4] = 4.0;
        let y = obs.apply_interior(&p).unwrap();
        assert_relative_eq!(y[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_domain_point_is_a_construction_error() {
        let grid = Grid1D::new(8).unwrap();
        assert!(ObservationOperator::interpolate_1d(&grid, &[4.0]).is_err());
        let mesh = Mesh2D::structured_unit_square(4).unwrap();
        assert!(ObservationOperator::interpolate_2d(&mesh, &[[1.5, 0.5]]).is_err());
    }

    #[test]
    fn operator_matches_its_dense_matrix() {
        let mesh = Mesh2D::structured_unit_square(5).unwrap();
        let pts = [[0.21, 0.33], [0.68, 0.52], [0.5, 0.5]];
        let obs = ObservationOperator::interpolate_2d(&mesh, &pts).unwrap();
        let mut rng = crate::rng::from_seed(3);
        let p = crate::rng::standard_normal_vector(&mut rng, mesh.n_interior());
        let dense = obs.dense_interior();
        assert_relative_eq!(obs.apply_interior(&p).unwrap(), &dense * &p, epsilon = 1e-14);
        for row in obs.rows() {
            assert!(row.len() <= 3);
        }
    }

    #[test]
    fn observation_is_linear() {
        let grid = Grid1D::new(12).unwrap();
        let obs = ObservationOperator::interpolate_1d(&grid, &[0.5, 1.0, 2.5]).unwrap();
        let mut rng = crate::rng::from_seed(4);
        let p1 = crate::rng::standard_normal_vector(&mut rng, 12);
        let p2 = crate::rng::standard_normal_vector(&mut rng, 12);
        let alpha = 1.7;
        let lhs = obs.apply_interior(&(&p1 * alpha + &p2)).unwrap();
        let rhs = obs.apply_interior(&p1).unwrap() * alpha + obs.apply_interior(&p2).unwrap();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-13);
    }
}
