//! Triangulations of the unit square with Dirichlet boundary.
//!
//! Meshes are plain data: node coordinates with a boundary flag plus
//! triangle connectivity. The text format is line-oriented:
//!
//! ```text
//! # comment lines start with '#'
//! nodes <count>
//! <index> <x> <y> <0|1>      # one per node; 1 marks a boundary node
//! elements <count>
//! <n0> <n1> <n2>             # one per triangle, node indices
//! ```
//!
//! The fixed 95-interior/40-boundary experiment mesh ships with the crate as
//! `data/mesh_2d_95_40.txt` and was produced by Delaunay triangulation of a
//! deterministic point set (uniform boundary nodes, jittered interior grid).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Mesh2D {
    coords: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    is_boundary: Vec<bool>,
    /// Interior index of each node (`None` on the boundary).
    interior_index: Vec<Option<usize>>,
    n_interior: usize,
}

impl Mesh2D {
    pub fn new(
        coords: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        is_boundary: Vec<bool>,
    ) -> Result<Self> {
        if coords.len() != is_boundary.len() {
            return Err(Error::invalid("one boundary flag per node is required"));
        }
        let mut interior_index = vec![None; coords.len()];
        let mut n_interior = 0;
        for (i, &b) in is_boundary.iter().enumerate() {
            if !b {
                interior_index[i] = Some(n_interior);
                n_interior += 1;
            }
        }
        let mesh = Self {
            coords,
            triangles,
            is_boundary,
            interior_index,
            n_interior,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Structured triangulation with `m × m` cells, diagonals along the main
    /// diagonal of each cell (symmetric under `(x, y) ↦ (y, x)`).
    pub fn structured_unit_square(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid("structured mesh needs at least 2 cells"));
        }
        let np = m + 1;
        let mut coords = Vec::with_capacity(np * np);
        let mut is_boundary = Vec::with_capacity(np * np);
        for j in 0..np {
            for i in 0..np {
                let x = i as f64 / m as f64;
                let y = j as f64 / m as f64;
                coords.push([x, y]);
                is_boundary.push(i == 0 || j == 0 || i == m || j == m);
            }
        }
        let idx = |i: usize, j: usize| j * np + i;
        let mut triangles = Vec::with_capacity(2 * m * m);
        for j in 0..m {
            for i in 0..m {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        Self::new(coords, triangles, is_boundary)
    }

    /// The shipped experiment mesh: 95 interior and 40 boundary nodes.
    pub fn experiment_mesh() -> Result<Self> {
        Self::from_text(include_str!("../../data/mesh_2d_95_40.txt"))
    }

    fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        let mut tri_count = vec![0usize; n];
        for t in &self.triangles {
            for &v in t {
                if v >= n {
                    return Err(Error::invalid("triangle references a missing node"));
                }
                tri_count[v] += 1;
            }
            if self.signed_area(t) <= 0.0 {
                return Err(Error::invalid("triangle with non-positive area"));
            }
        }
        for (i, &b) in self.is_boundary.iter().enumerate() {
            let [x, y] = self.coords[i];
            let on_edge = x.abs() < BOUNDARY_TOL
                || y.abs() < BOUNDARY_TOL
                || (x - 1.0).abs() < BOUNDARY_TOL
                || (y - 1.0).abs() < BOUNDARY_TOL;
            if b && !on_edge {
                return Err(Error::invalid(format!(
                    "node {i} is flagged boundary but lies at ({x}, {y})"
                )));
            }
            if !b && tri_count[i] < 3 {
                return Err(Error::invalid(format!(
                    "interior node {i} belongs to {} triangles",
                    tri_count[i]
                )));
            }
        }
        Ok(())
    }

    fn signed_area(&self, t: &[usize; 3]) -> f64 {
        let a = self.coords[t[0]];
        let b = self.coords[t[1]];
        let c = self.coords[t[2]];
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn n_boundary(&self) -> usize {
        self.coords.len() - self.n_interior
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.is_boundary[node]
    }

    pub fn interior_index(&self, node: usize) -> Option<usize> {
        self.interior_index[node]
    }

    /// Coordinates of the interior nodes in interior order.
    pub fn interior_coords(&self) -> Vec<[f64; 2]> {
        (0..self.n_nodes())
            .filter(|&i| !self.is_boundary[i])
            .map(|i| self.coords[i])
            .collect()
    }

    /// Stiffness matrix `∫ ∇φ_i · ∇φ_j` restricted to interior nodes.
    pub fn stiffness_interior(&self) -> DMatrix<f64> {
        let n = self.n_interior;
        let mut k = DMatrix::zeros(n, n);
        for t in &self.triangles {
            let area = self.signed_area(t);
            let [a, b, c] = [self.coords[t[0]], self.coords[t[1]], self.coords[t[2]]];
            // Gradient of the barycentric basis functions.
            let grads = [
                [(b[1] - c[1]) / (2.0 * area), (c[0] - b[0]) / (2.0 * area)],
                [(c[1] - a[1]) / (2.0 * area), (a[0] - c[0]) / (2.0 * area)],
                [(a[1] - b[1]) / (2.0 * area), (b[0] - a[0]) / (2.0 * area)],
            ];
            for i in 0..3 {
                let Some(gi) = self.interior_index[t[i]] else {
                    continue;
                };
                for j in 0..3 {
                    let Some(gj) = self.interior_index[t[j]] else {
                        continue;
                    };
                    k[(gi, gj)] +=
                        area * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                }
            }
        }
        k
    }

    /// Consistent mass matrix `∫ φ_i φ_j` restricted to interior nodes.
    pub fn mass_interior(&self) -> DMatrix<f64> {
        let n = self.n_interior;
        let mut m = DMatrix::zeros(n, n);
        for t in &self.triangles {
            let area = self.signed_area(t);
            for i in 0..3 {
                let Some(gi) = self.interior_index[t[i]] else {
                    continue;
                };
                for j in 0..3 {
                    let Some(gj) = self.interior_index[t[j]] else {
                        continue;
                    };
                    m[(gi, gj)] += area / 12.0 * if i == j { 2.0 } else { 1.0 };
                }
            }
        }
        m
    }

    /// Triangle containing the point, with barycentric coordinates.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, [f64; 3])> {
        for (ti, t) in self.triangles.iter().enumerate() {
            let area = self.signed_area(t);
            let [a, b, c] = [self.coords[t[0]], self.coords[t[1]], self.coords[t[2]]];
            let w0 = 0.5 * ((b[0] - x) * (c[1] - y) - (c[0] - x) * (b[1] - y)) / area;
            let w1 = 0.5 * ((c[0] - x) * (a[1] - y) - (a[0] - x) * (c[1] - y)) / area;
            let w2 = 1.0 - w0 - w1;
            let tol = -1e-12;
            if w0 >= tol && w1 >= tol && w2 >= tol {
                return Some((ti, [w0.max(0.0), w1.max(0.0), w2.max(0.0)]));
            }
        }
        None
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = |line: Option<&str>, word: &str| -> Result<usize> {
            let line = line.ok_or_else(|| Error::invalid("truncated mesh file"))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(word) {
                return Err(Error::invalid(format!("expected '{word} <count>' line")));
            }
            it.next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad {word} count")))
        };
        let n_nodes = header(lines.next(), "nodes")?;
        let mut coords = Vec::with_capacity(n_nodes);
        let mut is_boundary = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = lines.next().ok_or_else(|| Error::invalid("missing node"))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::invalid("node line needs: index x y flag"));
            }
            let x: f64 = f[1].parse().map_err(|_| Error::invalid("bad node x"))?;
            let y: f64 = f[2].parse().map_err(|_| Error::invalid("bad node y"))?;
            coords.push([x, y]);
            is_boundary.push(f[3] == "1");
        }
        let n_el = header(lines.next(), "elements")?;
        let mut triangles = Vec::with_capacity(n_el);
        for _ in 0..n_el {
            let line = lines
                .next()
                .ok_or_else(|| Error::invalid("missing element"))?;
            let v: Vec<usize> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| Error::invalid("bad element index")))
                .collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(Error::invalid("element line needs three node indices"));
            }
            triangles.push([v[0], v[1], v[2]]);
        }
        Self::new(coords, triangles, is_boundary)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# triangulation of (0,1)^2; boundary flag 1 marks Dirichlet nodes\n");
        out.push_str(&format!("nodes {}\n", self.n_nodes()));
        for (i, ([x, y], b)) in self.coords.iter().zip(&self.is_boundary).enumerate() {
            out.push_str(&format!(
                "{i} {x:.17} {y:.17} {}\n",
                if *b { 1 } else { 0 }
            ));
        }
        out.push_str(&format!("elements {}\n", self.n_triangles()));
        for t in &self.triangles {
            out.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn structured_mesh_has_expected_counts() {
        let mesh = Mesh2D::structured_unit_square(4).unwrap();
        assert_eq!(mesh.n_nodes(), 25);
        assert_eq!(mesh.n_interior(), 9);
        assert_eq!(mesh.n_boundary(), 16);
        assert_eq!(mesh.n_triangles(), 32);
    }

    #[test]
    fn mass_matrix_total_equals_interior_hat_integrals() {
        // Each interior hat integrates to (total support area)/3.
        let mesh = Mesh2D::structured_unit_square(4).unwrap();
        let m = mesh.mass_interior();
        // Row sums of the full mass matrix are ∫φ_i; restricting to interior
        // columns only drops boundary contributions, so just check symmetry
        // and positivity here.
        assert_relative_eq!(m.clone(), m.transpose(), epsilon = 1e-15);
        assert!(m.clone().cholesky().is_some());
    }

    #[test]
    fn text_round_trip_preserves_the_mesh() {
        let mesh = Mesh2D::structured_unit_square(3).unwrap();
        let text = mesh.to_text();
        let back = Mesh2D::from_text(&text).unwrap();
        assert_eq!(mesh.coords(), back.coords());
        assert_eq!(mesh.triangles(), back.triangles());
    }

    #[test]
    fn locate_finds_containing_triangle() {
        let mesh = Mesh2D::structured_unit_square(4).unwrap();
        let (_, w) = mesh.locate(0.3, 0.4).unwrap();
        assert_relative_eq!(w[0] + w[1] + w[2], 1.0, epsilon = 1e-12);
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn experiment_mesh_has_the_pinned_node_counts() {
        let mesh = Mesh2D::experiment_mesh().unwrap();
        assert_eq!(mesh.n_interior(), 95);
        assert_eq!(mesh.n_boundary(), 40);
    }
}
