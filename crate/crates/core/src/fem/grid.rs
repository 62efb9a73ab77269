//! Uniform 1d grid on `(0, π)`.

use crate::error::{Error, Result};

/// Uniform mesh of `(0, π)` with `n` interior nodes and meshwidth
/// `h = π / (n + 1)`. Full node indices run `0..=n+1`; nodes `0` and `n+1`
/// are the Dirichlet boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid1D {
    n_interior: usize,
}

impl Grid1D {
    pub fn new(n_interior: usize) -> Result<Self> {
        if n_interior == 0 {
            return Err(Error::invalid("grid needs at least one interior node"));
        }
        Ok(Self { n_interior })
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn h(&self) -> f64 {
        std::f64::consts::PI / (self.n_interior + 1) as f64
    }

    pub fn domain_length(&self) -> f64 {
        std::f64::consts::PI
    }

    /// Coordinate of full node `j` (`0..=n+1`).
    pub fn node(&self, j: usize) -> f64 {
        j as f64 * self.h()
    }

    /// Coordinates of the interior nodes `h, 2h, …, nh`.
    pub fn interior_nodes(&self) -> Vec<f64> {
        (1..=self.n_interior).map(|j| self.node(j)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nodes_are_uniform_and_increasing() {
        let g = Grid1D::new(64).unwrap();
        assert_relative_eq!(g.h(), std::f64::consts::PI / 65.0);
        let nodes = g.interior_nodes();
        assert_eq!(nodes.len(), 64);
        for w in nodes.windows(2) {
            assert_relative_eq!(w[1] - w[0], g.h(), epsilon = 1e-14);
        }
        assert!(nodes[0] > 0.0 && *nodes.last().unwrap() < std::f64::consts::PI);
    }
}
