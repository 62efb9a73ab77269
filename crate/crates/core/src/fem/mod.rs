//! Finite-element forward models on fixed grids.
//!
//! Three models are provided, all with continuous piecewise-linear elements
//! and homogeneous Dirichlet boundary conditions:
//! - [`LinearForwardModel`]: `-p'' + p = u` on `(0, π)`,
//! - [`NonlinearForwardModel`]: `-(exp(u) p')' = 10` on `(0, π)`,
//! - [`PoissonModel`]: `-Δp = u` on `(0, 1)²`.
//!
//! Each model exposes the residual map `M(u, p)`, the solution operator
//! `S(u)` with `M(u, S(u)) = 0`, and (for the linear-in-`(u, p)` models) its
//! matrix blocks. Observations are pointwise linear interpolation of the
//! state.

mod grid;
mod linear1d;
mod mesh2d;
mod nonlinear1d;
mod observe;
mod poisson2d;

pub use grid::Grid1D;
pub use linear1d::LinearForwardModel;
pub use mesh2d::Mesh2D;
pub use nonlinear1d::NonlinearForwardModel;
pub use observe::ObservationOperator;
pub use poisson2d::PoissonModel;

use nalgebra::{DMatrix, DVector};

use crate::cov::CovBlock;
use crate::error::Result;

/// A forward model in residual form `M(u, p)`, with its solution operator.
pub trait ResidualModel: Sync {
    /// Dimension of the unknown parameter `u`.
    fn n_u(&self) -> usize;
    /// Dimension of the state `p` (interior degrees of freedom).
    fn n_p(&self) -> usize;
    /// Dimension of the residual `M(u, p)`.
    fn n_w(&self) -> usize;
    /// Residual `M(u, p)`; zero exactly when `p = S(u)`.
    fn residual(&self, u: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>>;
    /// Solution operator `S(u)`.
    fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// For models with `M(u, p) = A p - B u`: the pair `(A, B)`.
    fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)>;
}

/// Observations synthesized from a ground-truth parameter.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// `O(S(u†)) + η` with `η ~ N(0, Γ_obs)`.
    pub y: DVector<f64>,
    /// The noiseless reference `O(S(u†))`.
    pub y_clean: DVector<f64>,
}

/// Solve the model at the truth, observe, and add noise drawn from
/// `N(0, Γ_obs)` with the given seed.
pub fn synthesize_data(
    model: &dyn ResidualModel,
    obs: &ObservationOperator,
    truth: &DVector<f64>,
    gamma_obs: &CovBlock,
    seed: u64,
) -> Result<SyntheticData> {
    let state = model.solve(truth)?;
    let y_clean = obs.apply_interior(&state)?;
    let mut rng = crate::rng::from_seed(seed);
    let noise = gamma_obs.sample(&mut rng);
    Ok(SyntheticData {
        y: &y_clean + noise,
        y_clean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cov::CovBlock;
    use approx::assert_relative_eq;

    #[test]
    fn noiseless_limit_returns_clean_observations() {
        let model = LinearForwardModel::new(Grid1D::new(16).unwrap());
        let grid = Grid1D::new(16).unwrap();
        let obs =
            ObservationOperator::interpolate_1d(&grid, &[0.5, 1.0, 2.0]).unwrap();
        let truth = DVector::from_element(16, 1.0);
        let zero = CovBlock::eye(3, 0.0).unwrap();
        let data = synthesize_data(&model, &obs, &truth, &zero, 7).unwrap();
        assert_eq!(data.y, data.y_clean);
    }

    #[test]
    fn synthesis_is_deterministic_in_the_seed() {
        let model = LinearForwardModel::new(Grid1D::new(16).unwrap());
        let grid = Grid1D::new(16).unwrap();
        let obs = ObservationOperator::interpolate_1d(&grid, &[0.5, 1.0]).unwrap();
        let truth = DVector::from_element(16, 0.3);
        let gamma = CovBlock::eye(2, 0.1).unwrap();
        let a = synthesize_data(&model, &obs, &truth, &gamma, 42).unwrap();
        let b = synthesize_data(&model, &obs, &truth, &gamma, 42).unwrap();
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn noise_magnitude_matches_covariance_trace() {
        let model = LinearForwardModel::new(Grid1D::new(8).unwrap());
        let grid = Grid1D::new(8).unwrap();
        let obs = ObservationOperator::interpolate_1d(&grid, &[1.0, 1.5, 2.0]).unwrap();
        let truth = DVector::from_element(8, 0.5);
        let gamma = CovBlock::eye(3, 0.2).unwrap();
        let n = 10_000;
        let mut acc = 0.0;
        for seed in 0..n {
            let d = synthesize_data(&model, &obs, &truth, &gamma, seed).unwrap();
            acc += (&d.y - &d.y_clean).norm_squared();
        }
        let mean = acc / n as f64;
        // E‖η‖² = trace(Γ_obs) = 3 · 0.2.
        assert_relative_eq!(mean, 0.6, max_relative = 0.05);
    }
}
