//! Gaussian priors with spectral covariance operators.
//!
//! A prior is stored as mean plus eigenpairs of its covariance,
//! `C = Σ_k λ_k e_k e_kᵀ` with an orthonormal basis `{e_k}`. Sampling and
//! applications of `C^{±1}` go through the eigenpairs, so no dense
//! factorization of the underlying differential operator is ever formed.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;

use crate::error::{check_dim, Error, Result};
use crate::fem::Mesh2D;
use crate::rng::standard_normal_vector;

/// Orthonormality tolerance accepted by [`GaussianPrior::new`].
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    /// Nonincreasing, `>= 0`. Zero eigenvalues denote a degenerate direction;
    /// such priors can be sampled but not inverted.
    eigenvalues: DVector<f64>,
    /// Columns are the eigenvectors, orthonormal in the Euclidean inner
    /// product, ordered consistently with `eigenvalues`.
    basis: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, eigenvalues: DVector<f64>, basis: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        check_dim("prior basis rows", n, basis.nrows())?;
        check_dim("prior eigenvalue count", basis.ncols(), eigenvalues.len())?;
        if eigenvalues.iter().any(|&l| !(l.is_finite() && l >= 0.0)) {
            return Err(Error::invalid("prior eigenvalues must be finite and >= 0"));
        }
        let gram = basis.transpose() * &basis;
        let mut max_dev = 0.0f64;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(i, j)] - target).abs());
            }
        }
        if max_dev > ORTHONORMALITY_TOL {
            return Err(Error::invalid(format!(
                "prior basis is not orthonormal (max deviation {max_dev:.3e})"
            )));
        }

        // Store eigenpairs sorted by nonincreasing eigenvalue.
        let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
        let eigenvalues = DVector::from_fn(order.len(), |k, _| eigenvalues[order[k]]);
        let basis = DMatrix::from_fn(n, order.len(), |i, k| basis[(i, order[k])]);

        Ok(Self {
            mean,
            eigenvalues,
            basis,
        })
    }

    /// Prior on the interior nodes of a uniform grid over `(0, π)` with
    /// covariance `β (-d²/dx²)^{-ν}` under homogeneous Dirichlet conditions.
    ///
    /// The eigenfunctions `√(2/π)·sin(kx)` evaluated at the `n` interior
    /// nodes and rescaled by `√h` give an exactly orthonormal discrete basis;
    /// the eigenvalues are `β k^{-2ν}`.
    pub fn dirichlet_sine_1d(n: usize, beta: f64, nu: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("prior dimension must be positive"));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        let m = (n + 1) as f64;
        let norm = (2.0 / m).sqrt();
        let basis = DMatrix::from_fn(n, n, |i, k| {
            let kk = (k + 1) as f64;
            let xi = (i + 1) as f64;
            norm * (kk * xi * std::f64::consts::PI / m).sin()
        });
        let eigenvalues =
            DVector::from_fn(n, |k, _| beta * ((k + 1) as f64).powf(-2.0 * nu));
        Self::new(DVector::zeros(n), eigenvalues, basis)
    }

    /// Prior on the interior nodes of a 2d mesh with covariance
    /// `β (τ·id - Δ)^{-ν}`, where `-Δ` is the symmetrized finite-element
    /// Dirichlet Laplacian `L⁻¹ K L⁻ᵀ` (with `M = L Lᵀ` the interior mass
    /// matrix). The symmetrization keeps the stored basis orthonormal in the
    /// Euclidean inner product.
    pub fn laplacian_2d(mesh: &Mesh2D, beta: f64, nu: f64, tau: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        let k = mesh.stiffness_interior();
        let m = mesh.mass_interior();
        let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        let l = chol.l();
        // A = L⁻¹ K L⁻ᵀ, assembled column by column.
        let mut a = l
            .solve_lower_triangular(&k)
            .ok_or(Error::NotPositiveDefinite)?
            .transpose();
        a = l
            .solve_lower_triangular(&a)
            .ok_or(Error::NotPositiveDefinite)?;
        let a = (&a + a.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(a);
        let n = k.nrows();
        let eigenvalues = DVector::from_fn(n, |i, _| {
            let mu = eig.eigenvalues[i].max(0.0);
            beta * (tau + mu).powf(-nu)
        });
        Self::new(DVector::zeros(n), eigenvalues, eig.eigenvectors)
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        check_dim("prior mean", self.dim(), mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// One zero-mean draw `Σ_k √λ_k ξ_k e_k` with `ξ_k ~ N(0, 1)`.
    pub fn sample_fluctuation(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        let xi = standard_normal_vector(rng, self.eigenvalues.len());
        let scaled = DVector::from_fn(xi.len(), |k, _| self.eigenvalues[k].sqrt() * xi[k]);
        &self.basis * scaled
    }

    /// `count` independent draws from `N(mean, C)`.
    pub fn sample(&self, count: usize, rng: &mut ChaCha12Rng) -> Vec<DVector<f64>> {
        (0..count)
            .map(|_| &self.mean + self.sample_fluctuation(rng))
            .collect()
    }

    /// Dense covariance `B Λ Bᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut scaled = self.basis.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.eigenvalues[k];
        }
        scaled * self.basis.transpose()
    }

    /// Dense precision `B Λ⁻¹ Bᵀ`. Errors on a degenerate prior.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        self.check_invertible()?;
        let mut scaled = self.basis.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col /= self.eigenvalues[k];
        }
        Ok(scaled * self.basis.transpose())
    }

    /// `C⁻¹ x` through the eigenpairs.
    pub fn inv_apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("prior precision apply", self.dim(), x.len())?;
        self.check_invertible()?;
        let coeff = self.basis.transpose() * x;
        let scaled = DVector::from_fn(coeff.len(), |k, _| coeff[k] / self.eigenvalues[k]);
        Ok(&self.basis * scaled)
    }

    /// Squared covariance-weighted norm `xᵀ C⁻¹ x` of an already-centered `x`.
    pub fn inv_norm_sq(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("prior weighted norm", self.dim(), x.len())?;
        self.check_invertible()?;
        let coeff = self.basis.transpose() * x;
        Ok(coeff
            .iter()
            .enumerate()
            .map(|(k, c)| c * c / self.eigenvalues[k])
            .sum())
    }

    /// `C^{1/2} ξ` for a coefficient vector `ξ`.
    pub fn sqrt_apply(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("prior sqrt apply", self.eigenvalues.len(), xi.len())?;
        let scaled = DVector::from_fn(xi.len(), |k, _| self.eigenvalues[k].sqrt() * xi[k]);
        Ok(&self.basis * scaled)
    }

    fn check_invertible(&self) -> Result<()> {
        if self.eigenvalues.iter().any(|&l| l <= 0.0) {
            Err(Error::invalid(
                "operation requires a nondegenerate prior (all eigenvalues > 0)",
            ))
        } else {
            Ok(())
        }
    }
}

/// Samples drawn from `N(mean, C)` with an explicit seed; convenience wrapper
/// used by the experiment runner.
pub fn prior_sample(prior: &GaussianPrior, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = crate::rng::from_seed(seed);
    prior.sample(count, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn degenerate_prior_samples_equal_mean() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let prior = GaussianPrior::new(
            mean.clone(),
            DVector::zeros(3),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let mut rng = crate::rng::from_seed(3);
        for s in prior.sample(4, &mut rng) {
            assert_eq!(s, mean);
        }
    }

    #[test]
    fn sine_basis_is_exactly_orthonormal() {
        let prior = GaussianPrior::dirichlet_sine_1d(64, 5.0, 1.5).unwrap();
        let gram = prior.basis().transpose() * prior.basis();
        let dev = (&gram - DMatrix::identity(64, 64)).abs().max();
        assert!(dev < 1e-12, "max deviation {dev:.3e}");
    }

    #[test]
    fn eigenvalues_are_nonincreasing_and_match_formula() {
        let prior = GaussianPrior::dirichlet_sine_1d(16, 5.0, 1.5).unwrap();
        for k in 0..16 {
            let expect = 5.0 * ((k + 1) as f64).powf(-3.0);
            assert_relative_eq!(prior.eigenvalues()[k], expect, max_relative = 1e-14);
            if k > 0 {
                assert!(prior.eigenvalues()[k] <= prior.eigenvalues()[k - 1]);
            }
        }
    }

    #[test]
    fn mode_variances_match_analytic_eigenvalues() {
        // Monte-Carlo oracle: the coefficient of mode k has variance β k^{-2ν}.
        let prior = GaussianPrior::dirichlet_sine_1d(32, 5.0, 1.5).unwrap();
        let mut rng = crate::rng::from_seed(99);
        let n_samples = 100_000;
        let mut acc = vec![0.0f64; 5];
        for _ in 0..n_samples {
            let u = prior.sample_fluctuation(&mut rng);
            for k in 0..5 {
                let c = prior.basis().column(k).dot(&u);
                acc[k] += c * c;
            }
        }
        for k in 0..5 {
            let var = acc[k] / n_samples as f64;
            let expect = 5.0 * ((k + 1) as f64).powf(-3.0);
            assert_relative_eq!(var, expect, max_relative = 0.05);
        }
    }

    #[test]
    fn empirical_covariance_converges_in_frobenius_norm() {
        let basis = DMatrix::identity(5, 5);
        let eigs = DVector::from_vec(vec![2.0, 1.0, 0.5, 0.25, 0.125]);
        let prior = GaussianPrior::new(DVector::zeros(5), eigs, basis).unwrap();
        let c = prior.covariance();
        let n_samples = 100_000usize;
        let mut rng = crate::rng::from_seed(5);
        let mut acc = DMatrix::zeros(5, 5);
        for _ in 0..n_samples {
            let u = prior.sample_fluctuation(&mut rng);
            acc += &u * u.transpose();
        }
        acc /= n_samples as f64;
        // Var(Ĉ_ij) = (C_ii C_jj + C_ij²)/N for Gaussian samples; compare the
        // Frobenius error against three times the predicted statistical rate.
        let mut var_sum = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                var_sum += (c[(i, i)] * c[(j, j)] + c[(i, j)] * c[(i, j)]) / n_samples as f64;
            }
        }
        let rate = var_sum.sqrt();
        let err = (&acc - &c).norm();
        assert!(err <= 3.0 * rate, "err {err:.3e} rate {rate:.3e}");
    }

    #[test]
    fn sampling_is_reproducible_across_runs() {
        let prior = GaussianPrior::dirichlet_sine_1d(8, 1.0, 2.0).unwrap();
        let a = prior_sample(&prior, 3, 1234);
        let b = prior_sample(&prior, 3, 1234);
        assert_eq!(a, b);
    }

    #[test]
    fn non_orthonormal_basis_is_rejected() {
        let basis = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let res = GaussianPrior::new(DVector::zeros(2), DVector::from_element(2, 1.0), basis);
        assert!(res.is_err());
    }

    #[test]
    fn inv_norm_matches_dense_precision() {
        let prior = GaussianPrior::dirichlet_sine_1d(12, 2.0, 1.0).unwrap();
        let mut rng = crate::rng::from_seed(8);
        let x = crate::rng::standard_normal_vector(&mut rng, 12);
        let dense = prior.precision().unwrap();
        assert_relative_eq!(
            prior.inv_norm_sq(&x).unwrap(),
            x.dot(&(&dense * &x)),
            max_relative = 1e-10
        );
    }
}
