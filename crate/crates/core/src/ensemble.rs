//! Particle ensembles and their empirical statistics.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::prior::GaussianPrior;
use crate::rng::standard_normal_vector;

/// `J >= 2` particles of equal dimension.
#[derive(Debug, Clone)]
pub struct Ensemble {
    particles: Vec<DVector<f64>>,
}

/// Empirical mean and covariances of an ensemble paired with its images
/// under a forward map. All covariances use the `1/J` normalization that the
/// Kalman update formulas are built from; the `1/(J-1)` estimator is exposed
/// separately as a diagnostic.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean_v: DVector<f64>,
    pub mean_g: DVector<f64>,
    /// `(1/J) Σ_j (v_j - v̄) ⊗ (G(v_j) - Ḡ)`, shape `n_v × n_g`.
    pub c_vy: DMatrix<f64>,
    /// `(1/J) Σ_j (G(v_j) - Ḡ) ⊗ (G(v_j) - Ḡ)`, shape `n_g × n_g`.
    pub c_yy: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(particles: Vec<DVector<f64>>) -> Result<Self> {
        if particles.len() < 2 {
            return Err(Error::invalid("ensemble needs at least two particles"));
        }
        let dim = particles[0].len();
        if particles.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("all particles must share one dimension"));
        }
        Ok(Self { particles })
    }

    /// `count` i.i.d. draws from `N(mean, C)` with `C` given by the prior.
    pub fn from_prior(prior: &GaussianPrior, count: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Self::new(prior.sample(count, rng))
    }

    /// Ensemble whose empirical mean and `1/J` covariance equal `mean` and
    /// the prior covariance exactly: standard normal draws are centered and
    /// whitened by their own sample factor before being colored by `C^{1/2}`.
    /// Requires `count > dim`.
    pub fn from_prior_exact_moments(
        prior: &GaussianPrior,
        count: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let n = prior.dim();
        if count <= n {
            return Err(Error::invalid(
                "exact-moment sampling needs more particles than dimensions",
            ));
        }
        let mut z = DMatrix::from_fn(n, count, |_, _| 0.0);
        for j in 0..count {
            z.set_column(j, &standard_normal_vector(rng, n));
        }
        let row_means = z.column_mean();
        for j in 0..count {
            let centered = z.column(j) - &row_means;
            z.set_column(j, &centered);
        }
        let sample_cov = (&z * z.transpose()) / count as f64;
        let chol = sample_cov
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?;
        // Whitened columns have exact identity sample covariance.
        let white = chol
            .l()
            .solve_lower_triangular(&z)
            .ok_or(Error::NotPositiveDefinite)?;
        let particles = (0..count)
            .map(|j| {
                let xi = DVector::from(white.column(j).into_owned());
                Ok(prior.mean() + prior.sqrt_apply(&xi)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(particles)
    }

    pub fn size(&self) -> usize {
        self.particles.len()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn into_particles(self) -> Vec<DVector<f64>> {
        self.particles
    }

    /// Arithmetic average of the particles, accumulated in index order.
    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for p in &self.particles {
            acc += p;
        }
        acc / self.size() as f64
    }

    /// Matrix of centered particles, one column per particle.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut out = DMatrix::zeros(self.dim(), self.size());
        for (j, p) in self.particles.iter().enumerate() {
            out.set_column(j, &(p - &mean));
        }
        out
    }

    /// `(1/J) Σ_j ‖v_j - v̄‖²`, the trace of the empirical covariance.
    pub fn spread_sq(&self) -> f64 {
        let mean = self.mean();
        self.particles
            .iter()
            .map(|p| (p - &mean).norm_squared())
            .sum::<f64>()
            / self.size() as f64
    }

    pub fn max_pairwise_distance(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.size() {
            for j in (i + 1)..self.size() {
                best = best.max((&self.particles[i] - &self.particles[j]).norm());
            }
        }
        best
    }

    /// Empirical covariance with the `1/J` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let a = self.anomalies();
        (&a * a.transpose()) / self.size() as f64
    }

    /// Unbiased `1/(J-1)` covariance estimator (diagnostic only; the update
    /// formulas use [`Ensemble::covariance`]).
    pub fn covariance_unbiased(&self) -> DMatrix<f64> {
        let a = self.anomalies();
        (&a * a.transpose()) / (self.size() - 1) as f64
    }

    /// Empirical mean and cross-/output-covariances of the ensemble and its
    /// forward images. `images[j]` must be the image of particle `j`.
    pub fn empirical_stats(&self, images: &[DVector<f64>]) -> Result<EnsembleStats> {
        if images.len() != self.size() {
            return Err(Error::invalid(
                "one forward image per particle is required",
            ));
        }
        let n_g = images[0].len();
        if images.iter().any(|g| g.len() != n_g) {
            return Err(Error::invalid("all forward images must share one dimension"));
        }
        let mean_v = self.mean();
        let mut mean_g = DVector::zeros(n_g);
        for g in images {
            mean_g += g;
        }
        mean_g /= self.size() as f64;

        let mut u = DMatrix::zeros(self.dim(), self.size());
        let mut y = DMatrix::zeros(n_g, self.size());
        for j in 0..self.size() {
            u.set_column(j, &(&self.particles[j] - &mean_v));
            y.set_column(j, &(&images[j] - &mean_g));
        }
        let inv_j = 1.0 / self.size() as f64;
        let c_vy = (&u * y.transpose()) * inv_j;
        let c_yy = (&y * y.transpose()) * inv_j;
        Ok(EnsembleStats {
            mean_v,
            mean_g,
            c_vy,
            c_yy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::GaussianPrior;
    use approx::assert_relative_eq;

    fn identity_images(ens: &Ensemble) -> Vec<DVector<f64>> {
        ens.particles().to_vec()
    }

    #[test]
    fn fewer_than_two_particles_is_an_error() {
        assert!(Ensemble::new(vec![DVector::zeros(3)]).is_err());
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        assert!(Ensemble::new(vec![DVector::zeros(3), DVector::zeros(2)]).is_err());
    }

    #[test]
    fn identical_particles_have_zero_covariances() {
        let p = DVector::from_vec(vec![1.0, 2.0]);
        let ens = Ensemble::new(vec![p.clone(), p.clone(), p]).unwrap();
        let stats = ens.empirical_stats(&identity_images(&ens)).unwrap();
        assert_eq!(stats.c_vy.abs().max(), 0.0);
        assert_eq!(stats.c_yy.abs().max(), 0.0);
    }

    #[test]
    fn two_particle_hand_computation() {
        // v = {0, 2}, G = id: v̄ = 1 and C^{vy} = C^{yy} = (1/2)((-1)² + 1²) = 1.
        let ens = Ensemble::new(vec![DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)])
            .unwrap();
        let stats = ens.empirical_stats(&identity_images(&ens)).unwrap();
        assert_eq!(stats.mean_v[0], 1.0);
        assert_eq!(stats.c_vy[(0, 0)], 1.0);
        assert_eq!(stats.c_yy[(0, 0)], 1.0);
    }

    #[test]
    fn cross_covariances_are_transposes() {
        let mut rng = crate::rng::from_seed(17);
        let parts: Vec<_> = (0..6)
            .map(|_| crate::rng::standard_normal_vector(&mut rng, 3))
            .collect();
        let ens = Ensemble::new(parts).unwrap();
        let images: Vec<_> = ens
            .particles()
            .iter()
            .map(|v| DVector::from_vec(vec![v[0] + v[1], v[2] * 2.0]))
            .collect();
        let stats = ens.empirical_stats(&images).unwrap();
        // C^{yv} is by definition the transpose of C^{vy}; check against a
        // direct accumulation.
        let mean_v = ens.mean();
        let mut c_yv = DMatrix::zeros(2, 3);
        for (v, g) in ens.particles().iter().zip(&images) {
            c_yv += (g - &stats.mean_g) * (v - &mean_v).transpose();
        }
        c_yv /= ens.size() as f64;
        assert_relative_eq!(c_yv, stats.c_vy.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn output_covariance_is_psd_with_bounded_rank() {
        let mut rng = crate::rng::from_seed(23);
        let j = 4;
        let parts: Vec<_> = (0..j)
            .map(|_| crate::rng::standard_normal_vector(&mut rng, 6))
            .collect();
        let ens = Ensemble::new(parts).unwrap();
        let stats = ens.empirical_stats(&identity_images(&ens)).unwrap();
        let eig = nalgebra::SymmetricEigen::new(stats.c_yy.clone());
        let mut positive = 0;
        for &l in eig.eigenvalues.iter() {
            assert!(l > -1e-12, "eigenvalue {l:.3e} below zero");
            if l > 1e-12 {
                positive += 1;
            }
        }
        assert!(positive <= j - 1, "rank {positive} exceeds J-1");
    }

    #[test]
    fn permutation_invariance_of_stats() {
        let mut rng = crate::rng::from_seed(31);
        let parts: Vec<_> = (0..8)
            .map(|_| crate::rng::standard_normal_vector(&mut rng, 4))
            .collect();
        let mut permuted = parts.clone();
        permuted.rotate_left(3);
        permuted.swap(0, 5);
        let a = Ensemble::new(parts).unwrap();
        let b = Ensemble::new(permuted).unwrap();
        let sa = a.empirical_stats(&identity_images(&a)).unwrap();
        let sb = b.empirical_stats(&identity_images(&b)).unwrap();
        assert_relative_eq!(sa.mean_v, sb.mean_v, max_relative = 1e-13);
        assert_relative_eq!(sa.c_yy, sb.c_yy, max_relative = 1e-12, epsilon = 1e-13);
    }

    #[test]
    fn unbiased_estimator_differs_by_the_expected_factor() {
        let ens = Ensemble::new(vec![DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)])
            .unwrap();
        assert_eq!(ens.covariance()[(0, 0)], 1.0);
        assert_eq!(ens.covariance_unbiased()[(0, 0)], 2.0);
    }

    #[test]
    fn exact_moment_sampling_reproduces_mean_and_covariance() {
        let prior = GaussianPrior::dirichlet_sine_1d(5, 2.0, 1.0).unwrap();
        let mut rng = crate::rng::from_seed(77);
        let ens = Ensemble::from_prior_exact_moments(&prior, 12, &mut rng).unwrap();
        assert_relative_eq!(ens.mean(), prior.mean().clone(), epsilon = 1e-12);
        assert_relative_eq!(ens.covariance(), prior.covariance(), epsilon = 1e-10);
    }
}
