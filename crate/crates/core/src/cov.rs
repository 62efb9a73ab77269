//! Block-diagonal noise covariances.
//!
//! Every covariance that appears in the inversion machinery is a scalar
//! multiple of either the identity or a fixed s.p.d. matrix. Blocks keep
//! their base factorization so that scaling a block (as penalty continuation
//! does) never triggers a refactorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha12Rng;

use crate::error::{check_dim, Error, Result};
use crate::metric::check_symmetric;
use crate::rng::standard_normal_vector;

/// One s.p.d. covariance block, `scale * base`.
#[derive(Debug, Clone)]
pub enum CovBlock {
    /// `scale * I`. `scale = 0` is permitted and denotes an exactly
    /// noise-free block; it can be sampled (always zero) but not inverted.
    ScaledEye { dim: usize, scale: f64 },
    /// `scale * base` for a dense s.p.d. `base`.
    ScaledSpd {
        base: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
        scale: f64,
    },
}

impl CovBlock {
    pub fn eye(dim: usize, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::invalid("covariance scale must be finite and >= 0"));
        }
        Ok(CovBlock::ScaledEye { dim, scale })
    }

    pub fn spd(base: DMatrix<f64>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid("covariance scale must be finite and > 0"));
        }
        check_symmetric(&base, 1e-10)?;
        let chol = base.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        Ok(CovBlock::ScaledSpd { base, chol, scale })
    }

    pub fn dim(&self) -> usize {
        match self {
            CovBlock::ScaledEye { dim, .. } => *dim,
            CovBlock::ScaledSpd { base, .. } => base.nrows(),
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            CovBlock::ScaledEye { scale, .. } | CovBlock::ScaledSpd { scale, .. } => *scale,
        }
    }

    /// Same block with the scale multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            CovBlock::ScaledEye { scale, .. } | CovBlock::ScaledSpd { scale, .. } => {
                *scale *= factor
            }
        }
        out
    }

    /// `(scale * base)⁻¹ x`.
    pub fn inv_apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("covariance block", self.dim(), x.len())?;
        match self {
            CovBlock::ScaledEye { scale, .. } => {
                if *scale <= 0.0 {
                    return Err(Error::invalid("cannot invert a zero covariance block"));
                }
                Ok(x / *scale)
            }
            CovBlock::ScaledSpd { chol, scale, .. } => Ok(chol.solve(x) / *scale),
        }
    }

    /// Squared weighted norm `xᵀ (scale*base)⁻¹ x`.
    pub fn inv_norm_sq(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(x.dot(&self.inv_apply(x)?).max(0.0))
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            CovBlock::ScaledEye { dim, scale } => DMatrix::identity(*dim, *dim) * *scale,
            CovBlock::ScaledSpd { base, scale, .. } => base * *scale,
        }
    }

    /// One draw from `N(0, scale * base)`.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        let z = standard_normal_vector(rng, self.dim());
        match self {
            CovBlock::ScaledEye { scale, .. } => z * scale.sqrt(),
            CovBlock::ScaledSpd { chol, scale, .. } => chol.l() * z * scale.sqrt(),
        }
    }
}

/// Block-diagonal covariance assembled from [`CovBlock`]s.
#[derive(Debug, Clone)]
pub struct BlockDiagCov {
    blocks: Vec<CovBlock>,
    offsets: Vec<usize>,
    dim: usize,
}

impl BlockDiagCov {
    pub fn new(blocks: Vec<CovBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("block covariance needs at least one block"));
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for b in &blocks {
            offsets.push(dim);
            dim += b.dim();
        }
        Ok(Self {
            blocks,
            offsets,
            dim,
        })
    }

    pub fn single(block: CovBlock) -> Self {
        Self::new(vec![block]).expect("one block")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[CovBlock] {
        &self.blocks
    }

    pub fn inv_apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("block covariance", self.dim, x.len())?;
        let mut out = DVector::zeros(self.dim);
        for (block, &off) in self.blocks.iter().zip(&self.offsets) {
            let part = DVector::from(x.rows(off, block.dim()).into_owned());
            out.rows_mut(off, block.dim())
                .copy_from(&block.inv_apply(&part)?);
        }
        Ok(out)
    }

    pub fn inv_norm_sq(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(x.dot(&self.inv_apply(x)?).max(0.0))
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (block, &off) in self.blocks.iter().zip(&self.offsets) {
            out.view_mut((off, off), (block.dim(), block.dim()))
                .copy_from(&block.dense());
        }
        out
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (block, &off) in self.blocks.iter().zip(&self.offsets) {
            out.rows_mut(off, block.dim()).copy_from(&block.sample(rng));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eye_block_inverse_and_dense_agree() {
        let b = CovBlock::eye(3, 4.0).unwrap();
        let x = DVector::from_vec(vec![2.0, -4.0, 8.0]);
        assert_eq!(b.inv_apply(&x).unwrap(), x / 4.0);
        assert_eq!(b.dense(), DMatrix::identity(3, 3) * 4.0);
    }

    #[test]
    fn spd_block_round_trip() {
        let base = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = CovBlock::spd(base.clone(), 3.0).unwrap();
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let applied = &base * b.inv_apply(&x).unwrap() * 3.0;
        assert_relative_eq!(applied, x, epsilon = 1e-12);
    }

    #[test]
    fn zero_scale_block_samples_zero_but_cannot_invert() {
        let b = CovBlock::eye(2, 0.0).unwrap();
        let mut rng = crate::rng::from_seed(1);
        assert_eq!(b.sample(&mut rng), DVector::zeros(2));
        assert!(b.inv_apply(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn block_diag_matches_dense_inverse() {
        let cov = BlockDiagCov::new(vec![
            CovBlock::eye(2, 0.5).unwrap(),
            CovBlock::spd(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), 2.0).unwrap(),
        ])
        .unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let direct = cov.dense().cholesky().unwrap().solve(&x);
        assert_relative_eq!(cov.inv_apply(&x).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn sample_covariance_is_close_to_target() {
        let cov = BlockDiagCov::new(vec![
            CovBlock::eye(1, 2.0).unwrap(),
            CovBlock::spd(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]), 1.5).unwrap(),
        ])
        .unwrap();
        let mut rng = crate::rng::from_seed(7);
        let n = 40_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let z = cov.sample(&mut rng);
            acc += &z * z.transpose();
        }
        acc /= n as f64;
        assert_relative_eq!(acc, cov.dense(), epsilon = 0.05);
    }
}
