//! Sigmoid feed-forward networks used as scalar state surrogates.
//!
//! A network maps a point `x ∈ R^d` through `L` affine layers; the sigmoid
//! acts componentwise on all but the last layer, whose output stays affine.
//! Parameters travel as one flat vector in the canonical order
//! `W_1 (row-major), b_1, W_2, b_2, …, W_L, b_L`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Input dimension and layer widths `N_1, …, N_L`. The output layer must
/// have width 1: networks here always emulate a scalar field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArchitecture {
    input_dim: usize,
    layer_sizes: Vec<usize>,
}

impl NetworkArchitecture {
    pub fn new(input_dim: usize, layer_sizes: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("network input dimension must be positive"));
        }
        if layer_sizes.is_empty() || layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::invalid("all layer sizes must be positive"));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::invalid("output layer must have width 1"));
        }
        Ok(Self {
            input_dim,
            layer_sizes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len()
    }

    /// `n_θ = Σ_ℓ (N_{ℓ-1} + 1) N_ℓ` with `N_0` the input dimension.
    pub fn param_count(&self) -> usize {
        let mut prev = self.input_dim;
        let mut total = 0;
        for &n in &self.layer_sizes {
            total += (prev + 1) * n;
            prev = n;
        }
        total
    }
}

/// Structured weights `(W_ℓ, b_ℓ)` of a network; converts to and from the
/// canonical flat layout losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl NetworkParams {
    pub fn from_flat(arch: &NetworkArchitecture, theta: &DVector<f64>) -> Result<Self> {
        check_dim("network parameters", arch.param_count(), theta.len())?;
        let mut layers = Vec::with_capacity(arch.depth());
        let mut offset = 0;
        let mut prev = arch.input_dim;
        for &n in &arch.layer_sizes {
            let w = DMatrix::from_fn(n, prev, |r, c| theta[offset + r * prev + c]);
            offset += n * prev;
            let b = DVector::from_fn(n, |r, _| theta[offset + r]);
            offset += n;
            layers.push((w, b));
            prev = n;
        }
        Ok(Self { layers })
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let total: usize = self
            .layers
            .iter()
            .map(|(w, b)| w.len() + b.len())
            .sum();
        let mut theta = DVector::zeros(total);
        let mut offset = 0;
        for (w, b) in &self.layers {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    theta[offset + r * w.ncols() + c] = w[(r, c)];
                }
            }
            offset += w.len();
            for r in 0..b.len() {
                theta[offset + r] = b[r];
            }
            offset += b.len();
        }
        theta
    }

    pub fn layers(&self) -> &[(DMatrix<f64>, DVector<f64>)] {
        &self.layers
    }

    fn forward(&self, x: &[f64]) -> f64 {
        let depth = self.layers.len();
        let mut activ = DVector::from_column_slice(x);
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut z = w * activ + b;
            if l + 1 < depth {
                z.apply(|v| *v = sigmoid(*v));
            }
            activ = z;
        }
        activ[0]
    }
}

/// Overflow-safe logistic function; saturates exactly at 0 and 1 for
/// arguments beyond ±500.
pub fn sigmoid(z: f64) -> f64 {
    if z < -500.0 {
        0.0
    } else if z > 500.0 {
        1.0
    } else {
        1.0 / (1.0 + (-z).exp())
    }
}

/// Evaluate the network at a single point.
pub fn eval_network(arch: &NetworkArchitecture, theta: &DVector<f64>, x: &[f64]) -> Result<f64> {
    check_dim("network input", arch.input_dim(), x.len())?;
    Ok(NetworkParams::from_flat(arch, theta)?.forward(x))
}

/// Evaluate the network at every row of `points` (one point per row).
pub fn eval_on_grid(
    arch: &NetworkArchitecture,
    theta: &DVector<f64>,
    points: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_dim("grid point dimension", arch.input_dim(), points.ncols())?;
    let params = NetworkParams::from_flat(arch, theta)?;
    let mut buf = vec![0.0; points.ncols()];
    Ok(DVector::from_fn(points.nrows(), |i, _| {
        for (c, b) in buf.iter_mut().enumerate() {
            *b = points[(i, c)];
        }
        params.forward(&buf)
    }))
}
