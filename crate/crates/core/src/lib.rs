//! Derivative-free solvers for PDE-constrained inverse problems.
//!
//! The crate implements ensemble Kalman inversion (EKI) applied to the
//! one-shot (all-at-once) formulation of an inverse problem: given a model
//! residual `M(u, p)` and observations `y = O(p) + noise`, parameter `u` and
//! state `p` are estimated jointly by treating the model equation as a
//! penalized observation whose weight grows along a continuation schedule.
//! The state may be a finite-element nodal vector or the grid evaluation of
//! a small feed-forward network whose weights are estimated alongside `u`.
//!
//! Module map:
//! - [`metric`], [`prior`], [`ensemble`], [`cov`]: weighted norms, spectral
//!   Gaussian priors, particle ensembles and their empirical statistics.
//! - [`fem`]: 1d reaction-diffusion, 1d nonlinear diffusion and 2d Poisson
//!   forward models with pointwise observation operators.
//! - [`nn`]: sigmoid feed-forward networks used as state surrogates.
//! - [`ode`]: adaptive Dormand-Prince 5(4) integration with dense output.
//! - [`eki`]: the Kalman inversion dynamics (discrete and continuous).
//! - [`oneshot`]: augmented systems, penalty schedules and the two
//!   continuation algorithms.
//! - [`baselines`]: closed-form Tikhonov and BFGS reference solvers.
//! - [`experiment`]: config-driven experiment runner and artifact I/O.

pub mod baselines;
pub mod cov;
pub mod eki;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod metric;
pub mod nn;
pub mod ode;
pub mod oneshot;
pub mod prior;
pub mod rng;

pub use error::{Error, Result};
