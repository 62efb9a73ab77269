//! Reference solvers: closed-form Tikhonov solution of the reduced linear
//! problem, and quasi-Newton (BFGS) minimization with penalty continuation.

use nalgebra::{DMatrix, DVector};

use crate::cov::CovBlock;
use crate::error::{Error, Result};
use crate::fem::{ObservationOperator, ResidualModel};
use crate::oneshot::{AugmentedSystem, PenaltySchedule, StageEstimate};
use crate::prior::GaussianPrior;

/// Solution of the reduced regularized least-squares problem.
#[derive(Debug, Clone)]
pub struct TikhonovSolution {
    pub estimate: DVector<f64>,
    pub objective: f64,
    /// Relative residual of the normal equations at the estimate.
    pub normal_residual_rel: f64,
}

/// Minimize `½‖O S u - y‖²_Γobs + (α₁/2)‖u - u₀‖²_C` for a linear model by
/// solving the normal equations
/// `((OS)ᵀ Γobs⁻¹ OS + α₁ C⁻¹) u = (OS)ᵀ Γobs⁻¹ y + α₁ C⁻¹ u₀`.
pub fn tikhonov_reduced(
    model: &dyn ResidualModel,
    obs: &ObservationOperator,
    y: &DVector<f64>,
    prior: &GaussianPrior,
    alpha1: f64,
    gamma_obs: &CovBlock,
) -> Result<TikhonovSolution> {
    let Some((a_p, b_u)) = model.linear_parts() else {
        return Err(Error::Unsupported(
            "closed-form Tikhonov needs a linear model".into(),
        ));
    };
    if !(alpha1 > 0.0) {
        return Err(Error::invalid("alpha1 must be positive"));
    }
    // S = A⁻¹ B, then OS.
    let a_chol = a_p
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let s_mat = a_chol.solve(b_u);
    let os = obs.dense_interior() * s_mat;
    let w_os = match gamma_obs {
        CovBlock::ScaledEye { scale, .. } => {
            if *scale <= 0.0 {
                return Err(Error::invalid("observation noise must be positive"));
            }
            &os / *scale
        }
        CovBlock::ScaledSpd { chol, scale, .. } => chol.solve(&os) / *scale,
    };
    let normal = os.transpose() * &w_os + prior.precision()? * alpha1;
    let rhs = w_os.transpose() * y + prior.inv_apply(prior.mean())? * alpha1;
    let chol = normal
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let estimate = chol.solve(&rhs);
    let normal_residual_rel = (&normal * &estimate - &rhs).norm() / rhs.norm().max(1e-300);

    let misfit = &os * &estimate - y;
    let objective = 0.5 * gamma_obs.inv_norm_sq(&misfit)?
        + 0.5 * alpha1 * prior.inv_norm_sq(&(&estimate - prior.mean()))?;
    Ok(TikhonovSolution {
        estimate,
        objective,
        normal_residual_rel,
    })
}

/// BFGS configuration. Gradients are central finite differences with
/// per-coordinate step `fd_step · (1 + |x_i|)`.
#[derive(Debug, Clone)]
pub struct BfgsConfig {
    pub max_iterations: usize,
    pub grad_tol: f64,
    /// Armijo constant (sufficient decrease).
    pub c1: f64,
    /// Curvature constant; `0 < c1 < c2 < 1`.
    pub c2: f64,
    pub fd_step: f64,
    pub max_line_search: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            grad_tol: 1e-7,
            c1: 1e-4,
            c2: 0.9,
            fd_step: 1e-6,
            max_line_search: 40,
        }
    }
}

impl BfgsConfig {
    fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.fd_step > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::invalid("line search needs 0 < c1 < c2 < 1"));
        }
        Ok(())
    }
}

/// Result of a BFGS run.
#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// A line search failed and the best iterate so far was returned.
    pub line_search_failed: bool,
    /// Largest asymmetry of the inverse-Hessian approximation observed over
    /// all updates.
    pub max_h_asymmetry: f64,
    pub objective_trace: Vec<f64>,
}

fn fd_gradient(obj: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, base: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = base * (1.0 + x[i].abs());
        let orig = x[i];
        probe[i] = orig + h;
        let fp = obj(&probe);
        probe[i] = orig - h;
        let fm = obj(&probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Strong-Wolfe line search (bracket and zoom). Returns the accepted step
/// or `None` when no acceptable step was found.
fn wolfe_search(
    obj: &dyn Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    f0: f64,
    g0_dot_d: f64,
    dir: &DVector<f64>,
    cfg: &BfgsConfig,
    grad: &dyn Fn(&DVector<f64>) -> DVector<f64>,
) -> Option<(f64, f64)> {
    let phi = |alpha: f64| -> f64 { obj(&(x + dir * alpha)) };
    let dphi = |alpha: f64| -> f64 { grad(&(x + dir * alpha)).dot(dir) };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = 1.0;
    let zoom = |mut lo: f64, mut hi: f64, mut f_lo: f64| -> Option<(f64, f64)> {
        for _ in 0..cfg.max_line_search {
            let mid = 0.5 * (lo + hi);
            let f_mid = phi(mid);
            if !f_mid.is_finite() || f_mid > f0 + cfg.c1 * mid * g0_dot_d || f_mid >= f_lo {
                hi = mid;
            } else {
                let d_mid = dphi(mid);
                if d_mid.abs() <= -cfg.c2 * g0_dot_d {
                    return Some((mid, f_mid));
                }
                if d_mid * (hi - lo) >= 0.0 {
                    hi = lo;
                }
                lo = mid;
                f_lo = f_mid;
            }
            if (hi - lo).abs() < 1e-16 * lo.abs().max(1.0) {
                break;
            }
        }
        None
    };

    for _ in 0..cfg.max_line_search {
        let f_alpha = phi(alpha);
        if !f_alpha.is_finite() || f_alpha > f0 + cfg.c1 * alpha * g0_dot_d || f_alpha >= f_prev {
            return zoom(alpha_prev, alpha, f_prev);
        }
        let d_alpha = dphi(alpha);
        if d_alpha.abs() <= -cfg.c2 * g0_dot_d {
            return Some((alpha, f_alpha));
        }
        if d_alpha >= 0.0 {
            return zoom(alpha, alpha_prev, f_alpha);
        }
        alpha_prev = alpha;
        f_prev = f_alpha;
        alpha *= 2.0;
    }
    None
}

/// Minimize a black-box objective by BFGS with inverse-Hessian updates,
/// strong-Wolfe line search and finite-difference gradients. A failed line
/// search terminates the run with the best iterate and a warning flag.
pub fn bfgs_minimize(
    objective: &dyn Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    cfg: &BfgsConfig,
) -> Result<BfgsOutcome> {
    cfg.validate()?;
    let f0 = objective(x0);
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective at the starting point"));
    }
    let n = x0.len();
    let grad = |x: &DVector<f64>| fd_gradient(objective, x, cfg.fd_step);

    let mut x = x0.clone();
    let mut f = f0;
    let mut g = grad(&x);
    let mut h = DMatrix::identity(n, n);
    let mut trace = vec![f];
    let mut max_asym = 0.0f64;
    let mut failed = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        if g.norm() <= cfg.grad_tol {
            break;
        }
        iterations += 1;
        let dir = -(&h * &g);
        let mut g_dot_d = g.dot(&dir);
        let dir = if g_dot_d >= 0.0 {
            // Non-descent direction: reset the approximation.
            h = DMatrix::identity(n, n);
            g_dot_d = -g.norm_squared();
            -g.clone()
        } else {
            dir
        };
        let Some((alpha, f_new)) = wolfe_search(objective, &x, f, g_dot_d, &dir, cfg, &grad)
        else {
            failed = true;
            break;
        };
        let step = &dir * alpha;
        let x_new = &x + &step;
        let g_new = grad(&x_new);
        let y_vec = &g_new - &g;
        let sy = step.dot(&y_vec);
        if sy > 1e-12 * step.norm() * y_vec.norm() {
            let rho = 1.0 / sy;
            // H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ
            let hy = &h * &y_vec;
            let yhy = y_vec.dot(&hy);
            let s_hyt = &step * hy.transpose();
            h -= (&s_hyt + s_hyt.transpose()) * rho;
            h += (&step * step.transpose()) * (rho * rho * yhy + rho);
            let asym = (&h - h.transpose()).abs().max();
            max_asym = max_asym.max(asym);
            h = (&h + h.transpose()) * 0.5;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
    }

    Ok(BfgsOutcome {
        grad_norm: g.norm(),
        x,
        objective: f,
        iterations,
        line_search_failed: failed,
        max_h_asymmetry: max_asym,
        objective_trace: trace,
    })
}

/// Options for [`quasi_newton_penalty`].
pub struct QuasiNewtonPenaltyConfig {
    pub bfgs: BfgsConfig,
    /// Restart every stage from the initial point instead of warm-starting.
    pub cold_start: bool,
    /// Starting point `(u, s)`; defaults to `(u₀, 0)`.
    pub x0: Option<DVector<f64>>,
}

impl Default for QuasiNewtonPenaltyConfig {
    fn default() -> Self {
        Self {
            bfgs: BfgsConfig::default(),
            cold_start: false,
            x0: None,
        }
    }
}

/// Penalty continuation driven by BFGS: each stage minimizes the λ_k-loss,
/// warm-started from the previous minimizer.
pub fn quasi_newton_penalty(
    sys: &AugmentedSystem,
    schedule: &[f64],
    cfg: &QuasiNewtonPenaltyConfig,
) -> Result<Vec<StageEstimate>> {
    PenaltySchedule::Discrete(schedule.to_vec()).validate()?;
    let start = match &cfg.x0 {
        Some(x) => x.clone(),
        None => sys.join(sys.prior_u.mean(), &DVector::zeros(sys.n_s())),
    };
    let mut current = start.clone();
    let mut stages = Vec::with_capacity(schedule.len());
    for &lambda in schedule {
        let objective = |v: &DVector<f64>| -> f64 {
            let Ok((u, s)) = sys.split(v) else {
                return f64::INFINITY;
            };
            match sys.loss(lambda, &u, &s) {
                Ok(l) => l.total(),
                Err(_) => f64::INFINITY,
            }
        };
        let x0 = if cfg.cold_start { &start } else { &current };
        let outcome = bfgs_minimize(&objective, x0, &cfg.bfgs)?;
        current = outcome.x.clone();
        let (u, s) = sys.split(&current)?;
        stages.push(StageEstimate {
            lambda,
            loss: sys.loss(lambda, &u, &s)?,
            u,
            s,
        });
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{Grid1D, LinearForwardModel};
    use approx::assert_relative_eq;

    #[test]
    fn scalar_tikhonov_matches_hand_value() {
        // S = O = 1, Γ = C = 1, u₀ = 0, y = 2, α₁ = 1: (1 + 1) u = 2.
        let model = ScalarModel;
        let obs = node_one_observation();
        let prior = GaussianPrior::new(
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let sol = tikhonov_reduced(
            &model,
            &obs,
            &DVector::from_element(1, 2.0),
            &prior,
            1.0,
            &CovBlock::eye(1, 1.0).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(sol.estimate[0], 1.0, epsilon = 1e-12);
        assert!(sol.normal_residual_rel <= 1e-10);
    }

    struct ScalarModel;

    impl ResidualModel for ScalarModel {
        fn n_u(&self) -> usize {
            1
        }
        fn n_p(&self) -> usize {
            1
        }
        fn n_w(&self) -> usize {
            1
        }
        fn residual(&self, u: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(p - u)
        }
        fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(u.clone())
        }
        fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
            use std::sync::OnceLock;
            static PARTS: OnceLock<(DMatrix<f64>, DMatrix<f64>)> = OnceLock::new();
            let (a, b) =
                PARTS.get_or_init(|| (DMatrix::identity(1, 1), DMatrix::identity(1, 1)));
            Some((a, b))
        }
    }

    /// Identity observation of the single interior node of a 3-node grid.
    fn node_one_observation() -> ObservationOperator {
        let grid = Grid1D::new(1).unwrap();
        ObservationOperator::interpolate_1d(&grid, &[grid.node(1)]).unwrap()
    }

    #[test]
    fn prior_dominated_limit_returns_the_prior_mean() {
        let grid = Grid1D::new(16).unwrap();
        let model = LinearForwardModel::new(grid);
        let prior = GaussianPrior::dirichlet_sine_1d(16, 5.0, 1.5).unwrap();
        let obs = ObservationOperator::interpolate_1d(&grid, &[1.0, 2.0]).unwrap();
        let truth = DVector::from_vec(grid.interior_nodes().iter().map(|x| x.sin()).collect());
        let y_clean = obs.apply_interior(&model.solve(&truth).unwrap()).unwrap();
        let sol = tikhonov_reduced(
            &model,
            &obs,
            &y_clean,
            &prior,
            1e9,
            &CovBlock::eye(2, 0.1).unwrap(),
        )
        .unwrap();
        assert!(sol.estimate.norm() < 1e-5);
    }

    #[test]
    fn data_dominated_limit_inverts_the_forward_map() {
        // Full observation of the single interior node: α₁ → 0 recovers
        // (OS)⁻¹ y. With S = O = id this is y itself.
        let model = ScalarModel;
        let obs = scalar_obs();
        let prior = GaussianPrior::new(
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let sol = tikhonov_reduced(
            &model,
            &obs,
            &DVector::from_element(1, 2.0),
            &prior,
            1e-10,
            &CovBlock::eye(1, 1.0).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(sol.estimate[0], 2.0, max_relative = 1e-8);
    }

    #[test]
    fn tikhonov_is_a_local_minimum_under_perturbations() {
        let grid = Grid1D::new(12).unwrap();
        let model = LinearForwardModel::new(grid);
        let prior = GaussianPrior::dirichlet_sine_1d(12, 2.0, 1.0).unwrap();
        let obs = ObservationOperator::interpolate_1d(&grid, &[0.7, 1.4, 2.2]).unwrap();
        let gamma = CovBlock::eye(3, 0.1).unwrap();
        let truth = &prior.sample(1, &mut crate::rng::from_seed(2))[0];
        let data = crate::fem::synthesize_data(&model, &obs, truth, &gamma, 5).unwrap();
        let sol = tikhonov_reduced(&model, &obs, &data.y, &prior, 0.01, &gamma).unwrap();

        let objective = |u: &DVector<f64>| -> f64 {
            let mis = obs.apply_interior(&model.solve(u).unwrap()).unwrap() - &data.y;
            0.5 * gamma.inv_norm_sq(&mis).unwrap()
                + 0.5 * 0.01 * prior.inv_norm_sq(u).unwrap()
        };
        let f_star = objective(&sol.estimate);
        let mut rng = crate::rng::from_seed(11);
        for _ in 0..100 {
            let mut d = crate::rng::standard_normal_vector(&mut rng, 12);
            d *= 1e-3 / d.norm();
            assert!(objective(&(&sol.estimate + d)) >= f_star);
        }
    }

    #[test]
    fn bfgs_solves_a_quadratic_to_high_accuracy() {
        let mut rng = crate::rng::from_seed(3);
        let raw = DMatrix::from_fn(5, 5, |_, _| {
            rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let q = &raw * raw.transpose() + DMatrix::identity(5, 5);
        let b = crate::rng::standard_normal_vector(&mut rng, 5);
        let objective = |x: &DVector<f64>| 0.5 * x.dot(&(&q * x)) - b.dot(x);
        let outcome = bfgs_minimize(
            &objective,
            &DVector::zeros(5),
            &BfgsConfig {
                max_iterations: 50,
                grad_tol: 1e-9,
                ..BfgsConfig::default()
            },
        )
        .unwrap();
        assert!(outcome.iterations <= 50);
        let resid = (&q * &outcome.x - &b).norm();
        assert!(resid <= 1e-6, "‖Qx - b‖ = {resid:.3e}");
        assert!(outcome.max_h_asymmetry <= 1e-10);
    }

    #[test]
    fn starting_at_the_optimum_takes_no_iterations() {
        let objective = |x: &DVector<f64>| x.norm_squared();
        let outcome = bfgs_minimize(
            &objective,
            &DVector::zeros(3),
            &BfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(outcome.iterations, 0);
        assert_eq!(outcome.x, DVector::zeros(3));
    }

    #[test]
    fn bfgs_descends_the_rosenbrock_valley() {
        let objective = |x: &DVector<f64>| {
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            a * a + 100.0 * b * b
        };
        let outcome = bfgs_minimize(
            &objective,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &BfgsConfig {
                max_iterations: 500,
                grad_tol: 1e-9,
                ..BfgsConfig::default()
            },
        )
        .unwrap();
        assert!(outcome.objective < 1e-8, "objective {:.3e}", outcome.objective);
        assert_relative_eq!(outcome.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(outcome.x[1], 1.0, epsilon = 1e-4);
    }
}
