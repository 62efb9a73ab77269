//! One-shot (all-at-once) inversion with penalty continuation.
//!
//! The unknown is the joint vector `v = (u, s)`: parameter plus state
//! variable, where the state variable is either the nodal state itself or
//! the weights of a surrogate producing it. The augmented forward operator
//!
//! ```text
//! G(v) = ( M(u, p), O(p), u, s ),    p = state(s),
//! ```
//!
//! observed against `ŷ = (0, y, u₀, 0)` under the block noise covariance
//! `Γ(λ) = diag(Γ̂_model/λ, Γ_obs, C/α₁, I/α₂)`, turns ensemble Kalman
//! inversion into a minimizer of the penalized loss
//!
//! ```text
//! ½‖O(p) - y‖²_Γobs + (λ/2)‖M(u, p)‖²_Γ̂ + (α₁/2)‖u - u₀‖²_C + (α₂/2)‖s‖².
//! ```
//!
//! Identity blocks with a zero regularization weight are dropped from the
//! system entirely. Two continuation drivers are provided: a discrete
//! schedule solving one Kalman inversion per penalty value, and a coupled
//! flow evolving `dλ/dt = f(λ)` alongside the particles.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;

use crate::cov::{BlockDiagCov, CovBlock};
use crate::eki::{
    apply_all, ensemble_drift, flatten, unflatten, ContinuousVariant, ForwardMap,
    IntegrateOptions, InverseProblem,
};
use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::fem::{ObservationOperator, ResidualModel};
use crate::nn::{self, NetworkArchitecture};
use crate::ode::{self, SampleFlow};
use crate::prior::GaussianPrior;
use crate::rng::standard_normal_vector;

/// Continuation is capped here to keep the model-error covariance away from
/// underflow; a run that reaches the cap reports saturation.
pub const LAMBDA_CAP: f64 = 1e12;

/// How the state vector `p` is produced from the state variable `s`.
pub enum Surrogate {
    /// `s` is the nodal state itself.
    FemState,
    /// `p = eval(s)` for a feed-forward network evaluated at fixed grid
    /// points (one point per row).
    Network {
        arch: NetworkArchitecture,
        grid: DMatrix<f64>,
    },
    /// `p = B s` for a fixed matrix; the fully linear surrogate.
    Linear { matrix: DMatrix<f64> },
}

impl Surrogate {
    pub fn state_dim(&self, n_p: usize) -> usize {
        match self {
            Surrogate::FemState => n_p,
            Surrogate::Network { arch, .. } => arch.param_count(),
            Surrogate::Linear { matrix } => matrix.ncols(),
        }
    }

    pub fn state(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Surrogate::FemState => Ok(s.clone()),
            Surrogate::Network { arch, grid } => nn::eval_on_grid(arch, s, grid),
            Surrogate::Linear { matrix } => {
                check_dim("linear surrogate", matrix.ncols(), s.len())?;
                Ok(matrix * s)
            }
        }
    }

    /// The matrix `P` with `p = P s`, when the surrogate is linear.
    pub fn linear_matrix(&self, n_p: usize) -> Option<DMatrix<f64>> {
        match self {
            Surrogate::FemState => Some(DMatrix::identity(n_p, n_p)),
            Surrogate::Linear { matrix } => Some(matrix.clone()),
            Surrogate::Network { .. } => None,
        }
    }
}

/// Observation of the interior state: interpolation rows or a plain matrix.
pub enum StateObservation {
    Interpolation(ObservationOperator),
    Matrix(DMatrix<f64>),
}

impl StateObservation {
    pub fn n_obs(&self) -> usize {
        match self {
            StateObservation::Interpolation(o) => o.n_obs(),
            StateObservation::Matrix(m) => m.nrows(),
        }
    }

    pub fn apply(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            StateObservation::Interpolation(o) => o.apply_interior(p),
            StateObservation::Matrix(m) => {
                check_dim("observation matrix", m.ncols(), p.len())?;
                Ok(m * p)
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            StateObservation::Interpolation(o) => o.dense_interior(),
            StateObservation::Matrix(m) => m.clone(),
        }
    }
}

/// The assembled one-shot system; see the module docs for the block layout.
pub struct AugmentedSystem<'a> {
    pub model: &'a dyn ResidualModel,
    pub obs: StateObservation,
    /// Observed data `y`.
    pub data: DVector<f64>,
    pub surrogate: Surrogate,
    /// Prior `N(u₀, C)` on the parameter.
    pub prior_u: GaussianPrior,
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma_obs: CovBlock,
    /// The reference model-error covariance `Γ̂`; the effective covariance is
    /// `Γ̂/λ`.
    pub gamma_model_hat: CovBlock,
}

/// The loss value with each term reported separately.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    /// `½‖O(p) - y‖²_Γobs`.
    pub obs_term: f64,
    /// `(λ/2)‖M(u, p)‖²_Γ̂`.
    pub model_term: f64,
    /// `(α₁/2)‖u - u₀‖²_C`.
    pub reg_u_term: f64,
    /// `(α₂/2)‖s‖²`.
    pub reg_s_term: f64,
    /// Unweighted squared residual `‖M(u, p)‖²`.
    pub model_residual_sq: f64,
    /// `‖O(p) - y‖²_Γobs`.
    pub obs_misfit_sq: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.obs_term + self.model_term + self.reg_u_term + self.reg_s_term
    }
}

impl<'a> AugmentedSystem<'a> {
    pub fn new(
        model: &'a dyn ResidualModel,
        obs: StateObservation,
        data: DVector<f64>,
        surrogate: Surrogate,
        prior_u: GaussianPrior,
        alpha1: f64,
        alpha2: f64,
        gamma_obs: CovBlock,
        gamma_model_hat: CovBlock,
    ) -> Result<Self> {
        check_dim("observed data", obs.n_obs(), data.len())?;
        check_dim("observation noise", obs.n_obs(), gamma_obs.dim())?;
        check_dim("model noise", model.n_w(), gamma_model_hat.dim())?;
        check_dim("parameter prior", model.n_u(), prior_u.dim())?;
        if !(alpha1 >= 0.0 && alpha2 >= 0.0) {
            return Err(Error::invalid("regularization weights must be >= 0"));
        }
        if let Surrogate::Network { arch: _, grid } = &surrogate {
            check_dim("surrogate grid", model.n_p(), grid.nrows())?;
        }
        if let Surrogate::Linear { matrix } = &surrogate {
            check_dim("surrogate output", model.n_p(), matrix.nrows())?;
        }
        Ok(Self {
            model,
            obs,
            data,
            surrogate,
            prior_u,
            alpha1,
            alpha2,
            gamma_obs,
            gamma_model_hat,
        })
    }

    pub fn n_u(&self) -> usize {
        self.model.n_u()
    }

    pub fn n_s(&self) -> usize {
        self.surrogate.state_dim(self.model.n_p())
    }

    pub fn n_v(&self) -> usize {
        self.n_u() + self.n_s()
    }

    /// Split a joint vector into `(u, s)`.
    pub fn split(&self, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("joint vector", self.n_v(), v.len())?;
        let u = v.rows(0, self.n_u()).into_owned();
        let s = v.rows(self.n_u(), self.n_s()).into_owned();
        Ok((u, s))
    }

    pub fn join(&self, u: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_v());
        v.rows_mut(0, self.n_u()).copy_from(u);
        v.rows_mut(self.n_u(), self.n_s()).copy_from(s);
        v
    }

    /// Output block sizes `(n_w, n_y, u-block, s-block)`; zero-weight blocks
    /// have size 0.
    pub fn block_dims(&self) -> (usize, usize, usize, usize) {
        (
            self.model.n_w(),
            self.obs.n_obs(),
            if self.alpha1 > 0.0 { self.n_u() } else { 0 },
            if self.alpha2 > 0.0 { self.n_s() } else { 0 },
        )
    }

    /// The augmented data `ŷ = (0, y, u₀, 0)`.
    pub fn yhat(&self) -> DVector<f64> {
        let (n_w, n_y, b_u, b_s) = self.block_dims();
        let mut out = DVector::zeros(n_w + n_y + b_u + b_s);
        out.rows_mut(n_w, n_y).copy_from(&self.data);
        if b_u > 0 {
            out.rows_mut(n_w + n_y, b_u).copy_from(self.prior_u.mean());
        }
        out
    }

    /// Block covariance `Γ(λ)` as concrete blocks (requires `λ > 0`).
    pub fn gamma_blocks(&self, lambda: f64) -> Result<BlockDiagCov> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("gamma blocks need a positive penalty"));
        }
        let (_, _, b_u, b_s) = self.block_dims();
        let mut blocks = vec![
            self.gamma_model_hat.rescaled(1.0 / lambda),
            self.gamma_obs.clone(),
        ];
        if b_u > 0 {
            blocks.push(CovBlock::spd(
                self.prior_u.covariance(),
                1.0 / self.alpha1,
            )?);
        }
        if b_s > 0 {
            blocks.push(CovBlock::eye(b_s, 1.0 / self.alpha2)?);
        }
        BlockDiagCov::new(blocks)
    }

    /// `Γ(λ)⁻¹ r` without materializing blocks; `λ = 0` zeroes the model
    /// block (infinite model noise).
    pub fn gamma_inv_apply(&self, lambda: f64, r: &DVector<f64>) -> Result<DVector<f64>> {
        let (n_w, n_y, b_u, b_s) = self.block_dims();
        check_dim("augmented residual", n_w + n_y + b_u + b_s, r.len())?;
        let mut out = DVector::zeros(r.len());
        let model_part = r.rows(0, n_w).into_owned();
        if lambda > 0.0 {
            out.rows_mut(0, n_w)
                .copy_from(&(self.gamma_model_hat.inv_apply(&model_part)? * lambda));
        }
        let obs_part = r.rows(n_w, n_y).into_owned();
        out.rows_mut(n_w, n_y)
            .copy_from(&self.gamma_obs.inv_apply(&obs_part)?);
        if b_u > 0 {
            let u_part = r.rows(n_w + n_y, b_u).into_owned();
            out.rows_mut(n_w + n_y, b_u)
                .copy_from(&(self.prior_u.inv_apply(&u_part)? * self.alpha1));
        }
        if b_s > 0 {
            let s_part = r.rows(n_w + n_y + b_u, b_s).into_owned();
            out.rows_mut(n_w + n_y + b_u, b_s)
                .copy_from(&(s_part * self.alpha2));
        }
        Ok(out)
    }

    /// The penalized loss at `(u, s)`, term by term.
    pub fn loss(&self, lambda: f64, u: &DVector<f64>, s: &DVector<f64>) -> Result<LossBreakdown> {
        let p = self.surrogate.state(s)?;
        let residual = self.model.residual(u, &p)?;
        if residual.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("model residual"));
        }
        let obs_diff = self.obs.apply(&p)? - &self.data;
        let obs_misfit_sq = self.gamma_obs.inv_norm_sq(&obs_diff)?;
        let model_w = self.gamma_model_hat.inv_norm_sq(&residual)?;
        let reg_u = if self.alpha1 > 0.0 {
            0.5 * self.alpha1 * self.prior_u.inv_norm_sq(&(u - self.prior_u.mean()))?
        } else {
            0.0
        };
        let reg_s = if self.alpha2 > 0.0 {
            0.5 * self.alpha2 * s.norm_squared()
        } else {
            0.0
        };
        Ok(LossBreakdown {
            obs_term: 0.5 * obs_misfit_sq,
            model_term: 0.5 * lambda * model_w,
            reg_u_term: reg_u,
            reg_s_term: reg_s,
            model_residual_sq: residual.norm_squared(),
            obs_misfit_sq,
        })
    }

    /// Initial ensemble: `u ~ N(u₀, C)`, `s ~ N(0, σ² I)`.
    pub fn initial_ensemble(
        &self,
        count: usize,
        state_init_std: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Ensemble> {
        let particles = (0..count)
            .map(|_| {
                let u = self.prior_u.mean() + self.prior_u.sample_fluctuation(rng);
                let s = standard_normal_vector(rng, self.n_s()) * state_init_std;
                self.join(&u, &s)
            })
            .collect();
        Ensemble::new(particles)
    }

    /// Fresh ensemble about `center` with spread `diag(C, I)`.
    pub fn redraw_about(
        &self,
        center: &DVector<f64>,
        count: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Ensemble> {
        let (u_c, s_c) = self.split(center)?;
        let particles = (0..count)
            .map(|_| {
                let u = &u_c + self.prior_u.sample_fluctuation(rng);
                let s = &s_c + standard_normal_vector(rng, self.n_s());
                self.join(&u, &s)
            })
            .collect();
        Ensemble::new(particles)
    }
}

impl ForwardMap for AugmentedSystem<'_> {
    fn input_dim(&self) -> usize {
        self.n_v()
    }

    fn output_dim(&self) -> usize {
        let (n_w, n_y, b_u, b_s) = self.block_dims();
        n_w + n_y + b_u + b_s
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let (u, s) = self.split(v)?;
        let p = self.surrogate.state(&s)?;
        let residual = self.model.residual(&u, &p)?;
        let observed = self.obs.apply(&p)?;
        let (n_w, n_y, b_u, b_s) = self.block_dims();
        let mut out = DVector::zeros(n_w + n_y + b_u + b_s);
        out.rows_mut(0, n_w).copy_from(&residual);
        out.rows_mut(n_w, n_y).copy_from(&observed);
        if b_u > 0 {
            out.rows_mut(n_w + n_y, b_u).copy_from(&u);
        }
        if b_s > 0 {
            out.rows_mut(n_w + n_y + b_u, b_s).copy_from(&s);
        }
        Ok(out)
    }
}

/// Right-hand side `f(λ)` of a continuous penalty schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleRhs {
    /// `f(λ) = c`.
    Const(f64),
    /// `f(λ) = 1/λ`.
    InvLambda,
    /// `f(λ) = 1/λ²`.
    InvLambdaSq,
}

impl ScheduleRhs {
    pub fn eval(&self, lambda: f64) -> f64 {
        match self {
            ScheduleRhs::Const(c) => *c,
            ScheduleRhs::InvLambda => 1.0 / lambda,
            ScheduleRhs::InvLambdaSq => 1.0 / (lambda * lambda),
        }
    }

    /// Closed-form solution `λ(t)` with `λ(0) = λ₀` (reference for tests).
    pub fn closed_form(&self, lambda0: f64, t: f64) -> f64 {
        match self {
            ScheduleRhs::Const(c) => lambda0 + c * t,
            ScheduleRhs::InvLambda => (lambda0 * lambda0 + 2.0 * t).sqrt(),
            ScheduleRhs::InvLambdaSq => (lambda0 * lambda0 * lambda0 + 3.0 * t).cbrt(),
        }
    }

    fn validate(&self, lambda0: f64) -> Result<()> {
        match self {
            ScheduleRhs::Const(c) => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::invalid("schedule rate must be positive"));
                }
                if lambda0 < 0.0 {
                    return Err(Error::invalid("initial penalty must be >= 0"));
                }
            }
            ScheduleRhs::InvLambda | ScheduleRhs::InvLambdaSq => {
                if lambda0 <= 0.0 {
                    return Err(Error::invalid(
                        "reciprocal schedules need a positive initial penalty",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A penalty continuation: either a strictly increasing finite sequence or
/// an initial value with a positive growth law.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltySchedule {
    Discrete(Vec<f64>),
    Ode { lambda0: f64, rhs: ScheduleRhs },
}

impl PenaltySchedule {
    /// `λ_k = k³` for `k = 1..=k_max`.
    pub fn cubic(k_max: usize) -> Self {
        PenaltySchedule::Discrete((1..=k_max).map(|k| (k * k * k) as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PenaltySchedule::Discrete(seq) => {
                if seq.is_empty() {
                    return Err(Error::invalid("empty penalty schedule"));
                }
                if seq[0] <= 0.0 {
                    return Err(Error::invalid("penalties must be positive"));
                }
                if seq.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid("penalties must be strictly increasing"));
                }
            }
            PenaltySchedule::Ode { lambda0, rhs } => rhs.validate(*lambda0)?,
        }
        Ok(())
    }
}

/// Options for [`algorithm1`].
pub struct Algorithm1Config {
    pub ensemble_size: usize,
    pub seed: u64,
    /// Standard deviation of the initial state-variable draw `N(0, σ²I)`.
    pub state_init_std: f64,
    /// Inner Kalman inversion options (horizon, tolerances, stagnation).
    pub inner: IntegrateOptions,
}

/// Estimate after one continuation stage.
#[derive(Debug, Clone)]
pub struct StageEstimate {
    pub lambda: f64,
    pub u: DVector<f64>,
    pub s: DVector<f64>,
    pub loss: LossBreakdown,
}

/// Penalty continuation with one full ensemble Kalman inversion per penalty
/// value. Each stage draws a fresh ensemble `N(v_{k-1}, diag(C, I))` about
/// the previous estimate (the first stage uses the prior-spread initial
/// ensemble) and integrates the deterministic dynamics to stagnation.
pub fn algorithm1(
    sys: &AugmentedSystem,
    schedule: &[f64],
    cfg: &Algorithm1Config,
) -> Result<Vec<StageEstimate>> {
    PenaltySchedule::Discrete(schedule.to_vec()).validate()?;
    let mut rng = crate::rng::stream(cfg.seed, 0);
    let mut ens = sys.initial_ensemble(cfg.ensemble_size, cfg.state_init_std, &mut rng)?;
    let mut stages = Vec::with_capacity(schedule.len());
    for (k, &lambda) in schedule.iter().enumerate() {
        let problem = InverseProblem {
            forward: sys,
            data: sys.yhat(),
            gamma: sys.gamma_blocks(lambda)?,
        };
        let report = problem.integrate(&ens, &cfg.inner)?;
        let mean = report.final_mean();
        let (u, s) = sys.split(&mean)?;
        stages.push(StageEstimate {
            lambda,
            loss: sys.loss(lambda, &u, &s)?,
            u,
            s,
        });
        if k + 1 < schedule.len() {
            let mut stage_rng = crate::rng::stream(cfg.seed, (k + 1) as u64);
            ens = sys.redraw_about(&mean, cfg.ensemble_size, &mut stage_rng)?;
        }
    }
    Ok(stages)
}

/// Options for [`algorithm2`].
pub struct Algorithm2Config {
    pub ensemble_size: usize,
    pub seed: u64,
    pub state_init_std: f64,
    pub t_end: f64,
    pub opts: IntegrateOptions,
}

/// Trajectory of the coupled continuation flow.
#[derive(Debug, Clone)]
pub struct OneShotReport {
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `‖O(p(v̄)) - y‖²_Γobs` at the ensemble mean.
    pub obs_misfit: Vec<f64>,
    /// Unweighted `‖M(u, p)‖²` at the ensemble mean.
    pub model_residual_sq: Vec<f64>,
    /// `‖G(v̄) - ŷ‖²_Γ(λ)` at the ensemble mean.
    pub aug_misfit: Vec<f64>,
    pub spread: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub final_ensemble: Ensemble,
    pub final_lambda: f64,
    /// The penalty reached [`LAMBDA_CAP`] during the run.
    pub saturated: bool,
    pub steps: usize,
    pub rhs_evals: usize,
}

impl OneShotReport {
    pub fn final_mean(&self) -> DVector<f64> {
        self.final_ensemble.mean()
    }

    /// Columnar text trace: `time lambda obs_misfit model_residual_sq
    /// aug_misfit spread` per checkpoint.
    pub fn write_trace(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            w,
            "time\tlambda\tobs_misfit\tmodel_residual_sq\taug_misfit\tspread"
        )?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}",
                self.times[i],
                self.lambdas[i],
                self.obs_misfit[i],
                self.model_residual_sq[i],
                self.aug_misfit[i],
                self.spread[i]
            )?;
        }
        Ok(())
    }
}

/// Simultaneous continuation: one adaptive integration of the particle flow
/// coupled with `dλ/dt = f(λ)`.
pub fn algorithm2(
    sys: &AugmentedSystem,
    lambda0: f64,
    rhs: ScheduleRhs,
    cfg: &Algorithm2Config,
) -> Result<OneShotReport> {
    rhs.validate(lambda0)?;
    let mut rng = crate::rng::stream(cfg.seed, 0);
    let ens0 = sys.initial_ensemble(cfg.ensemble_size, cfg.state_init_std, &mut rng)?;
    algorithm2_from(sys, lambda0, rhs, &ens0, cfg.t_end, &cfg.opts)
}

/// [`algorithm2`] with an explicit initial ensemble.
pub fn algorithm2_from(
    sys: &AugmentedSystem,
    lambda0: f64,
    rhs: ScheduleRhs,
    ens0: &Ensemble,
    t_end: f64,
    opts: &IntegrateOptions,
) -> Result<OneShotReport> {
    rhs.validate(lambda0)?;
    check_dim("joint ensemble", sys.n_v(), ens0.dim())?;
    let j = ens0.size();
    let n_v = sys.n_v();
    let yhat = sys.yhat();

    let mut report = OneShotReport {
        times: Vec::new(),
        lambdas: Vec::new(),
        obs_misfit: Vec::new(),
        model_residual_sq: Vec::new(),
        aug_misfit: Vec::new(),
        spread: Vec::new(),
        means: Vec::new(),
        final_ensemble: ens0.clone(),
        final_lambda: lambda0,
        saturated: false,
        steps: 0,
        rhs_evals: 0,
    };
    let record = |report: &mut OneShotReport, t: f64, lambda: f64, ens: &Ensemble| -> Result<()> {
        let mean = ens.mean();
        let (u, s) = sys.split(&mean)?;
        let loss = sys.loss(lambda.max(0.0), &u, &s)?;
        let g = sys.apply(&mean)?;
        let aug = if lambda > 0.0 {
            let r = g - &yhat;
            r.dot(&sys.gamma_inv_apply(lambda, &r)?).max(0.0)
        } else {
            loss.obs_misfit_sq
        };
        report.times.push(t);
        report.lambdas.push(lambda);
        report.obs_misfit.push(loss.obs_misfit_sq);
        report.model_residual_sq.push(loss.model_residual_sq);
        report.aug_misfit.push(aug);
        report.spread.push(ens.spread_sq());
        report.means.push(mean);
        Ok(())
    };
    record(&mut report, 0.0, lambda0, ens0)?;
    if t_end <= 0.0 {
        return Ok(report);
    }

    let checkpoints = match &opts.checkpoint_times {
        Some(times) => times.clone(),
        None => {
            let first = opts.t_first.unwrap_or((t_end * 1e-12).clamp(1e-8, 1e-2));
            log_grid(first.min(t_end), t_end, opts.n_checkpoints)
        }
    };

    let variant = opts.variant;
    let mut rhs_fn = |_t: f64, flat: &DVector<f64>| -> Result<DVector<f64>> {
        let lambda = flat[j * n_v].min(LAMBDA_CAP);
        let particles = unflatten(flat, j, n_v);
        let images = apply_all(sys, &particles)?;
        let drift = ensemble_drift(
            &particles,
            &images,
            &yhat,
            &|r| sys.gamma_inv_apply(lambda.max(0.0), r),
            variant,
        )?;
        let mut out = DVector::zeros(j * n_v + 1);
        out.rows_mut(0, j * n_v).copy_from(&flatten(&drift));
        out[j * n_v] = if flat[j * n_v] >= LAMBDA_CAP {
            0.0
        } else {
            rhs.eval(flat[j * n_v].max(lambda0))
        };
        Ok(out)
    };

    let mut sample_error = None;
    let mut on_sample = |t: f64, flat: &DVector<f64>| -> SampleFlow {
        let lambda = flat[j * n_v];
        match Ensemble::new(unflatten(flat, j, n_v)) {
            Ok(ens) => {
                if let Err(e) = record(&mut report, t, lambda, &ens) {
                    sample_error = Some(e);
                    return SampleFlow::Stop;
                }
            }
            Err(e) => {
                sample_error = Some(e);
                return SampleFlow::Stop;
            }
        }
        SampleFlow::Continue
    };

    let mut y0 = DVector::zeros(j * n_v + 1);
    y0.rows_mut(0, j * n_v).copy_from(&flatten(ens0.particles()));
    y0[j * n_v] = lambda0;
    let sol = ode::integrate(
        &mut rhs_fn,
        0.0,
        &y0,
        t_end,
        &checkpoints,
        &opts.ode,
        &mut on_sample,
    )?;
    if let Some(e) = sample_error {
        return Err(e);
    }

    report.final_lambda = sol.y[j * n_v];
    report.saturated = report.final_lambda >= LAMBDA_CAP;
    report.final_ensemble = Ensemble::new(unflatten(&sol.y, j, n_v))?;
    report.steps = sol.steps;
    report.rhs_evals = sol.rhs_evals;
    if report.times.last().copied() != Some(sol.t) {
        let ens = report.final_ensemble.clone();
        record(&mut report, sol.t, report.final_lambda, &ens)?;
    }
    Ok(report)
}

/// Exact minimizer of the penalized quadratic loss by normal equations.
/// Requires a linear model (`M(u, p) = A p - B u`) and a linear surrogate;
/// this is the oracle against which the iterative solvers are checked.
pub fn penalty_reference_solve(
    sys: &AugmentedSystem,
    lambda: f64,
) -> Result<(DVector<f64>, DVector<f64>, LossBreakdown)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("penalty must be positive"));
    }
    let Some((a_p, b_u)) = self_linear_parts(sys.model) else {
        return Err(Error::Unsupported(
            "penalty reference solve needs a linear model".into(),
        ));
    };
    let Some(p_mat) = sys.surrogate.linear_matrix(sys.model.n_p()) else {
        return Err(Error::Unsupported(
            "penalty reference solve needs a linear surrogate".into(),
        ));
    };
    let n_u = sys.n_u();
    let n_s = sys.n_s();
    let obs = sys.obs.dense() * &p_mat; // n_y × n_s
    let model_s = a_p * &p_mat; // n_w × n_s

    // Weighted blocks: Γobs⁻¹·obs, Γ̂⁻¹·model rows.
    let w_obs = inv_apply_matrix(&sys.gamma_obs, &obs)?;
    let w_model_s = inv_apply_matrix(&sys.gamma_model_hat, &model_s)?;
    let w_model_u = inv_apply_matrix(&sys.gamma_model_hat, b_u)?;

    let mut h = DMatrix::zeros(n_u + n_s, n_u + n_s);
    let mut rhs = DVector::zeros(n_u + n_s);

    // Model term λ‖A P s - B u‖²_Γ̂ expands into all four blocks.
    h.view_mut((0, 0), (n_u, n_u))
        .copy_from(&(b_u.transpose() * &w_model_u * lambda));
    let cross = b_u.transpose() * &w_model_s * (-lambda);
    h.view_mut((0, n_u), (n_u, n_s)).copy_from(&cross);
    h.view_mut((n_u, 0), (n_s, n_u)).copy_from(&cross.transpose());
    let mut h_ss = model_s.transpose() * &w_model_s * lambda;
    h_ss += obs.transpose() * &w_obs;
    if sys.alpha2 > 0.0 {
        h_ss += DMatrix::identity(n_s, n_s) * sys.alpha2;
    }
    h.view_mut((n_u, n_u), (n_s, n_s)).copy_from(&h_ss);
    if sys.alpha1 > 0.0 {
        let prec = sys.prior_u.precision()? * sys.alpha1;
        let mut block = h.view_mut((0, 0), (n_u, n_u));
        block += &prec;
        rhs.rows_mut(0, n_u)
            .copy_from(&(&prec * sys.prior_u.mean()));
    }
    let data_term = w_obs.transpose() * &sys.data;
    {
        let mut block = rhs.rows_mut(n_u, n_s);
        block += data_term;
    }

    let h = (&h + h.transpose()) * 0.5;
    let chol = h.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let solution = chol.solve(&rhs);
    let u = solution.rows(0, n_u).into_owned();
    let s = solution.rows(n_u, n_s).into_owned();
    let loss = sys.loss(lambda, &u, &s)?;
    Ok((u, s, loss))
}

fn self_linear_parts(model: &dyn ResidualModel) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
    model.linear_parts()
}

fn inv_apply_matrix(block: &CovBlock, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match block {
        CovBlock::ScaledEye { scale, .. } => {
            if *scale <= 0.0 {
                return Err(Error::invalid("cannot invert a zero covariance block"));
            }
            Ok(m / *scale)
        }
        CovBlock::ScaledSpd { chol, scale, .. } => Ok(chol.solve(m) / *scale),
    }
}

fn log_grid(first: f64, last: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    let la = first.ln();
    let lb = last.ln();
    let mut out: Vec<f64> = (0..count)
        .map(|i| (la + (lb - la) * i as f64 / (count - 1) as f64).exp())
        .collect();
    *out.last_mut().unwrap() = last;
    out
}
