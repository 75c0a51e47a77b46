//! The backfitting MCMC.
//!
//! One iteration: latent update (probit), prognostic-forest sweep, ξ, Δμ,
//! treatment-forest sweep, b₁, b₀, Δτ, then σ² in continuous mode. The fit
//! is parameterized as
//!
//!   f(t, x, z) = α_t + ξ·μ(t, x, π̂) + [b₁z + b₀(1−z)]·τ(t, x)
//!
//! with the offsets α_t estimated from the data at initialization and held
//! fixed. The treatment effect on the latent scale is (b₁−b₀)·τ.

use crate::config::{ModelConfig, ResponseMode, TauScaleMode};
use crate::data::{Column, CovMatrix, Dataset, TargetGrid};
use crate::error::{Error, Result};
use crate::kernel::{kappa_to_lengthscale, KernelSpec};
use crate::mathutil::phi_inv;
use crate::rngs::{sample_inverse_gamma, sample_truncated_normal, RngStream, TruncationSide};
use crate::tree::{evaluate_trees, Forest, SplitPrior, WorkingData};

use std::sync::Arc;

/// Division guard for the redundant multiplicative coefficients. The
/// conjugate updates never divide by per-unit fits; only the working-response
/// transforms divide by ξ or b, and a coefficient this small carries no
/// information anyway (its precision is quadratically small).
const COEF_EPS: f64 = 1e-12;

fn clamp_coef(x: f64) -> f64 {
    if x.abs() >= COEF_EPS {
        x
    } else if x >= 0.0 {
        COEF_EPS
    } else {
        -COEF_EPS
    }
}

#[derive(Debug, Clone)]
pub enum ResponseData {
    Binary(Vec<u8>),
    Continuous(Vec<f64>),
}

impl ResponseData {
    pub fn len(&self) -> usize {
        match self {
            ResponseData::Binary(v) => v.len(),
            ResponseData::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the per-grid offsets are set at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Φ⁻¹ of the clamped empirical success rate per grid point (probit) or
    /// the empirical mean (continuous).
    Empirical,
    /// All offsets zero (used by prior-predictive checks).
    Zero,
}

/// A fully wired sampling problem: response, designs, and model shape.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub response: ResponseData,
    pub z: Vec<u8>,
    pub t_idx: Vec<usize>,
    pub grid: TargetGrid,
    pub mu_design: CovMatrix,
    /// `None` runs a single-forest model without treatment terms.
    pub tau_design: Option<CovMatrix>,
    /// Single-forest causal mode: the treatment column's index in
    /// `mu_design`; counterfactual fits evaluate the forest at z=0 and z=1.
    pub z_col_in_mu: Option<usize>,
    pub update_xi: bool,
    pub alpha_mode: AlphaMode,
    /// Forces both kernels to the constant-leaf limit.
    pub constant_leaves: bool,
}

impl FitProblem {
    /// Standard two-forest wiring: μ sees (x, π̂), τ sees x.
    pub fn causal(d: &Dataset) -> Result<Self> {
        let pi = d.pi_hat.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "causal fit requires propensity estimates on the dataset".into(),
            )
        })?;
        let pi_col = Arc::new(Column::Continuous {
            name: "__propensity".into(),
            values: pi.clone(),
        });
        Ok(Self {
            response: ResponseData::Binary(d.y.clone()),
            z: d.z.clone(),
            t_idx: d.t_idx.clone(),
            grid: d.grid.clone(),
            mu_design: d.x.with_extra(pi_col),
            tau_design: Some(d.x.clone()),
            z_col_in_mu: None,
            update_xi: true,
            alpha_mode: AlphaMode::Empirical,
            constant_leaves: false,
        })
    }

    /// Single-forest probit model of an arbitrary binary response.
    pub fn single_forest(
        y: Vec<u8>,
        t_idx: Vec<usize>,
        grid: TargetGrid,
        design: CovMatrix,
        update_xi: bool,
    ) -> Self {
        let n = y.len();
        Self {
            response: ResponseData::Binary(y),
            z: vec![0; n],
            t_idx,
            grid,
            mu_design: design,
            tau_design: None,
            z_col_in_mu: None,
            update_xi,
            alpha_mode: AlphaMode::Empirical,
            constant_leaves: false,
        }
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let n = self.n();
        if n == 0 {
            return Err(Error::EmptyDataset("no observations".into()));
        }
        if self.z.len() != n || self.t_idx.len() != n {
            return Err(Error::DimensionMismatch("response/treatment/target".into()));
        }
        for col in self
            .mu_design
            .cols
            .iter()
            .chain(self.tau_design.iter().flat_map(|d| d.cols.iter()))
        {
            if col.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "design column `{}`",
                    col.name()
                )));
            }
        }
        match (&self.response, config.response_mode) {
            (ResponseData::Binary(_), ResponseMode::Probit) => {}
            (ResponseData::Continuous(_), ResponseMode::Continuous) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "response data does not match configured response mode".into(),
                ))
            }
        }
        if let Some(c) = self.z_col_in_mu {
            if c >= self.mu_design.n_cols() {
                return Err(Error::InvalidConfig("z column index out of range".into()));
            }
            if self.tau_design.is_some() {
                return Err(Error::InvalidConfig(
                    "z-column counterfactuals require a single-forest model".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Mutable sampler state for one chain.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub latent: Vec<f64>,
    pub alpha: Vec<f64>,
    pub xi: f64,
    pub b0: f64,
    pub b1: f64,
    pub delta_mu: f64,
    pub delta_tau: f64,
    pub sigma2: f64,
    pub mu_forest: Forest,
    pub tau_forest: Option<Forest>,
    /// σ² prior scale λ, calibrated at init in continuous mode.
    pub sigma_lambda: f64,
}

impl SamplerState {
    /// b₁z + b₀(1−z) per unit; 0 without a treatment forest.
    fn coef(&self, z: u8) -> f64 {
        if self.tau_forest.is_some() {
            if z == 1 {
                self.b1
            } else {
                self.b0
            }
        } else {
            0.0
        }
    }

    fn tau_fit_or_zero(&self, n: usize) -> Vec<f64> {
        match &self.tau_forest {
            Some(f) => f.fit().to_vec(),
            None => vec![0.0; n],
        }
    }

    /// Current latent-scale fit per unit.
    pub fn f_values(&self, problem: &FitProblem) -> Vec<f64> {
        let n = problem.n();
        let mu = self.mu_forest.fit();
        let tau = self.tau_fit_or_zero(n);
        (0..n)
            .map(|i| {
                self.alpha[problem.t_idx[i]]
                    + self.xi * mu[i]
                    + self.coef(problem.z[i]) * tau[i]
            })
            .collect()
    }
}

/// Which shrinkage parameter a Gibbs step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForestSide {
    Mu,
    Tau,
}

/// Which scaling coefficient a Gibbs step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Treated,
    Control,
}

fn empirical_alpha_probit(
    y: &[u8],
    t_idx: &[usize],
    t_len: usize,
) -> Vec<f64> {
    let mut succ = vec![0usize; t_len];
    let mut count = vec![0usize; t_len];
    for i in 0..y.len() {
        count[t_idx[i]] += 1;
        succ[t_idx[i]] += y[i] as usize;
    }
    let n = y.len();
    let global_succ: usize = succ.iter().sum();
    (0..t_len)
        .map(|t| {
            let (s, c) = if count[t] > 0 {
                (succ[t], count[t])
            } else {
                (global_succ, n)
            };
            let c_f = c as f64;
            let rate = (s as f64 / c_f).clamp(1.0 / (c_f + 2.0), (c_f + 1.0) / (c_f + 2.0));
            phi_inv(rate)
        })
        .collect()
}

fn empirical_alpha_continuous(y: &[f64], t_idx: &[usize], t_len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; t_len];
    let mut count = vec![0usize; t_len];
    for i in 0..y.len() {
        count[t_idx[i]] += 1;
        sum[t_idx[i]] += y[i];
    }
    let global = y.iter().sum::<f64>() / y.len() as f64;
    (0..t_len)
        .map(|t| {
            if count[t] > 0 {
                sum[t] / count[t] as f64
            } else {
                global
            }
        })
        .collect()
}

/// OLS residual SD of y on the numeric design plus the target value, for the
/// σ² prior calibration in continuous mode.
fn ols_residual_sd(y: &[f64], design: &CovMatrix, t_values: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let n = y.len();
    let p = design.n_cols() + 2;
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for (c, col) in design.cols.iter().enumerate() {
            x[(i, c + 1)] = col.numeric(i);
        }
        x[(i, p - 1)] = t_values[i];
    }
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let beta = xtx
        .cholesky()
        .map(|ch| ch.solve(&xty))
        .unwrap_or_else(|| DVector::zeros(p));
    let resid = &yv - &x * beta;
    let dof = (n.saturating_sub(p)).max(1) as f64;
    (resid.norm_squared() / dof).sqrt().max(1e-6)
}

/// λ such that P(σ ≤ σ̂) = q under σ² ~ IG(ν/2, νλ/2).
fn calibrate_sigma_lambda(sigma_hat: f64, nu: f64, q: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Gamma};
    let g = Gamma::new(nu / 2.0, 1.0).expect("valid gamma");
    let u = g.inverse_cdf(1.0 - q);
    2.0 * u * sigma_hat * sigma_hat / nu
}

fn kernel_spec(
    grid: &TargetGrid,
    s: f64,
    n_trees: usize,
    kappa: f64,
    constant: bool,
) -> Result<KernelSpec> {
    let lengthscale = if constant {
        f64::INFINITY
    } else {
        kappa_to_lengthscale(kappa, grid)?
    };
    Ok(KernelSpec {
        grid: grid.clone(),
        s2: s * s,
        n_trees,
        delta: 1.0,
        lengthscale,
        kappa,
    })
}

/// Builds the initial sampler state: offsets from the data, identity
/// multiplicative parameters at their prior means, root-only forests with
/// zero curves, and one latent draw.
pub fn init_state(
    problem: &FitProblem,
    config: &ModelConfig,
    rng: &mut RngStream,
) -> Result<SamplerState> {
    problem.validate(config)?;
    let t_len = problem.grid.len();

    let alpha = match (&problem.response, problem.alpha_mode) {
        (_, AlphaMode::Zero) => vec![0.0; t_len],
        (ResponseData::Binary(y), AlphaMode::Empirical) => {
            empirical_alpha_probit(y, &problem.t_idx, t_len)
        }
        (ResponseData::Continuous(y), AlphaMode::Empirical) => {
            empirical_alpha_continuous(y, &problem.t_idx, t_len)
        }
    };

    let mu_spec = kernel_spec(
        &problem.grid,
        config.s_mu,
        config.n_mu,
        config.kappa_mu,
        problem.constant_leaves,
    )?;
    let mu_forest = Forest::new(
        mu_spec,
        SplitPrior {
            eta: config.eta_mu,
            beta: config.beta_mu,
        },
        problem.mu_design.clone(),
        problem.t_idx.clone(),
    )?;

    let tau_forest = match &problem.tau_design {
        Some(design) => {
            let spec = kernel_spec(
                &problem.grid,
                config.s_tau,
                config.n_tau,
                config.kappa_tau,
                problem.constant_leaves,
            )?;
            Some(Forest::new(
                spec,
                SplitPrior {
                    eta: config.eta_tau,
                    beta: config.beta_tau,
                },
                design.clone(),
                problem.t_idx.clone(),
            )?)
        }
        None => None,
    };

    let (sigma2, sigma_lambda, latent) = match &problem.response {
        ResponseData::Binary(_) => (1.0, 1.0, vec![0.0; problem.n()]),
        ResponseData::Continuous(y) => {
            let t_values: Vec<f64> =
                problem.t_idx.iter().map(|&t| problem.grid.values()[t]).collect();
            let sd = ols_residual_sd(y, &problem.mu_design, &t_values);
            let lambda = calibrate_sigma_lambda(sd, config.sigma_prior_nu, config.sigma_prior_q);
            (sd * sd, lambda, y.clone())
        }
    };

    let mut state = SamplerState {
        latent,
        alpha,
        xi: 1.0,
        b0: -0.5,
        b1: 0.5,
        delta_mu: 1.0,
        delta_tau: 1.0,
        sigma2,
        mu_forest,
        tau_forest,
        sigma_lambda,
    };
    if matches!(problem.response, ResponseData::Binary(_)) {
        update_latents(&mut state, problem, rng)?;
    }
    Ok(state)
}

/// Latent probit update: ỹᵢ ~ N(fᵢ, σ²) truncated to the side of zero that
/// matches the observed outcome.
pub fn update_latents(
    state: &mut SamplerState,
    problem: &FitProblem,
    rng: &mut RngStream,
) -> Result<()> {
    let y = match &problem.response {
        ResponseData::Binary(y) => y,
        ResponseData::Continuous(_) => return Ok(()),
    };
    let f = state.f_values(problem);
    let sd = state.sigma2.sqrt();
    for i in 0..y.len() {
        let side = if y[i] == 1 {
            TruncationSide::AboveZero
        } else {
            TruncationSide::BelowZero
        };
        state.latent[i] = sample_truncated_normal(f[i], sd, side, rng)?;
    }
    Ok(())
}

/// One backfitting pass over the prognostic forest on the transformed
/// working data (ỹ − α − [b₁z+b₀(1−z)]τ)/ξ at variance σ²/ξ².
pub fn sweep_mu_forest(
    state: &mut SamplerState,
    problem: &FitProblem,
    rng: &mut RngStream,
) -> Result<(u64, u64)> {
    let n = problem.n();
    let xi = clamp_coef(state.xi);
    let tau = state.tau_fit_or_zero(n);
    let w: Vec<f64> = (0..n)
        .map(|i| {
            (state.latent[i] - state.alpha[problem.t_idx[i]]
                - state.coef(problem.z[i]) * tau[i])
                / xi
        })
        .collect();
    let work = WorkingData::homoskedastic(w, state.sigma2 / (xi * xi));
    let before = (state.mu_forest.proposals, state.mu_forest.accepts);
    for j in 0..state.mu_forest.trees.len() {
        state.mu_forest.update_tree(j, &work, rng)?;
    }
    Ok((
        state.mu_forest.proposals - before.0,
        state.mu_forest.accepts - before.1,
    ))
}

/// One backfitting pass over the treatment forest on working data
/// (ỹ − α − ξμ)/[b₁z+b₀(1−z)] with per-unit precisions [b₁z+b₀(1−z)]²/σ².
pub fn sweep_tau_forest(
    state: &mut SamplerState,
    problem: &FitProblem,
    rng: &mut RngStream,
) -> Result<(u64, u64)> {
    let n = problem.n();
    let mu = state.mu_forest.fit().to_vec();
    let mut w = vec![0.0; n];
    let mut omega = vec![0.0; n];
    for i in 0..n {
        let d = state.coef(problem.z[i]);
        if d.abs() < COEF_EPS {
            // No information flows through a zero coefficient.
            continue;
        }
        w[i] = (state.latent[i] - state.alpha[problem.t_idx[i]] - state.xi * mu[i]) / d;
        omega[i] = d * d / state.sigma2;
    }
    let work = WorkingData::heteroskedastic(w, omega);
    let forest = state
        .tau_forest
        .as_mut()
        .ok_or_else(|| Error::InvalidArgument("no treatment forest".into()))?;
    let before = (forest.proposals, forest.accepts);
    for j in 0..forest.trees.len() {
        forest.update_tree(j, &work, rng)?;
    }
    Ok((forest.proposals - before.0, forest.accepts - before.1))
}

/// Conjugate update of ξ under its N(0,1) prior. Sufficient-statistic form:
/// units with μᵢ = 0 contribute nothing, and with no information the draw
/// falls back to the prior automatically.
pub fn gibbs_xi(state: &mut SamplerState, problem: &FitProblem, rng: &mut RngStream) {
    let n = problem.n();
    let mu = state.mu_forest.fit();
    let tau = state.tau_fit_or_zero(n);
    let mut s2 = 0.0;
    let mut sr = 0.0;
    for i in 0..n {
        let resid =
            state.latent[i] - state.alpha[problem.t_idx[i]] - state.coef(problem.z[i]) * tau[i];
        s2 += mu[i] * mu[i];
        sr += mu[i] * resid;
    }
    let v = 1.0 / (1.0 + s2 / state.sigma2);
    let m = v * sr / state.sigma2;
    state.xi = m + v.sqrt() * rng.standard_normal();
}

/// Conjugate update of b₁ (prior N(0.5, 0.5), treated units) or b₀
/// (prior N(−0.5, 0.5), control units). An empty arm draws from the prior.
pub fn gibbs_b(state: &mut SamplerState, problem: &FitProblem, arm: Arm, rng: &mut RngStream) {
    let n = problem.n();
    let (arm_z, prior_mean) = match arm {
        Arm::Treated => (1u8, 0.5),
        Arm::Control => (0u8, -0.5),
    };
    let prior_var = 0.5;
    let mu = state.mu_forest.fit();
    let tau = match &state.tau_forest {
        Some(f) => f.fit(),
        None => return,
    };
    let mut st2 = 0.0;
    let mut sr = 0.0;
    for i in 0..n {
        if problem.z[i] != arm_z {
            continue;
        }
        let resid = state.latent[i] - state.alpha[problem.t_idx[i]] - state.xi * mu[i];
        st2 += tau[i] * tau[i];
        sr += tau[i] * resid;
    }
    let v = 1.0 / (1.0 / prior_var + st2 / state.sigma2);
    let m = v * (prior_mean / prior_var + sr / state.sigma2);
    let draw = m + v.sqrt() * rng.standard_normal();
    match arm {
        Arm::Treated => state.b1 = draw,
        Arm::Control => state.b0 = draw,
    }
}

/// Shrinkage update: 1/Δ ~ IG((ν + n_leaves·dim)/2, (ν + SSQ)/2) with SSQ
/// accumulated in the Δ=1 kernel precision. The τ side is skipped entirely
/// in half-Normal mode (Δτ ≡ 1).
pub fn gibbs_delta(
    state: &mut SamplerState,
    config: &ModelConfig,
    side: ForestSide,
    rng: &mut RngStream,
) -> Result<()> {
    let (forest, nu) = match side {
        ForestSide::Mu => (Some(&mut state.mu_forest), config.nu_mu),
        ForestSide::Tau => {
            if config.tau_scale_mode == TauScaleMode::HalfNormal {
                return Ok(());
            }
            (state.tau_forest.as_mut(), 1.0)
        }
    };
    let Some(forest) = forest else {
        return Ok(());
    };
    let n_bots = forest.n_leaves_total();
    let dim = forest.base_kernel.dim();
    let ssq = forest.ssq_base();
    let shape = (nu + (n_bots * dim) as f64) / 2.0;
    let scale = (nu + ssq) / 2.0;
    let inv_delta = sample_inverse_gamma(shape, scale, rng)?;
    let delta = 1.0 / inv_delta;
    forest.set_delta(delta)?;
    match side {
        ForestSide::Mu => state.delta_mu = delta,
        ForestSide::Tau => state.delta_tau = delta,
    }
    Ok(())
}

/// σ² update in continuous mode; calling this in probit mode is a contract
/// violation.
pub fn gibbs_sigma2(
    state: &mut SamplerState,
    problem: &FitProblem,
    config: &ModelConfig,
    rng: &mut RngStream,
) -> Result<()> {
    let y = match &problem.response {
        ResponseData::Continuous(y) => y,
        ResponseData::Binary(_) => {
            return Err(Error::InvalidConfig(
                "sigma2 update is only defined in continuous mode".into(),
            ))
        }
    };
    let f = state.f_values(problem);
    let rss: f64 = y.iter().zip(&f).map(|(y, f)| (y - f) * (y - f)).sum();
    let nu = config.sigma_prior_nu;
    let shape = (nu + y.len() as f64) / 2.0;
    let scale = (rss + nu * state.sigma_lambda) / 2.0;
    state.sigma2 = sample_inverse_gamma(shape, scale, rng)?;
    Ok(())
}

/// Per-draw-by-unit matrix, row-major over draws.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    pub n_draws: usize,
    pub n_units: usize,
    data: Vec<f64>,
}

impl DrawMatrix {
    pub fn zeros(n_draws: usize, n_units: usize) -> Self {
        Self {
            n_draws,
            n_units,
            data: vec![0.0; n_draws * n_units],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_draws = rows.len();
        let n_units = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_draws * n_units);
        for r in rows {
            assert_eq!(r.len(), n_units);
            data.extend_from_slice(&r);
        }
        Self {
            n_draws,
            n_units,
            data,
        }
    }

    pub fn get(&self, draw: usize, unit: usize) -> f64 {
        self.data[draw * self.n_units + unit]
    }

    pub fn row(&self, draw: usize) -> &[f64] {
        &self.data[draw * self.n_units..(draw + 1) * self.n_units]
    }

    pub fn set_row(&mut self, draw: usize, values: &[f64]) {
        self.data[draw * self.n_units..(draw + 1) * self.n_units].copy_from_slice(values);
    }

    /// Per-unit column as a vector.
    pub fn column(&self, unit: usize) -> Vec<f64> {
        (0..self.n_draws).map(|b| self.get(b, unit)).collect()
    }

    /// Stacks another matrix's draws below this one's.
    pub fn append(&mut self, other: &DrawMatrix) {
        assert_eq!(self.n_units, other.n_units);
        self.data.extend_from_slice(&other.data);
        self.n_draws += other.n_draws;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScalarTraces {
    pub xi: Vec<f64>,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub delta_mu: Vec<f64>,
    pub delta_tau: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl ScalarTraces {
    fn append(&mut self, other: &ScalarTraces) {
        self.xi.extend_from_slice(&other.xi);
        self.b0.extend_from_slice(&other.b0);
        self.b1.extend_from_slice(&other.b1);
        self.delta_mu.extend_from_slice(&other.delta_mu);
        self.delta_tau.extend_from_slice(&other.delta_tau);
        self.sigma2.extend_from_slice(&other.sigma2);
    }
}

/// Retained posterior draws plus run metadata.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    /// Raw prognostic-forest fit per unit.
    pub mu: DrawMatrix,
    /// Raw treatment-forest fit per unit.
    pub tau: DrawMatrix,
    /// Latent fit with z forced to 0.
    pub f0: DrawMatrix,
    /// Latent fit with z forced to 1.
    pub f1: DrawMatrix,
    pub traces: ScalarTraces,
    pub alpha: Vec<f64>,
    pub grid_values: Vec<f64>,
    pub response_mode: ResponseMode,
    pub seed: u64,
    pub stream_ids: Vec<u64>,
    pub accept_rate_mu: f64,
    pub accept_rate_tau: f64,
    /// Final tree ensembles (last iteration), serialized on request.
    pub final_mu_forest: Option<String>,
    pub final_tau_forest: Option<String>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.f0.n_draws
    }

    pub fn n_units(&self) -> usize {
        self.f0.n_units
    }

    /// Largest violation of f(z) = α + ξμ + (b₁z + b₀(1−z))τ across stored
    /// draws; exercised by tests and the persistence layer.
    pub fn decomposition_error(&self, t_idx: &[usize]) -> f64 {
        let mut worst = 0.0f64;
        for b in 0..self.n_draws() {
            let (xi, b0, b1) = (self.traces.xi[b], self.traces.b0[b], self.traces.b1[b]);
            for i in 0..self.n_units() {
                let base = self.alpha[t_idx[i]] + xi * self.mu.get(b, i);
                let f0 = base + b0 * self.tau.get(b, i);
                let f1 = base + b1 * self.tau.get(b, i);
                worst = worst
                    .max((f0 - self.f0.get(b, i)).abs())
                    .max((f1 - self.f1.get(b, i)).abs());
            }
        }
        worst
    }

    /// Merges another chain's draws after this one (chain order).
    pub fn append_chain(&mut self, other: &PosteriorDraws) {
        self.mu.append(&other.mu);
        self.tau.append(&other.tau);
        self.f0.append(&other.f0);
        self.f1.append(&other.f1);
        self.traces.append(&other.traces);
        self.stream_ids.extend_from_slice(&other.stream_ids);
        // Acceptance rates averaged over chains, weighted equally.
        let k = self.stream_ids.len() as f64;
        self.accept_rate_mu += (other.accept_rate_mu - self.accept_rate_mu) / k;
        self.accept_rate_tau += (other.accept_rate_tau - self.accept_rate_tau) / k;
    }
}

fn check_finite(state: &SamplerState, iteration: usize) -> Result<()> {
    let scalars = [
        ("xi", state.xi),
        ("b0", state.b0),
        ("b1", state.b1),
        ("delta_mu", state.delta_mu),
        ("delta_tau", state.delta_tau),
        ("sigma2", state.sigma2),
    ];
    for (name, v) in scalars {
        if !v.is_finite() {
            return Err(Error::NanAbort {
                iteration,
                what: name.into(),
            });
        }
    }
    if state.latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::NanAbort {
            iteration,
            what: "latent".into(),
        });
    }
    if state.mu_forest.fit().iter().any(|v| !v.is_finite()) {
        return Err(Error::NanAbort {
            iteration,
            what: "mu fit".into(),
        });
    }
    if let Some(f) = &state.tau_forest {
        if f.fit().iter().any(|v| !v.is_finite()) {
            return Err(Error::NanAbort {
                iteration,
                what: "tau fit".into(),
            });
        }
    }
    Ok(())
}

/// Designs with the z column forced to a constant, for single-forest
/// counterfactuals.
fn design_with_z(design: &CovMatrix, z_col: usize, value: f64, n: usize) -> CovMatrix {
    let mut cols = design.cols.clone();
    cols[z_col] = Arc::new(Column::Continuous {
        name: design.cols[z_col].name().to_string(),
        values: vec![value; n],
    });
    CovMatrix::new(cols)
}

/// Runs one chain and returns the retained draws. Deterministic given the
/// stream.
pub fn run_chain(
    problem: &FitProblem,
    config: &ModelConfig,
    mut rng: RngStream,
) -> Result<PosteriorDraws> {
    let mut state = init_state(problem, config, &mut rng)?;
    let n = problem.n();
    let n_iter = config.n_burn + config.n_draws * config.thin;

    let mut mu_rows = Vec::with_capacity(config.n_draws);
    let mut tau_rows = Vec::with_capacity(config.n_draws);
    let mut f0_rows = Vec::with_capacity(config.n_draws);
    let mut f1_rows = Vec::with_capacity(config.n_draws);
    let mut traces = ScalarTraces::default();

    let cf_designs = problem.z_col_in_mu.map(|c| {
        (
            design_with_z(&problem.mu_design, c, 0.0, n),
            design_with_z(&problem.mu_design, c, 1.0, n),
        )
    });

    for it in 0..n_iter {
        update_latents(&mut state, problem, &mut rng)?;
        sweep_mu_forest(&mut state, problem, &mut rng)?;
        if problem.update_xi {
            gibbs_xi(&mut state, problem, &mut rng);
        }
        gibbs_delta(&mut state, config, ForestSide::Mu, &mut rng)?;
        if state.tau_forest.is_some() {
            sweep_tau_forest(&mut state, problem, &mut rng)?;
            gibbs_b(&mut state, problem, Arm::Treated, &mut rng);
            gibbs_b(&mut state, problem, Arm::Control, &mut rng);
            gibbs_delta(&mut state, config, ForestSide::Tau, &mut rng)?;
        }
        if config.response_mode == ResponseMode::Continuous {
            gibbs_sigma2(&mut state, problem, config, &mut rng)?;
        }
        check_finite(&state, it)?;

        let retained = it >= config.n_burn && (it - config.n_burn) % config.thin == 0;
        if !retained {
            continue;
        }

        let mu_fit = state.mu_forest.fit().to_vec();
        match (&state.tau_forest, &cf_designs) {
            (Some(tf), _) => {
                let tau_fit = tf.fit().to_vec();
                let mut f0 = vec![0.0; n];
                let mut f1 = vec![0.0; n];
                for i in 0..n {
                    let base = state.alpha[problem.t_idx[i]] + state.xi * mu_fit[i];
                    f0[i] = base + state.b0 * tau_fit[i];
                    f1[i] = base + state.b1 * tau_fit[i];
                }
                traces.xi.push(state.xi);
                traces.b0.push(state.b0);
                traces.b1.push(state.b1);
                mu_rows.push(mu_fit);
                tau_rows.push(tau_fit);
                f0_rows.push(f0);
                f1_rows.push(f1);
            }
            (None, Some((d0, d1))) => {
                // Single forest with a treatment column: counterfactual fits
                // are forest evaluations at z=0 and z=1, reported in the
                // common decomposition with b1=1, b0=0.
                let mu0 = evaluate_trees(&state.mu_forest.trees, d0, &problem.t_idx);
                let mu1 = evaluate_trees(&state.mu_forest.trees, d1, &problem.t_idx);
                let mut f0 = vec![0.0; n];
                let mut f1 = vec![0.0; n];
                let mut tau = vec![0.0; n];
                for i in 0..n {
                    let a = state.alpha[problem.t_idx[i]];
                    f0[i] = a + state.xi * mu0[i];
                    f1[i] = a + state.xi * mu1[i];
                    tau[i] = state.xi * (mu1[i] - mu0[i]);
                }
                traces.xi.push(state.xi);
                traces.b0.push(0.0);
                traces.b1.push(1.0);
                mu_rows.push(mu0);
                tau_rows.push(tau);
                f0_rows.push(f0);
                f1_rows.push(f1);
            }
            (None, None) => {
                let f = state.f_values(problem);
                traces.xi.push(state.xi);
                traces.b0.push(state.b0);
                traces.b1.push(state.b1);
                mu_rows.push(mu_fit);
                tau_rows.push(vec![0.0; n]);
                f0_rows.push(f.clone());
                f1_rows.push(f);
            }
        }
        traces.delta_mu.push(state.delta_mu);
        traces.delta_tau.push(state.delta_tau);
        traces.sigma2.push(state.sigma2);
    }

    let accept_rate = |f: &Forest| {
        if f.proposals == 0 {
            0.0
        } else {
            f.accepts as f64 / f.proposals as f64
        }
    };

    Ok(PosteriorDraws {
        mu: DrawMatrix::from_rows(mu_rows),
        tau: DrawMatrix::from_rows(tau_rows),
        f0: DrawMatrix::from_rows(f0_rows),
        f1: DrawMatrix::from_rows(f1_rows),
        traces,
        alpha: state.alpha.clone(),
        grid_values: problem.grid.values().to_vec(),
        response_mode: config.response_mode,
        seed: rng.seed(),
        stream_ids: vec![rng.stream_id()],
        accept_rate_mu: accept_rate(&state.mu_forest),
        accept_rate_tau: state.tau_forest.as_ref().map_or(0.0, accept_rate),
        final_mu_forest: Some(crate::tree::ensemble_to_text(
            &state.mu_forest.trees,
            &state.mu_forest.spec,
            &state.mu_forest.split_prior,
        )),
        final_tau_forest: state.tau_forest.as_ref().map(|f| {
            crate::tree::ensemble_to_text(&f.trees, &f.spec, &f.split_prior)
        }),
    })
}

/// Runs `n_chains` chains on streams `first_stream..first_stream+n_chains`
/// and merges draws in chain order. The merge is deterministic and
/// independent of scheduling.
pub fn run_chains(
    problem: &FitProblem,
    config: &ModelConfig,
    seed: u64,
    first_stream: u64,
    n_chains: usize,
) -> Result<PosteriorDraws> {
    if n_chains == 0 {
        return Err(Error::InvalidConfig("need at least one chain".into()));
    }
    let results: Vec<Result<PosteriorDraws>> = crate::exec::map_indexed(n_chains, |c| {
        run_chain(
            problem,
            config,
            RngStream::new(seed, first_stream + c as u64),
        )
    });
    let mut merged: Option<PosteriorDraws> = None;
    for r in results {
        let draws = r?;
        match &mut merged {
            None => merged = Some(draws),
            Some(m) => m.append_chain(&draws),
        }
    }
    Ok(merged.expect("at least one chain"))
}
