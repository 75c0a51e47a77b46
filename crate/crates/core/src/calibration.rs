//! Prior-scale selection and structural-heterogeneity quantification.
//!
//! The prognostic scale comes from an elicited range of plausible baseline
//! risks; the treatment scale is solved on held-out data so the implied
//! prior spread of the latent effect matches the spread observed across the
//! target grid. With a constant latent effect, relative risk still varies
//! when baseline risk varies; the ratio computed here quantifies how much of
//! the posterior relative-risk spread exceeds that structural floor.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mathutil::{mean, phi, phi_inv, sample_variance};
use crate::optim::nelder_mead;
use crate::rngs::RngStream;
use crate::sampler::PosteriorDraws;

/// Default divisor turning an elicited range into a standard deviation.
pub const DEFAULT_SPREAD_DIVISOR: f64 = 3.3;

/// Lower bound for the calibrated treatment scale.
pub const S_TAU_FLOOR: f64 = 0.01;

/// s_μ from an elicited plausible baseline-risk range:
/// (Φ⁻¹(hi) − Φ⁻¹(lo)) / 3.3.
pub fn s_mu_from_elicitation(lo: f64, hi: f64) -> Result<f64> {
    s_mu_from_elicitation_with_divisor(lo, hi, DEFAULT_SPREAD_DIVISOR)
}

pub fn s_mu_from_elicitation_with_divisor(lo: f64, hi: f64, divisor: f64) -> Result<f64> {
    if !(lo > 0.0 && hi < 1.0 && lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "elicited range must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
        )));
    }
    if !(divisor > 0.0) {
        return Err(Error::InvalidArgument("divisor must be positive".into()));
    }
    Ok((phi_inv(hi) - phi_inv(lo)) / divisor)
}

/// Outcome of the treatment-scale calibration.
#[derive(Debug, Clone)]
pub struct STauCalibration {
    pub s_tau: f64,
    /// Empirical SD of the latent effect across grid points.
    pub empirical_sd: f64,
    /// Objective value at the solution.
    pub objective: f64,
    /// Set when the holdout was degenerate and the fallback s_μ/2 was used.
    pub fallback: bool,
}

/// Add-one smoothed success rate.
fn smoothed_rate(successes: usize, count: usize) -> f64 {
    (successes as f64 + 1.0) / (count as f64 + 2.0)
}

/// Per-grid-point latent treatment effect implied by arm-wise holdout rates:
/// Φ⁻¹(r̂·b̂) − Φ⁻¹(b̂) with b̂ the control success rate and r̂ the arm rate
/// ratio.
fn holdout_latent_effects(holdout: &Dataset) -> Vec<f64> {
    let t_len = holdout.grid.len();
    let mut succ = vec![[0usize; 2]; t_len];
    let mut count = vec![[0usize; 2]; t_len];
    for i in 0..holdout.n() {
        let arm = holdout.z[i] as usize;
        count[holdout.t_idx[i]][arm] += 1;
        succ[holdout.t_idx[i]][arm] += holdout.y[i] as usize;
    }
    let mut effects = Vec::new();
    for t in 0..t_len {
        if count[t][0] == 0 || count[t][1] == 0 {
            continue;
        }
        let b_hat = smoothed_rate(succ[t][0], count[t][0]);
        let p1_hat = smoothed_rate(succ[t][1], count[t][1]);
        let r_hat = p1_hat / b_hat;
        let treated_risk = (r_hat * b_hat).clamp(1e-6, 1.0 - 1e-6);
        effects.push(phi_inv(treated_risk) - phi_inv(b_hat));
    }
    effects
}

/// Solves for s_τ so the implied prior SD of the latent effect matches the
/// effect spread estimated from the holdout.
///
/// The latent effect is (b₁−b₀)·τ with (b₁−b₀) having prior mean 1 and
/// variance 1, and τ having marginal prior SD s_τ, so the implied prior SD
/// is √2·s_τ. The match is solved by Nelder-Mead on |√2·s_τ − SD_emp| and
/// floored at 0.01. A degenerate holdout (single arm or fewer than two
/// usable grid points) falls back to s_μ/2.
pub fn s_tau_calibrate(holdout: &Dataset, s_mu: f64) -> STauCalibration {
    let effects = holdout_latent_effects(holdout);
    if !holdout.both_arms_present() || effects.len() < 2 {
        return STauCalibration {
            s_tau: s_mu / 2.0,
            empirical_sd: 0.0,
            objective: f64::NAN,
            fallback: true,
        };
    }
    let sd_emp = sample_variance(&effects).sqrt();
    let implied_sd_factor = 2.0f64.sqrt();
    let objective = |p: &[f64]| (implied_sd_factor * p[0].abs() - sd_emp).abs();
    let (x, obj) = nelder_mead(objective, &[s_mu / 2.0], 0.5, 500, 1e-12);
    STauCalibration {
        s_tau: x[0].abs().max(S_TAU_FLOOR),
        empirical_sd: sd_emp,
        objective: obj,
        fallback: false,
    }
}

/// Per-draw variance ratio of relative risk under heterogeneous τᵢ versus
/// the same draw with τᵢ replaced by its cross-unit mean. Draws whose
/// homogeneous variance is zero are excluded; their count is returned.
pub fn structural_heterogeneity_ratio(
    draws: &PosteriorDraws,
    t_idx: &[usize],
) -> Result<(f64, usize)> {
    let n_draws = draws.n_draws();
    let n = draws.n_units();
    if n_draws == 0 || n == 0 {
        return Err(Error::EmptyDataset("no posterior draws".into()));
    }
    let mut ratios = Vec::with_capacity(n_draws);
    let mut excluded = 0usize;
    let mut rr = vec![0.0; n];
    let mut rr_hom = vec![0.0; n];
    for b in 0..n_draws {
        let (b0, b1) = (draws.traces.b0[b], draws.traces.b1[b]);
        let xi = draws.traces.xi[b];
        let tau_bar = mean(draws.tau.row(b));
        for i in 0..n {
            let tau_i = draws.tau.get(b, i);
            let base = draws.alpha[t_idx[i]] + xi * draws.mu.get(b, i);
            rr[i] = phi(base + b1 * tau_i) / phi(base + b0 * tau_i);
            rr_hom[i] = phi(base + b1 * tau_bar) / phi(base + b0 * tau_bar);
        }
        let v_het = sample_variance(&rr);
        let v_hom = sample_variance(&rr_hom);
        if v_hom == 0.0 {
            excluded += 1;
            continue;
        }
        ratios.push(v_het / v_hom);
    }
    if ratios.is_empty() {
        return Err(Error::EmptySelection(
            "all draws had zero homogeneous variance".into(),
        ));
    }
    Ok((mean(&ratios), excluded))
}

/// One row of the structural-heterogeneity illustration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HetGridRow {
    pub alpha: f64,
    pub tau: f64,
    pub mu_sd: f64,
    pub rr: f64,
}

/// For each (α, τ, sd) combination, draws n prognostic values μᵢ ~ N(0, sd²)
/// and emits the individual relative risks Φ(α+μᵢ+τ)/Φ(α+μᵢ) in long format.
pub fn structural_heterogeneity_grid(
    alphas: &[f64],
    taus: &[f64],
    mu_sds: &[f64],
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<HetGridRow>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len() * taus.len() * mu_sds.len() * n);
    for &alpha in alphas {
        for &tau in taus {
            for &sd in mu_sds {
                for _ in 0..n {
                    let mu = rng.standard_normal() * sd;
                    rows.push(HetGridRow {
                        alpha,
                        tau,
                        mu_sd: sd,
                        rr: phi(alpha + mu + tau) / phi(alpha + mu),
                    });
                }
            }
        }
    }
    Ok(rows)
}
