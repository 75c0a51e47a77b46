//! Propensity estimation: P(z=1 | t, x) by a probit forest with scalar
//! leaves (single-point grid), or externally supplied scores.

use std::sync::Arc;

use crate::config::ModelConfig;
use crate::data::{Dataset, TargetGrid};
use crate::error::{Error, Result};
use crate::mathutil::phi;
use crate::rngs::RngStream;
use crate::sampler::{run_chain, FitProblem, ResponseData};

pub const CLIP_LO: f64 = 0.001;
pub const CLIP_HI: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Posterior-mean P(z=1 | t, x) per unit, clipped into (0,1).
    pub pi_hat: Vec<f64>,
    pub n_draws: usize,
    pub clip: (f64, f64),
}

/// Fits the treatment indicator with a single probit forest over (x, t) and
/// returns clipped posterior-mean propensities.
pub fn fit_propensity(
    d: &Dataset,
    config: &ModelConfig,
    rng_stream: RngStream,
) -> Result<PropensityFit> {
    if !d.both_arms_present() {
        return Err(Error::NoOverlap);
    }
    let n = d.n();
    // Scalar leaves: ordinary probit forest; t enters as a covariate.
    let design = d.x.with_extra(Arc::new(d.target_column()));
    let problem = FitProblem {
        response: ResponseData::Binary(d.z.clone()),
        z: vec![0; n],
        t_idx: vec![0; n],
        grid: TargetGrid::single_point(),
        mu_design: design,
        tau_design: None,
        z_col_in_mu: None,
        update_xi: false,
        alpha_mode: crate::sampler::AlphaMode::Empirical,
        constant_leaves: false,
    };
    let mut cfg = config.clone();
    cfg.response_mode = crate::config::ResponseMode::Probit;
    let draws = run_chain(&problem, &cfg, rng_stream)?;

    let n_draws = draws.n_draws();
    let pi_hat: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for b in 0..n_draws {
                acc += phi(draws.f0.get(b, i));
            }
            (acc / n_draws as f64).clamp(CLIP_LO, CLIP_HI)
        })
        .collect();
    Ok(PropensityFit {
        pi_hat,
        n_draws,
        clip: (CLIP_LO, CLIP_HI),
    })
}

/// Attaches propensity estimates to a dataset copy.
pub fn with_propensity(d: &Dataset, pi_hat: Vec<f64>) -> Result<Dataset> {
    Dataset::from_parts(
        d.y.clone(),
        d.z.clone(),
        d.t_idx.clone(),
        d.grid.clone(),
        d.x.clone(),
        Some(pi_hat),
    )
}
