//! Model and run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prior family for the treatment-leaf scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauScaleMode {
    /// Fixed shrinkage (Δτ ≡ 1): half-Normal leaf scale.
    HalfNormal,
    /// Gibbs-updated shrinkage with ν = 1: half-Cauchy leaf scale.
    HalfCauchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseMode {
    /// Binary outcome via latent-normal data augmentation; σ² fixed at 1.
    Probit,
    /// Continuous outcome with a conjugate inverse-gamma prior on σ².
    Continuous,
}

/// Ensemble and prior settings for one tsBCF fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Prognostic-forest tree count.
    pub n_mu: usize,
    /// Treatment-forest tree count.
    pub n_tau: usize,
    /// Split probability at the root, prognostic forest.
    pub eta_mu: f64,
    /// Depth penalty exponent, prognostic forest.
    pub beta_mu: f64,
    pub eta_tau: f64,
    pub beta_tau: f64,
    /// Smoothness of the prognostic leaf curves (larger = wigglier).
    pub kappa_mu: f64,
    pub kappa_tau: f64,
    /// Marginal prior scale of the prognostic fit on the latent scale.
    pub s_mu: f64,
    /// Marginal prior scale of the treatment fit on the latent scale.
    pub s_tau: f64,
    /// Shrinkage degrees of freedom for the prognostic forest (1 induces a
    /// half-Cauchy prior on the leaf scale).
    pub nu_mu: f64,
    pub tau_scale_mode: TauScaleMode,
    pub response_mode: ResponseMode,
    /// (ν, q) of the σ² prior calibration, continuous mode only.
    pub sigma_prior_nu: f64,
    pub sigma_prior_q: f64,
    pub n_burn: usize,
    pub n_draws: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mu: 200,
            n_tau: 50,
            eta_mu: 0.95,
            beta_mu: 2.0,
            eta_tau: 0.25,
            beta_tau: 3.0,
            kappa_mu: 1.0,
            kappa_tau: 1.0,
            s_mu: default_s_mu(),
            s_tau: default_s_mu() / 2.0,
            nu_mu: 1.0,
            tau_scale_mode: TauScaleMode::HalfNormal,
            response_mode: ResponseMode::Probit,
            sigma_prior_nu: 3.0,
            sigma_prior_q: 0.90,
            n_burn: 1000,
            n_draws: 1000,
            thin: 1,
            seed: 0,
        }
    }
}

/// Default prognostic scale from the default elicited risk range.
fn default_s_mu() -> f64 {
    crate::calibration::s_mu_from_elicitation(0.860, 0.999).expect("valid default range")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mu < 1 || self.n_tau < 1 {
            return Err(Error::InvalidConfig("tree counts must be at least 1".into()));
        }
        for (name, eta) in [("eta_mu", self.eta_mu), ("eta_tau", self.eta_tau)] {
            if !(eta > 0.0 && eta < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0,1)")));
            }
        }
        for (name, v) in [("beta_mu", self.beta_mu), ("beta_tau", self.beta_tau)] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        for (name, v) in [
            ("kappa_mu", self.kappa_mu),
            ("kappa_tau", self.kappa_tau),
            ("s_mu", self.s_mu),
            ("s_tau", self.s_tau),
            ("nu_mu", self.nu_mu),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_draws == 0 {
            return Err(Error::InvalidConfig("n_draws must be positive".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be positive".into()));
        }
        if !(self.sigma_prior_nu > 0.0) || !(self.sigma_prior_q > 0.0 && self.sigma_prior_q < 1.0)
        {
            return Err(Error::InvalidConfig("invalid sigma prior".into()));
        }
        Ok(())
    }
}
