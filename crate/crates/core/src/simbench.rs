//! Simulation benchmark: five latent-effect scenarios, four model modes,
//! RMSE/coverage/interval-length metrics across replicates.
//!
//! Stream layout (fixed, so results are independent of scheduling): each
//! (scenario, replicate) pair owns a block of `2 + n_models` streams —
//! slot 0 generates data, slot 1 fits the propensity, slot 2+k fits model k.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::config::ModelConfig;
use crate::data::{Column, CovMatrix, Dataset, TargetGrid};
use crate::error::{Error, Result};
use crate::estimands::rr_draws;
use crate::mathutil::{mean, phi, sample_variance};
use crate::propensity::{fit_propensity, with_propensity};
use crate::rngs::RngStream;
use crate::sampler::{run_chain, FitProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    C,
    D,
    E,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Scenario::A),
            "B" => Ok(Scenario::B),
            "C" => Ok(Scenario::C),
            "D" => Ok(Scenario::D),
            "E" => Ok(Scenario::E),
            other => Err(Error::InvalidConfig(format!("unknown scenario `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = match self {
            Scenario::A => "A",
            Scenario::B => "B",
            Scenario::C => "C",
            Scenario::D => "D",
            Scenario::E => "E",
        };
        write!(f, "{c}")
    }
}

/// Shared prognostic function: t^1.5/4 + x₁/6 + x₂/4.
pub fn mu_true(t: f64, x1: f64, x2: f64) -> f64 {
    0.25 * t.powf(1.5) + x1 / 6.0 + x2 / 4.0
}

/// Latent treatment effect per scenario.
pub fn tau_true(scenario: Scenario, t: f64, x3: f64) -> f64 {
    let step = |c: f64| (x3 > c) as u8 as f64;
    let wave = 0.2 * t - 0.05 * (1.5 * std::f64::consts::PI * t).sin();
    match scenario {
        Scenario::A => 0.1 + wave,
        Scenario::B => 0.1 + 0.2 * step(-0.5) + 0.15 * step(0.5) + wave,
        Scenario::C => 0.1 + 0.2 * step(-0.5) + (0.15 + 0.2 * t) * step(0.5) + wave,
        Scenario::D => 0.05 + 0.05 * step(-0.5) + (0.15 + 0.2 * t) * step(0.5) + wave,
        Scenario::E => 0.1,
    }
}

/// Treatment-assignment probability: Φ(ρ·[x₁/6 − x₂/4] + (1−ρ)·s(x₄)) with
/// s(x₄) = −1 above zero and +1 below.
pub fn true_propensity(rho: f64, x1: f64, x2: f64, x4: f64) -> f64 {
    let s = if x4 > 0.0 { -1.0 } else { 1.0 };
    phi(rho * (x1 / 6.0 - x2 / 4.0) + (1.0 - rho) * s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Targeted-selection mixing weight, default 0.25.
    pub rho: f64,
    pub n: usize,
    pub replicates: usize,
    pub base_seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig("rho must lie in [0,1]".into()));
        }
        if self.n == 0 || self.replicates == 0 {
            return Err(Error::InvalidConfig(
                "need positive n and replicate count".into(),
            ));
        }
        Ok(())
    }
}

/// One generated replicate with its ground truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: Dataset,
    pub truth_rr: Vec<f64>,
    pub true_pi: Vec<f64>,
}

/// Generates one replicate: x ∈ ℝ⁵ iid standard normal, t uniform on the
/// ten-point grid {0.1,…,1.0}, z Bernoulli from the propensity, y Bernoulli
/// from Φ(μ + τz).
pub fn gen_dataset(spec: &ScenarioSpec, rng: &mut RngStream) -> Result<SimData> {
    spec.validate()?;
    let n = spec.n;
    let grid_values: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let grid = TargetGrid::new(grid_values.clone())?;

    let mut x: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
    let mut t_idx = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut truth_rr = Vec::with_capacity(n);
    let mut true_pi = Vec::with_capacity(n);

    for _ in 0..n {
        let xi: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let t_i = rng.below(10);
        let t = grid_values[t_i];
        let mu = mu_true(t, xi[0], xi[1]);
        let tau = tau_true(spec.scenario, t, xi[2]);
        let pi = true_propensity(spec.rho, xi[0], xi[1], xi[3]);
        let zi = (rng.uniform() < pi) as u8;
        let p_success = phi(mu + tau * zi as f64);
        let yi = (rng.uniform() < p_success) as u8;
        let rr = phi(mu + tau) / phi(mu);
        debug_assert!(rr > 1.0, "all scenario effects are positive");
        for (col, v) in x.iter_mut().zip(&xi) {
            col.push(*v);
        }
        t_idx.push(t_i);
        y.push(yi);
        z.push(zi);
        truth_rr.push(rr);
        true_pi.push(pi);
    }

    let cols: Vec<Arc<Column>> = x
        .into_iter()
        .enumerate()
        .map(|(i, values)| {
            Arc::new(Column::Continuous {
                name: format!("x{}", i + 1),
                values,
            })
        })
        .collect();
    let dataset = Dataset::from_parts(y, z, t_idx, grid, CovMatrix::new(cols), None)?;
    Ok(SimData {
        dataset,
        truth_rr,
        true_pi,
    })
}

/// Comparator models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    /// κ_μ = 1, κ_τ = 1.
    Tsbcf1,
    /// κ_μ = 1, κ_τ = 3.
    Tsbcf2,
    /// Constant-leaf limit in both forests.
    Bcf,
    /// Single forest with the treatment indicator as a covariate.
    Bart,
}

impl std::str::FromStr for ModelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tsbcf1" => Ok(ModelMode::Tsbcf1),
            "tsbcf2" => Ok(ModelMode::Tsbcf2),
            "bcf" | "bcf-mode" => Ok(ModelMode::Bcf),
            "bart" | "bart-mode" => Ok(ModelMode::Bart),
            other => Err(Error::InvalidConfig(format!("unknown model `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelMode::Tsbcf1 => "tsbcf1",
            ModelMode::Tsbcf2 => "tsbcf2",
            ModelMode::Bcf => "bcf",
            ModelMode::Bart => "bart",
        };
        write!(f, "{s}")
    }
}

/// Wires a model mode into a sampling problem and adjusted configuration.
/// The dataset must carry propensity estimates.
pub fn model_mode_wiring(
    mode: ModelMode,
    d: &Dataset,
    base: &ModelConfig,
) -> Result<(FitProblem, ModelConfig)> {
    let mut config = base.clone();
    match mode {
        ModelMode::Tsbcf1 => {
            config.kappa_mu = 1.0;
            config.kappa_tau = 1.0;
            Ok((FitProblem::causal(d)?, config))
        }
        ModelMode::Tsbcf2 => {
            config.kappa_mu = 1.0;
            config.kappa_tau = 3.0;
            Ok((FitProblem::causal(d)?, config))
        }
        ModelMode::Bcf => {
            let mut problem = FitProblem::causal(d)?;
            problem.constant_leaves = true;
            Ok((problem, config))
        }
        ModelMode::Bart => {
            let pi = d.pi_hat.as_ref().ok_or_else(|| {
                Error::InvalidArgument("BART mode requires propensity estimates".into())
            })?;
            let design = d
                .x
                .with_extra(Arc::new(Column::Continuous {
                    name: "__propensity".into(),
                    values: pi.clone(),
                }))
                .with_extra(Arc::new(Column::Continuous {
                    name: "__treatment".into(),
                    values: d.z.iter().map(|&z| z as f64).collect(),
                }));
            let z_col = design.n_cols() - 1;
            let problem = FitProblem {
                response: crate::sampler::ResponseData::Binary(d.y.clone()),
                z: d.z.clone(),
                t_idx: d.t_idx.clone(),
                grid: d.grid.clone(),
                mu_design: design,
                tau_design: None,
                z_col_in_mu: Some(z_col),
                update_xi: true,
                alpha_mode: crate::sampler::AlphaMode::Empirical,
                constant_leaves: false,
            };
            Ok((problem, config))
        }
    }
}

/// One (scenario, model) row of the benchmark table.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub model: String,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub coverage: f64,
    pub interval_length: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
}

/// Per-replicate per-model metrics.
#[derive(Debug, Clone)]
pub struct ReplicateMetrics {
    pub rmse: f64,
    pub coverage: f64,
    pub interval_length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenarios: Vec<Scenario>,
    pub models: Vec<ModelMode>,
    pub n: usize,
    pub replicates: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub base_seed: u64,
    /// Sampler settings shared by every model fit.
    #[serde(default)]
    pub sampler: ModelConfig,
    /// Tree count for the propensity forest.
    #[serde(default = "default_prop_trees")]
    pub propensity_trees: usize,
    /// Burn/draw counts for the propensity forest.
    #[serde(default = "default_prop_iters")]
    pub propensity_burn: usize,
    #[serde(default = "default_prop_iters")]
    pub propensity_draws: usize,
}

fn default_rho() -> f64 {
    0.25
}

fn default_prop_trees() -> usize {
    200
}

fn default_prop_iters() -> usize {
    300
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.models.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one scenario and one model".into(),
            ));
        }
        if self.replicates == 0 || self.n == 0 {
            return Err(Error::InvalidConfig(
                "need positive n and replicate count".into(),
            ));
        }
        self.sampler.validate()?;
        if self.propensity_draws == 0 {
            return Err(Error::InvalidConfig(
                "propensity draws must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stream id for a (scenario index, replicate, slot) triple.
    pub fn stream_id(&self, scenario_idx: usize, replicate: usize, slot: usize) -> u64 {
        let slots = 2 + self.models.len() as u64;
        ((scenario_idx as u64 * self.replicates as u64) + replicate as u64) * slots + slot as u64
    }
}

/// Fits one model on one replicate and scores it against the truth.
pub fn score_model(
    mode: ModelMode,
    sim: &SimData,
    pi_hat: &[f64],
    config: &ModelConfig,
    rng: RngStream,
) -> Result<ReplicateMetrics> {
    let d = with_propensity(&sim.dataset, pi_hat.to_vec())?;
    let (problem, cfg) = model_mode_wiring(mode, &d, config)?;
    let draws = run_chain(&problem, &cfg, rng)?;
    let rr = rr_draws(&draws);
    let means = rr.unit_means();
    let intervals = rr.unit_intervals(0.95);
    let n = means.len();
    let mut se = 0.0;
    let mut covered = 0usize;
    let mut length = 0.0;
    for i in 0..n {
        let err = means[i] - sim.truth_rr[i];
        se += err * err;
        let (lo, hi) = intervals[i];
        if lo <= sim.truth_rr[i] && sim.truth_rr[i] <= hi {
            covered += 1;
        }
        length += hi - lo;
    }
    Ok(ReplicateMetrics {
        rmse: (se / n as f64).sqrt(),
        coverage: covered as f64 / n as f64,
        interval_length: length / n as f64,
    })
}

/// Runs the full benchmark. Replicates run concurrently on disjoint RNG
/// streams; the table is a deterministic ordered reduction.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.scenarios.len())
        .flat_map(|s| (0..cfg.replicates).map(move |r| (s, r)))
        .collect();

    type RepResult = Vec<Result<ReplicateMetrics>>;
    let per_job: Vec<Result<RepResult>> = crate::exec::map_slice(&jobs, |&(s_idx, rep)| {
        let spec = ScenarioSpec {
            scenario: cfg.scenarios[s_idx],
            rho: cfg.rho,
            n: cfg.n,
            replicates: cfg.replicates,
            base_seed: cfg.base_seed,
        };
        let mut gen_rng = RngStream::new(cfg.base_seed, cfg.stream_id(s_idx, rep, 0));
        let sim = gen_dataset(&spec, &mut gen_rng)?;

        let mut prop_cfg = cfg.sampler.clone();
        prop_cfg.n_mu = cfg.propensity_trees;
        prop_cfg.n_burn = cfg.propensity_burn;
        prop_cfg.n_draws = cfg.propensity_draws;
        let prop = fit_propensity(
            &sim.dataset,
            &prop_cfg,
            RngStream::new(cfg.base_seed, cfg.stream_id(s_idx, rep, 1)),
        )?;

        let results: RepResult = cfg
            .models
            .iter()
            .enumerate()
            .map(|(m_idx, &mode)| {
                score_model(
                    mode,
                    &sim,
                    &prop.pi_hat,
                    &cfg.sampler,
                    RngStream::new(cfg.base_seed, cfg.stream_id(s_idx, rep, 2 + m_idx)),
                )
            })
            .collect();
        Ok(results)
    });

    // Aggregate in (scenario, model) order.
    let mut rows = Vec::new();
    for (s_idx, &scenario) in cfg.scenarios.iter().enumerate() {
        for (m_idx, &mode) in cfg.models.iter().enumerate() {
            let mut rmses = Vec::new();
            let mut coverages = Vec::new();
            let mut lengths = Vec::new();
            let mut failed = 0usize;
            for rep in 0..cfg.replicates {
                match &per_job[s_idx * cfg.replicates + rep] {
                    Ok(models) => match &models[m_idx] {
                        Ok(m) => {
                            rmses.push(m.rmse);
                            coverages.push(m.coverage);
                            lengths.push(m.interval_length);
                        }
                        Err(_) => failed += 1,
                    },
                    Err(_) => failed += 1,
                }
            }
            rows.push(MetricsRow {
                scenario: scenario.to_string(),
                model: mode.to_string(),
                rmse_mean: mean(&rmses),
                rmse_sd: sample_variance(&rmses).sqrt(),
                coverage: mean(&coverages),
                interval_length: mean(&lengths),
                n_replicates: rmses.len(),
                n_failed: failed,
            });
        }
    }
    Ok(rows)
}
