//! Slower end-to-end statistical checks of the sampler against known
//! ground truth.

use std::sync::Arc;

use tsbcf::config::{ModelConfig, ResponseMode};
use tsbcf::data::{Column, CovMatrix, Dataset, TargetGrid};
use tsbcf::estimands::rr_draws;
use tsbcf::mathutil::phi;
use tsbcf::propensity::{fit_propensity, with_propensity};
use tsbcf::rngs::RngStream;
use tsbcf::sampler::{run_chain, AlphaMode, FitProblem, ResponseData};
use tsbcf::simbench::{gen_dataset, model_mode_wiring, ModelMode, Scenario, ScenarioSpec};

fn intercept_only_dataset(n: usize, rate: f64, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, 0);
    let y: Vec<u8> = (0..n).map(|_| (rng.uniform() < rate) as u8).collect();
    let z: Vec<u8> = (0..n).map(|_| (rng.uniform() < 0.5) as u8).collect();
    let t_idx: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
    // Pure-noise covariates.
    let x: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    Dataset::from_parts(
        y,
        z,
        t_idx,
        TargetGrid::new(vec![0.25, 0.5, 0.75, 1.0]).unwrap(),
        CovMatrix::new(vec![Arc::new(Column::Continuous {
            name: "noise".into(),
            values: x,
        })]),
        Some(vec![0.5; n]),
    )
    .unwrap()
}

#[test]
fn probit_recovers_marginal_success_rate() {
    // No covariate signal, true rate 0.7: the posterior mean success
    // probability at observed arms must sit within 0.7 ± 0.03.
    let d = intercept_only_dataset(2000, 0.7, 42);
    let problem = FitProblem::causal(&d).unwrap();
    let mut config = ModelConfig::default();
    config.n_burn = 300;
    config.n_draws = 500;
    let draws = run_chain(&problem, &config, RngStream::new(7, 0)).unwrap();

    let mut acc = 0.0;
    let mut count = 0usize;
    for b in 0..draws.n_draws() {
        for i in 0..d.n() {
            let f = if d.z[i] == 1 {
                draws.f1.get(b, i)
            } else {
                draws.f0.get(b, i)
            };
            acc += phi(f);
            count += 1;
        }
    }
    let mean_prob = acc / count as f64;
    assert!(
        (mean_prob - 0.7).abs() < 0.03,
        "posterior mean success probability {mean_prob}"
    );
}

#[test]
fn continuous_mode_recovers_noise_variance() {
    // y = 0.3 + x/2 + ε with σ² = 0.25; the posterior mean of σ² must land
    // inside [0.22, 0.28].
    let n = 2000;
    let mut rng = RngStream::new(3, 0);
    let x: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| 0.3 + 0.5 * v + 0.5 * rng.standard_normal())
        .collect();
    let t_idx: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let problem = FitProblem {
        response: ResponseData::Continuous(y),
        z: vec![0; n],
        t_idx,
        grid: TargetGrid::new(vec![0.0, 1.0]).unwrap(),
        mu_design: CovMatrix::new(vec![Arc::new(Column::Continuous {
            name: "x".into(),
            values: x,
        })]),
        tau_design: None,
        z_col_in_mu: None,
        update_xi: true,
        alpha_mode: AlphaMode::Empirical,
        constant_leaves: false,
    };
    let mut config = ModelConfig::default();
    config.response_mode = ResponseMode::Continuous;
    config.n_mu = 100;
    config.n_burn = 300;
    config.n_draws = 400;
    let draws = run_chain(&problem, &config, RngStream::new(11, 0)).unwrap();
    let mean_sigma2 =
        draws.traces.sigma2.iter().sum::<f64>() / draws.traces.sigma2.len() as f64;
    assert!(
        (0.22..=0.28).contains(&mean_sigma2),
        "posterior mean sigma2 {mean_sigma2}"
    );
}

fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let ra = rank(a);
    let rb = rank(b);
    let ma = ra.iter().sum::<f64>() / ra.len() as f64;
    let mb = rb.iter().sum::<f64>() / rb.len() as f64;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..ra.len() {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma).powi(2);
        db += (rb[i] - mb).powi(2);
    }
    num / (da.sqrt() * db.sqrt())
}

#[test]
fn propensity_tracks_true_scores_without_targeting() {
    // ρ = 0: assignment is a pure step in x₄; the fitted scores must rank
    // units like the true propensities.
    let spec = ScenarioSpec {
        scenario: Scenario::A,
        rho: 0.0,
        n: 2000,
        replicates: 1,
        base_seed: 31,
    };
    let mut rng = RngStream::new(31, 0);
    let sim = gen_dataset(&spec, &mut rng).unwrap();
    let mut config = ModelConfig::default();
    config.n_mu = 100;
    config.n_burn = 200;
    config.n_draws = 200;
    let fit = fit_propensity(&sim.dataset, &config, RngStream::new(31, 1)).unwrap();
    let rho = rank_correlation(&fit.pi_hat, &sim.true_pi);
    assert!(rho > 0.5, "rank correlation {rho}");
}

#[test]
fn constant_effect_scenario_covers_truth_per_unit() {
    // Scenario E: constant latent effect 0.1. Per-unit 95% intervals from
    // the causal fit must cover the true relative risk for at least 90% of
    // units.
    let spec = ScenarioSpec {
        scenario: Scenario::E,
        rho: 0.25,
        n: 1000,
        replicates: 1,
        base_seed: 57,
    };
    let mut rng = RngStream::new(57, 0);
    let sim = gen_dataset(&spec, &mut rng).unwrap();
    let mut prop_cfg = ModelConfig::default();
    prop_cfg.n_burn = 200;
    prop_cfg.n_draws = 200;
    let prop = fit_propensity(&sim.dataset, &prop_cfg, RngStream::new(57, 1)).unwrap();
    let d = with_propensity(&sim.dataset, prop.pi_hat).unwrap();

    let mut config = ModelConfig::default();
    config.n_burn = 400;
    config.n_draws = 400;
    let (problem, cfg) = model_mode_wiring(ModelMode::Tsbcf1, &d, &config).unwrap();
    let draws = run_chain(&problem, &cfg, RngStream::new(57, 2)).unwrap();
    let rr = rr_draws(&draws);
    let intervals = rr.unit_intervals(0.95);
    let covered = intervals
        .iter()
        .zip(&sim.truth_rr)
        .filter(|((lo, hi), &truth)| *lo <= truth && truth <= *hi)
        .count();
    let frac = covered as f64 / intervals.len() as f64;
    assert!(frac >= 0.9, "per-unit coverage {frac}");
}
