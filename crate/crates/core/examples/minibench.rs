use tsbcf::config::ModelConfig;
use tsbcf::persist::metrics_to_csv;
use tsbcf::simbench::*;

fn main() {
    let mut sampler = ModelConfig::default();
    sampler.n_burn = 500;
    sampler.n_draws = 500;
    let cfg = BenchConfig {
        scenarios: vec![Scenario::A, Scenario::E],
        models: vec![ModelMode::Tsbcf1, ModelMode::Tsbcf2, ModelMode::Bcf, ModelMode::Bart],
        n: 1000,
        replicates: 3,
        rho: 0.25,
        base_seed: 20260811,
        sampler,
        propensity_trees: 200,
        propensity_burn: 300,
        propensity_draws: 300,
    };
    let rows = run_benchmark(&cfg).unwrap();
    print!("{}", metrics_to_csv(&rows));
}
