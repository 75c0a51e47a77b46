use tsbcf::config::ModelConfig;
use tsbcf::propensity::{fit_propensity, with_propensity};
use tsbcf::rngs::RngStream;
use tsbcf::sampler::run_chain;
use tsbcf::simbench::*;

fn main() {
    let spec = ScenarioSpec { scenario: Scenario::A, rho: 0.25, n: 1000, replicates: 1, base_seed: 1 };
    let mut rng = RngStream::new(1, 0);
    let sim = gen_dataset(&spec, &mut rng).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.n_burn = 500; cfg.n_draws = 500;
    let t0 = std::time::Instant::now();
    let mut pcfg = cfg.clone(); pcfg.n_burn = 300; pcfg.n_draws = 300;
    let prop = fit_propensity(&sim.dataset, &pcfg, RngStream::new(1, 1)).unwrap();
    println!("propensity fit: {:.2?}", t0.elapsed());
    let d = with_propensity(&sim.dataset, prop.pi_hat).unwrap();
    for mode in [ModelMode::Tsbcf1, ModelMode::Bcf, ModelMode::Bart] {
        let t1 = std::time::Instant::now();
        let (problem, c) = model_mode_wiring(mode, &d, &cfg).unwrap();
        let draws = run_chain(&problem, &c, RngStream::new(1, 2)).unwrap();
        println!("{mode} fit: {:.2?} (accept mu {:.2} tau {:.2})", t1.elapsed(), draws.accept_rate_mu, draws.accept_rate_tau);
    }
}
