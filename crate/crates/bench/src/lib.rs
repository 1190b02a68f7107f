//! Shared fixtures for the benchmarks.

use refinestyle::encoder::Inverter;
use refinestyle::generator::GeneratorBundle;
use refinestyle::io::load_profile;
use refinestyle::io::RunConfig;
use refinestyle::refinement::{FactorInit, ResidualFactors};
use refinestyle::{Rng, Tensor};

pub struct Fixture {
    pub config: RunConfig,
    pub bundle: GeneratorBundle,
    pub stage1: Inverter,
    pub refiner: Inverter,
    pub factors: ResidualFactors,
}

/// Untrained desk models of `profile`.
pub fn fixture(profile: &str) -> Fixture {
    let config = load_profile(profile).expect("known profile");
    let bundle = GeneratorBundle::fixture(config.generator.clone(), 0).expect("fixture generator");
    let stage1 = Inverter::new(config.stage1.clone(), config.generator.clone(), 0, None).expect("stage-1");
    let refiner = Inverter::new(config.refiner.clone(), config.generator.clone(), 0, None).expect("refiner");
    let fm = config.factor_model();
    let factors =
        ResidualFactors::new(&config.generator, fm.n_r, fm.rank, fm.scaling, &FactorInit::default(), &mut Rng::new(1)).expect("factors");
    Fixture { config, bundle, stage1, refiner, factors }
}

pub fn image(f: &Fixture, seed: u64) -> Tensor {
    let r = f.config.generator.resolution();
    Tensor::randn([3, r, r], 0.5, &mut Rng::new(seed))
}
