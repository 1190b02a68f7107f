//! Run-directory artifacts shared by the subcommands.
//!
//! A run directory holds `generator.rfsk`, the inverter checkpoints and
//! their metric logs. Commands load what exists and build what is missing.

use std::fs;
use std::path::{Path, PathBuf};

use refinestyle::domain::{make_domain, Domain};
use refinestyle::encoder::Inverter;
use refinestyle::generator::GeneratorBundle;
use refinestyle::inversion::{evaluate, train_one_stage, train_two_stage, Metrics, MetricLog, Model};
use refinestyle::io::checkpoint::write_atomic;
use refinestyle::io::config::{DomainConfig, Mode};
use refinestyle::io::{generator_checkpoint, generator_from, inverter_checkpoint, inverter_from, Checkpoint, Provenance, RunConfig};
use refinestyle::proxy::Proxies;
use refinestyle::{Error, Result, Tensor};

pub const GENERATOR: &str = "generator.rfsk";
pub const STAGE1: &str = "stage1.rfsk";
pub const REFINER: &str = "refiner.rfsk";
/// One-stage model, in one-stage mode.
pub const INVERTER: &str = "inverter.rfsk";

pub struct RunDir {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub proxies: Proxies,
    /// Fixed provenance timestamps, for byte-reproducible artifacts.
    pub reproducible: bool,
}

/// Trained models of a run, by mode.
pub enum Models {
    OneStage(Inverter),
    TwoStage { stage1: Inverter, refiner: Inverter },
}

impl Models {
    pub fn model(&self) -> Model<'_> {
        match self {
            Models::OneStage(m) => Model::OneStage(m),
            Models::TwoStage { stage1, refiner } => Model::TwoStage { stage1, refiner },
        }
    }

    /// The w⁺ inverter the refinement is compared against.
    pub fn baseline(&self) -> Model<'_> {
        match self {
            Models::OneStage(m) => Model::WOnly(m),
            Models::TwoStage { stage1, .. } => Model::WOnly(stage1),
        }
    }
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Self {
        RunDir { dir: dir.into(), config, proxies: Proxies::default(), reproducible: false }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn provenance(&self, seed: u64) -> Provenance {
        if self.reproducible {
            Provenance::fixed(seed)
        } else {
            Provenance::now(seed)
        }
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    pub fn has(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Fixture generator for the config, loaded when already on disk.
    pub fn generator(&self) -> Result<GeneratorBundle> {
        if self.has(GENERATOR) {
            let b = generator_from(&Checkpoint::load(&self.path(GENERATOR))?)?;
            if b.config != self.config.generator {
                return Err(Error::contract("generator", format!("{} was built for a different generator config", self.path(GENERATOR).display())));
            }
            return Ok(b);
        }
        self.make_generator()
    }

    pub fn make_generator(&self) -> Result<GeneratorBundle> {
        let b = GeneratorBundle::fixture(self.config.generator.clone(), self.config.seeds.fixture)?;
        generator_checkpoint(&b, self.provenance(self.config.seeds.fixture))?.save(&self.path(GENERATOR))?;
        Ok(b)
    }

    pub fn domain(&self, bundle: &GeneratorBundle, d: &DomainConfig) -> Result<Domain> {
        make_domain(bundle, d.seed, d.n_train, d.n_test, d.transform.clone())
    }

    fn load_inverter(&self, name: &str) -> Result<Inverter> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Error::contract("models", format!("{} not found; run train-invert first", path.display())));
        }
        inverter_from(&Checkpoint::load(&path)?)
    }

    /// Stage-1 inverter, trained on the in-domain set unless a checkpoint
    /// with the same config is already present.
    pub fn stage1(&self, bundle: &GeneratorBundle) -> Result<(Inverter, Option<MetricLog>)> {
        let c = &self.config;
        if self.has(STAGE1) {
            let inv = self.load_inverter(STAGE1)?;
            if inv.config == c.stage1 && inv.generator == c.generator {
                return Ok((inv, None));
            }
        }
        let mean_w = bundle.mean_w(c.budgets.mean_w_samples, c.seeds.mean_w)?;
        let init = Inverter::new(c.stage1.clone(), c.generator.clone(), c.seeds.stage1, Some(&mean_w))?;
        let images = train_images(&self.domain(bundle, &c.domain)?);
        let (inv, log) = train_one_stage(&c.stage1_run(), bundle, &init, &self.proxies, &images)?;
        inverter_checkpoint(&inv, self.provenance(c.seeds.stage1))?.save(&self.path(STAGE1))?;
        self.write("stage1.log.jsonl", log.to_jsonl().as_bytes())?;
        Ok((inv, Some(log)))
    }

    /// Refiner trained on the out-of-domain set over a frozen stage-1.
    pub fn train_refiner(&self, bundle: &GeneratorBundle, stage1: &Inverter) -> Result<(Inverter, MetricLog)> {
        let c = &self.config;
        let init = Inverter::refiner_from(stage1, c.refiner.clone(), c.seeds.run)?;
        let images = train_images(&self.domain(bundle, &c.ood)?);
        let (refiner, log) = train_two_stage(&c.stage2_run(), bundle, stage1, &init, &self.proxies, &images)?;
        inverter_checkpoint(&refiner, self.provenance(c.seeds.run))?.save(&self.path(REFINER))?;
        self.write("refiner.log.jsonl", log.to_jsonl().as_bytes())?;
        Ok((refiner, log))
    }

    /// One-stage model trained directly on the out-of-domain set.
    pub fn train_one_stage_model(&self, bundle: &GeneratorBundle) -> Result<(Inverter, MetricLog)> {
        let c = &self.config;
        let mean_w = bundle.mean_w(c.budgets.mean_w_samples, c.seeds.mean_w)?;
        let init = Inverter::new(c.stage1.clone(), c.generator.clone(), c.seeds.run, Some(&mean_w))?;
        let images = train_images(&self.domain(bundle, &c.ood)?);
        let run = refinestyle::inversion::TrainRun { seed: c.seeds.run, steps: c.budgets.stage2_steps, ..c.stage1_run() };
        let (inv, log) = train_one_stage(&run, bundle, &init, &self.proxies, &images)?;
        inverter_checkpoint(&inv, self.provenance(c.seeds.run))?.save(&self.path(INVERTER))?;
        self.write("inverter.log.jsonl", log.to_jsonl().as_bytes())?;
        Ok((inv, log))
    }

    pub fn models(&self) -> Result<Models> {
        match self.config.mode {
            Mode::OneStage => Ok(Models::OneStage(self.load_inverter(INVERTER)?)),
            Mode::TwoStage => Ok(Models::TwoStage { stage1: self.load_inverter(STAGE1)?, refiner: self.load_inverter(REFINER)? }),
        }
    }
}

pub fn train_images(d: &Domain) -> Vec<Tensor> {
    d.train.iter().map(|s| s.image.clone()).collect()
}

/// Paired comparison of refined against baseline reconstruction.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Comparison {
    pub baseline: Metrics,
    pub refined: Metrics,
    /// Images whose refined MSE is strictly lower.
    pub improved: usize,
    pub images: usize,
    /// `1 − refined / baseline` of the mean MSE.
    pub mean_reduction: f64,
}

pub fn compare(models: &Models, bundle: &GeneratorBundle, domain: &Domain, proxies: &Proxies) -> Result<Comparison> {
    let baseline = evaluate(&models.baseline(), bundle, &domain.test, proxies)?;
    let refined = evaluate(&models.model(), bundle, &domain.test, proxies)?;
    let improved = refined.per_image.iter().zip(&baseline.per_image).filter(|(r, b)| r.mse < b.mse).count();
    let mean_reduction = 1.0 - refined.mse / baseline.mse;
    Ok(Comparison { images: baseline.per_image.len(), baseline, refined, improved, mean_reduction })
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}
