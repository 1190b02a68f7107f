//! Run configuration: one JSON document with named profiles and dotted-path
//! overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adaptation::AdaptRun;
use crate::domain::Transform;
use crate::encoder::InverterConfig;
use crate::error::{ensure, Error, Result};
use crate::generator::GeneratorConfig;
use crate::inversion::{LossWeights, Stage, TrainRun};
use crate::refinement::{check_rank, Scaling};
use crate::tensor::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One network predicts w⁺ and the residual factors.
    OneStage,
    /// Frozen w⁺ inverter followed by a residual refiner.
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub transform: Transform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Fixture generator.
    pub fixture: u64,
    /// Stage-1 initialization and training order.
    pub stage1: u64,
    /// Refiner initialization, training order and adaptation.
    pub run: u64,
    /// Latents for the mean-w query initialization.
    pub mean_w: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub log_every: usize,
    pub mean_w_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub name: String,
    /// Pixel transform standing in for the target text direction.
    pub target: Transform,
    /// Samples used to estimate the source and target embeddings.
    pub spec_samples: usize,
    pub eval_samples: usize,
    /// Latents of the source and target embedding estimate.
    pub spec_seed: u64,
    /// Held-out latents of the cosine evaluation.
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneShotConfig {
    /// Latent seed of the reference image.
    pub reference_seed: u64,
    pub reference_transform: Transform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub mode: Mode,
    pub generator: GeneratorConfig,
    /// The one-stage model, or the frozen stage-1 inverter (`n_r = 0`).
    pub stage1: InverterConfig,
    /// Refiner of the two-stage model; ignored in one-stage mode.
    pub refiner: InverterConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub budgets: Budgets,
    pub seeds: Seeds,
    /// Training domain of the stage-1 inverter.
    pub domain: DomainConfig,
    /// Out-of-domain benchmark for the refiner.
    pub ood: DomainConfig,
    pub adapt: AdaptRun,
    pub text: TextConfig,
    pub oneshot: OneShotConfig,
}

pub const PROFILES: &[&str] = &[
    "paper-one-stage",
    "paper-two-stage",
    "ablation-no-group",
    "ablation-no-factor",
    "ablation-L8",
    "paper-fullscale-adapt",
    "desk-default",
    "desk-full",
    "desk-no-factor",
    "desk-no-group-no-factor",
    "desk-L8",
];

/// Generator used by every desk profile.
pub fn desk_generator() -> GeneratorConfig {
    GeneratorConfig { resolutions: vec![4, 8, 16], channels: vec![32, 32, 32], style_dim: 32, mapping_depth: 2, ..GeneratorConfig::default() }
}

fn desk_stage1() -> InverterConfig {
    InverterConfig { encoder_channels: vec![16, 32, 32, 32], token_dim: 32, heads: 4, blocks: 3, n_r: 0, rank: 0, ..InverterConfig::default() }
}

fn refiner_of(stage1: &InverterConfig, n_r: usize, rank: usize) -> InverterConfig {
    InverterConfig { in_channels: 6, n_r, rank, predict_w: false, ..stage1.clone() }
}

fn base(profile: &str, generator: GeneratorConfig, stage1: InverterConfig, refiner: InverterConfig) -> RunConfig {
    RunConfig {
        profile: profile.into(),
        mode: Mode::TwoStage,
        generator,
        stage1,
        refiner,
        weights: LossWeights::default(),
        optimizer: OptimizerConfig::ranger(1e-3),
        budgets: Budgets { stage1_steps: 3000, stage2_steps: 2000, batch: 8, log_every: 50, mean_w_samples: 10_000 },
        seeds: Seeds { fixture: 0, stage1: 1, run: 7, mean_w: 1 },
        domain: DomainConfig { seed: 1, n_train: 512, n_test: 16, transform: Transform::Identity },
        ood: DomainConfig { seed: 2, n_train: 256, n_test: 64, transform: Transform::Contrast { factor: 1.5 } },
        adapt: AdaptRun::default(),
        text: TextConfig { name: "high-contrast".into(), target: Transform::Contrast { factor: 1.5 }, spec_samples: 256, eval_samples: 64, spec_seed: 5, eval_seed: 0x4556 },
        oneshot: OneShotConfig { reference_seed: 0x5245_4600, reference_transform: Transform::Contrast { factor: 1.5 } },
    }
}

fn paper(profile: &str, mode: Mode, n_r: usize, rank: usize, grouping: bool, learnable: bool) -> RunConfig {
    let s1 = InverterConfig { encoder_channels: vec![64, 128, 256, 512], token_dim: 512, heads: 8, n_r: 0, rank: 0, ..InverterConfig::default() };
    let (stage1, refiner) = match mode {
        Mode::OneStage => (InverterConfig { n_r, rank, grouping, learnable_factors: learnable, ..s1.clone() }, refiner_of(&s1, 1, 1)),
        Mode::TwoStage => {
            let r = InverterConfig { grouping, learnable_factors: learnable, ..refiner_of(&s1, n_r, rank) };
            (s1, r)
        }
    };
    RunConfig { mode, ..base(profile, GeneratorConfig::stylegan2_1024(), stage1, refiner) }
}

fn desk(profile: &str, rank: usize, grouping: bool, learnable: bool) -> RunConfig {
    let gen = desk_generator();
    let s1 = desk_stage1();
    let refiner = InverterConfig { grouping, learnable_factors: learnable, scale_init: 1e-2, ..refiner_of(&s1, gen.n_conv(), rank) };
    base(profile, gen, s1, refiner)
}

/// Resolves a named profile to a concrete configuration.
pub fn load_profile(name: &str) -> Result<RunConfig> {
    Ok(match name {
        "paper-one-stage" => paper(name, Mode::OneStage, 10, 32, true, true),
        "paper-two-stage" => paper(name, Mode::TwoStage, 17, 32, true, true),
        "ablation-no-group" => paper(name, Mode::OneStage, 10, 32, false, false),
        "ablation-no-factor" => paper(name, Mode::OneStage, 10, 32, true, false),
        "ablation-L8" => paper(name, Mode::OneStage, 10, 8, false, false),
        "paper-fullscale-adapt" => paper(name, Mode::TwoStage, 17, 256, true, true),
        "desk-default" => desk(name, 8, true, true),
        "desk-full" => desk(name, 32, true, true),
        "desk-no-factor" => desk(name, 32, true, false),
        "desk-no-group-no-factor" => desk(name, 32, false, false),
        "desk-L8" => desk(name, 8, false, false),
        _ => return Err(Error::contract("profile", format!("unknown profile `{name}`; available: {}", PROFILES.join(", ")))),
    })
}

/// Parses `key=value`; the value is JSON when it parses, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::contract("config", format!("override `{s}` is not key=value")))?;
    ensure!(!k.is_empty(), "config", "override `{}` has an empty key", s);
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Sets a dotted path that must already exist in `doc`.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    for part in path.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::contract("config", format!("unknown config key `{path}`")))?;
    }
    *cur = value;
    Ok(())
}

fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::contract("config", format!("unknown config key `{p}`"))),
                }
            }
        }
        (d, s) => *d = s,
    }
    Ok(())
}

impl RunConfig {
    /// A config document: either a complete configuration, or an object
    /// naming a `profile` whose other keys override that profile.
    pub fn from_value(v: Value) -> Result<Self> {
        let name = v.get("profile").and_then(Value::as_str).map(str::to_string);
        let doc = match name {
            Some(n) => {
                let mut doc = serde_json::to_value(load_profile(&n)?)?;
                merge(&mut doc, v, "")?;
                doc
            }
            None => v,
        };
        serde_json::from_value(doc).map_err(|e| Error::contract("config", e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::contract("config", format!("invalid JSON: {e}")))?;
        Self::from_value(v)
    }

    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (k, v) in overrides {
            set_path(&mut doc, k, v.clone())?;
        }
        serde_json::from_value(doc).map_err(|e| Error::contract("config", e.to_string()))
    }

    /// Inverter carrying the residual factors.
    pub fn factor_model(&self) -> &InverterConfig {
        match self.mode {
            Mode::OneStage => &self.stage1,
            Mode::TwoStage => &self.refiner,
        }
    }

    /// Structural checks shared by every command.
    pub fn validate_structure(&self) -> Result<()> {
        self.generator.validate()?;
        let m = self.factor_model();
        let n_conv = self.generator.n_conv();
        ensure!(m.n_r <= n_conv, "config", "N_r = {} exceeds the {} conv slots of the generator; lower N_r", m.n_r, n_conv);
        ensure!(m.n_r > 0, "config", "N_r must be at least 1");
        ensure!(m.rank > 0, "config", "L must be at least 1");
        self.weights.validate()?;
        ensure!(self.budgets.batch > 0 && self.budgets.log_every > 0, "config", "batch and log interval must be positive");
        ensure!(self.budgets.mean_w_samples > 0, "config", "mean_w_samples must be positive");
        Ok(())
    }

    /// Full validation for commands that build models.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let m = self.factor_model();
        let slots = self.generator.refined_slots(m.n_r)?;
        check_rank(&slots, m.rank).map_err(|e| Error::contract("config", format!("{e}; lower L or N_r")))?;
        self.stage1.validate(&self.generator)?;
        if self.mode == Mode::TwoStage {
            ensure!(self.stage1.n_r == 0, "config", "the two-stage stage-1 inverter must have N_r = 0");
            self.refiner.validate(&self.generator)?;
        }
        self.adapt.validate()
    }

    pub fn stage1_run(&self) -> TrainRun {
        TrainRun {
            stage: Stage::One,
            steps: self.budgets.stage1_steps,
            batch: self.budgets.batch,
            optimizer: self.optimizer,
            seed: self.seeds.stage1,
            log_every: self.budgets.log_every,
            weights: self.weights,
            dump_dir: None,
        }
    }

    pub fn stage2_run(&self) -> TrainRun {
        TrainRun { stage: Stage::Two, steps: self.budgets.stage2_steps, seed: self.seeds.run, ..self.stage1_run() }
    }

    /// Whether the factor model carries scaling vectors.
    pub fn has_scaling(&self) -> bool {
        self.factor_model().scaling != Scaling::Off
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_profile_resolves() {
        for name in PROFILES {
            let c = load_profile(name).unwrap();
            assert_eq!(&c.profile, name);
            c.validate_structure().unwrap();
            let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
            if *name != "paper-fullscale-adapt" {
                c.validate().unwrap();
            }
        }
    }

    #[test]
    fn table_rows() {
        let two = load_profile("paper-two-stage").unwrap();
        let m = two.factor_model();
        assert_eq!((m.n_r, m.rank, m.grouping, m.learnable_factors), (17, 32, true, true));
        let one = load_profile("paper-one-stage").unwrap();
        assert_eq!((one.factor_model().n_r, one.factor_model().rank), (10, 32));
        assert_eq!(load_profile("ablation-L8").unwrap().factor_model().rank, 8);
        let nf = load_profile("ablation-no-factor").unwrap();
        assert!(nf.factor_model().grouping && !nf.factor_model().learnable_factors);
        let ng = load_profile("ablation-no-group").unwrap();
        assert!(!ng.factor_model().grouping);
        let d = load_profile("desk-default").unwrap();
        assert_eq!((d.factor_model().n_r, d.factor_model().rank), (d.generator.n_conv(), 8));
    }

    #[test]
    fn unknown_profile_lists_names() {
        let e = load_profile("nope").unwrap_err().to_string();
        assert!(e.contains("desk-default") && e.contains("paper-two-stage"));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = load_profile("desk-default").unwrap();
        let o = c.with_overrides(&[parse_override("refiner.rank=4").unwrap(), parse_override("text.name=sketch").unwrap()]).unwrap();
        assert_eq!(o.refiner.rank, 4);
        assert_eq!(o.text.name, "sketch");
        assert!(c.with_overrides(&[parse_override("refiner.nope=1").unwrap()]).unwrap_err().is_contract());
        assert!(RunConfig::from_json(r#"{"profile": "desk-default", "budgets": {"batch": 2}}"#).unwrap().budgets.batch == 2);
        assert!(RunConfig::from_json(r#"{"profile": "desk-default", "bogus": 1}"#).is_err());
        let mut v = serde_json::to_value(&c).unwrap();
        v["refiner"].as_object_mut().unwrap().insert("extra".into(), Value::Bool(true));
        assert!(RunConfig::from_value(v).is_err());
    }

    #[test]
    fn validation_messages() {
        let c = load_profile("desk-default").unwrap();
        let big_l = c.with_overrides(&[("refiner.rank".into(), Value::from(64))]).unwrap();
        let e = big_l.validate().unwrap_err();
        assert!(e.is_contract() && e.to_string().contains("lower L"));
        let big_n = c.with_overrides(&[("refiner.n_r".into(), Value::from(6))]).unwrap();
        let e = big_n.validate_structure().unwrap_err();
        assert!(e.to_string().contains("exceeds the 5 conv slots"));
        assert!(load_profile("paper-fullscale-adapt").unwrap().validate().is_err());
    }
}
