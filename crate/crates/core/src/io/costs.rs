//! Analytic parameter and multiply-accumulate accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::InverterConfig;
use crate::error::Result;
use crate::generator::{GeneratorConfig, SlotKind};
use crate::refinement::{count_trainables, Scaling};

use super::config::{Mode, RunConfig};

pub fn linear_macs(inp: usize, out: usize) -> u64 {
    (inp * out) as u64
}

pub fn conv_macs(c_out: usize, c_in: usize, k: usize, h: usize, w: usize) -> u64 {
    (c_out * c_in * k * k * h * w) as u64
}

/// Q/K/V/O projections plus scores and weighted sum, for `tq` queries
/// of width `c` over `tk` keys of width `kv`.
pub fn attention_macs(tq: usize, tk: usize, c: usize, kv: usize) -> u64 {
    let proj = 2 * tq * c * c + 2 * tk * kv * c;
    (proj + 2 * tq * tk * c) as u64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub params: u64,
    pub trainable: u64,
    pub macs: u64,
}

impl ModuleCost {
    fn add(&mut self, params: u64, trainable: bool, macs: u64) {
        self.params += params;
        if trainable {
            self.trainable += params;
        }
        self.macs += macs;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    /// Keyed by parameter-name prefix.
    pub modules: BTreeMap<String, ModuleCost>,
    pub params: u64,
    pub trainable: u64,
    pub macs: u64,
}

impl ModelCost {
    fn from_modules(modules: BTreeMap<String, ModuleCost>) -> Self {
        let params = modules.values().map(|m| m.params).sum();
        let trainable = modules.values().map(|m| m.trainable).sum();
        let macs = modules.values().map(|m| m.macs).sum();
        ModelCost { modules, params, trainable, macs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub profile: String,
    /// Trainable scalars of per-domain adaptation: tokens plus scaling.
    pub adaptation_trainables: u64,
    pub generator: ModelCost,
    pub stage1: ModelCost,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner: Option<ModelCost>,
    /// Mean wall-clock of one inversion, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion_ms: Option<f64>,
}

/// Frozen generator at one forward pass per image.
pub fn generator_cost(cfg: &GeneratorConfig, refined: &[(usize, usize)], rank: usize) -> ModelCost {
    let d = cfg.style_dim;
    let mut m: BTreeMap<String, ModuleCost> = BTreeMap::new();
    let map = m.entry("mapping".into()).or_default();
    for _ in 0..cfg.mapping_depth {
        map.add((d * d + d) as u64, false, linear_macs(d, d));
    }
    m.entry("const".into()).or_default().add((cfg.channels[0] * 16) as u64, false, 0);
    let slots = cfg.slots();
    let n_conv = cfg.n_conv();
    let first_refined = n_conv - refined.len();
    let slot = m.entry("slot".into()).or_default();
    for s in &slots {
        let r = s.resolution;
        slot.add((s.c_in * d + s.c_in) as u64, false, linear_macs(d, s.c_in));
        match s.kind {
            SlotKind::Conv => {
                let k = (s.c_out * s.c_in * 9) as u64;
                // kernel modulation and demodulation
                slot.add(k + 1 + s.c_out as u64, false, 2 * k + conv_macs(s.c_out, s.c_in, 3, r, r));
                if s.conv_index.is_some_and(|c| c >= first_refined) {
                    slot.macs += (rank * s.c_out * s.c_in) as u64;
                }
            }
            SlotKind::ToRgb => {
                slot.add((3 * s.c_in + 3) as u64, false, conv_macs(3, s.c_in, 1, r, r));
            }
        }
    }
    ModelCost::from_modules(m)
}

fn block_cost(m: &mut ModuleCost, trainable: bool, cfg: &InverterConfig, dim: usize, kv: usize, tokens: usize, self_keys: usize, hw: usize) {
    let h = dim * cfg.ffn_mult;
    let params = 6 * dim + 4 * (dim * dim + dim) + 2 * (dim * dim + dim) + 2 * (dim * kv + dim) + (h * dim + h) + (dim * h + dim);
    // every token is projected once; scores only span its group
    let self_attn = (4 * tokens * dim * dim + 2 * tokens * self_keys * dim) as u64;
    let cross = attention_macs(tokens, hw, dim, kv);
    let ffn = (tokens * 2 * dim * h) as u64;
    m.add(params as u64, trainable, self_attn + cross + ffn);
}

/// Inverter cost per image. With grouping, each of the `T = 2·N_r·L` tokens
/// scores only the `L` tokens of its group, `T·L·C` instead of `T²·C`.
pub fn inverter_cost(cfg: &InverterConfig, gen: &GeneratorConfig) -> Result<ModelCost> {
    let res = gen.resolution();
    let mut m: BTreeMap<String, ModuleCost> = BTreeMap::new();
    let mut c_prev = cfg.in_channels;
    let enc = m.entry("enc".into()).or_default();
    for (s, &c) in cfg.encoder_channels.iter().enumerate() {
        let r = if s == 0 { res } else { res >> s };
        enc.add((c * c_prev * 9 + c) as u64, true, conv_macs(c, c_prev, 3, r, r));
        c_prev = c;
    }
    let pyramid = cfg.pyramid_shapes(res);
    for &(c, r) in &pyramid {
        m.entry("pos".into()).or_default().add((r * r * c) as u64, true, 0);
    }
    if cfg.predict_w {
        let (n_w, d) = (gen.n_w(), gen.style_dim);
        m.entry("w_init".into()).or_default().add((n_w * d) as u64, true, 0);
        let wb = m.entry("wblk".into()).or_default();
        for k in 0..cfg.blocks {
            let (kv, r) = pyramid[cfg.level_for_block(k)];
            block_cost(wb, true, cfg, d, kv, n_w, n_w, r * r);
        }
    }
    if cfg.n_r > 0 {
        let (c, l, n_r) = (cfg.token_dim, cfg.rank, cfg.n_r);
        let t = 2 * n_r * l;
        m.entry("tokens".into()).or_default().add((2 * n_r * l * c) as u64, true, 0);
        let keys = if cfg.grouping { l } else { t };
        let rb = m.entry("rblk".into()).or_default();
        for k in 0..cfg.blocks {
            let (kv, r) = pyramid[cfg.level_for_block(k)];
            block_cost(rb, true, cfg, c, kv, t, keys, r * r);
        }
        rb.add(2 * c as u64, true, 0);
        let slots = gen.refined_slots(n_r)?;
        let head = m.entry("head".into()).or_default();
        for s in &slots {
            head.add((s.c_out * c + s.c_out + s.c_in * c + s.c_in) as u64, true, (l * c * (s.c_out + s.c_in)) as u64);
        }
        let n_scale = match cfg.scaling {
            Scaling::Off => 0,
            Scaling::PerLayer => 2 * l * n_r,
            Scaling::Shared => 2 * l,
        };
        if n_scale > 0 {
            let scale_macs = (l * slots.iter().map(|s| s.c_out + s.c_in).sum::<usize>()) as u64;
            m.entry("scale".into()).or_default().add(n_scale as u64, cfg.learnable_factors, scale_macs);
        }
    }
    Ok(ModelCost::from_modules(m))
}

/// Analytic report; needs no weights.
pub fn report_costs(cfg: &RunConfig) -> Result<CostReport> {
    cfg.validate_structure()?;
    let fm = cfg.factor_model();
    let table = cfg.generator.channel_table(fm.n_r)?;
    let adaptation_trainables = count_trainables(&table, fm.rank, fm.scaling != Scaling::Off)?;
    let (stage1, refiner) = match cfg.mode {
        Mode::OneStage => (inverter_cost(&cfg.stage1, &cfg.generator)?, None),
        Mode::TwoStage => {
            let mut s1 = inverter_cost(&cfg.stage1, &cfg.generator)?;
            s1.trainable = 0;
            s1.modules.values_mut().for_each(|m| m.trainable = 0);
            (s1, Some(inverter_cost(&cfg.refiner, &cfg.generator)?))
        }
    };
    Ok(CostReport {
        profile: cfg.profile.clone(),
        adaptation_trainables,
        generator: generator_cost(&cfg.generator, &table, fm.rank),
        stage1,
        refiner,
        inversion_ms: None,
    })
}

/// Digits grouped in threes with commas.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{parameter_groups, Inverter};
    use crate::io::config::load_profile;

    #[test]
    fn formulas() {
        assert_eq!(linear_macs(128, 128), 16_384);
        assert_eq!(conv_macs(64, 64, 3, 8, 8), 64 * 64 * 9 * 64);
        assert_eq!(group_digits(2_982_400), "2,982,400");
        assert_eq!(group_digits(999), "999");
    }

    #[test]
    fn generator_conv_slot() {
        let cfg = GeneratorConfig { resolutions: vec![4, 8], channels: vec![64, 64], style_dim: 64, mapping_depth: 1, ..GeneratorConfig::default() };
        let s = cfg.slots().into_iter().find(|s| s.kind == SlotKind::Conv && s.resolution == 8 && !s.upsample).unwrap();
        assert_eq!(conv_macs(s.c_out, s.c_in, 3, s.resolution, s.resolution), 64 * 64 * 9 * 64);
    }

    #[test]
    fn matches_enumeration() {
        for name in ["desk-default", "desk-full", "desk-no-group-no-factor"] {
            let c = load_profile(name).unwrap();
            for inv_cfg in [&c.stage1, &c.refiner] {
                let inv = Inverter::new(inv_cfg.clone(), c.generator.clone(), 0, None).unwrap();
                let analytic = inverter_cost(inv_cfg, &c.generator).unwrap();
                let enumerated = parameter_groups(&inv);
                let a: BTreeMap<String, usize> = analytic.modules.iter().map(|(k, m)| (k.clone(), m.params as usize)).collect();
                assert_eq!(a, enumerated, "{name}");
                assert_eq!(analytic.trainable as usize, inv.params.trainable_numel(), "{name}");
            }
        }
    }

    #[test]
    fn generator_params_match_enumeration() {
        let cfg = load_profile("desk-default").unwrap().generator;
        let b = crate::generator::GeneratorBundle::fresh(cfg.clone(), 0).unwrap();
        let mut enumerated: BTreeMap<String, u64> = BTreeMap::new();
        for (name, t) in b.params.iter() {
            *enumerated.entry(name.split('.').next().unwrap().to_string()).or_default() += t.numel() as u64;
        }
        let analytic: BTreeMap<String, u64> = generator_cost(&cfg, &[], 1).modules.into_iter().map(|(k, m)| (k, m.params)).collect();
        assert_eq!(analytic, enumerated);
    }

    #[test]
    fn fullscale_accounting() {
        let r = report_costs(&load_profile("paper-fullscale-adapt").unwrap()).unwrap();
        assert_eq!(r.adaptation_trainables, 2_982_400);
    }

    #[test]
    fn grouping_reduces_attention_cost() {
        let c = load_profile("desk-full").unwrap();
        let grouped = inverter_cost(&c.refiner, &c.generator).unwrap();
        let flat = inverter_cost(&InverterConfig { grouping: false, ..c.refiner.clone() }, &c.generator).unwrap();
        assert!(grouped.modules["rblk"].macs < flat.modules["rblk"].macs);
        assert_eq!(grouped.params, flat.params);
    }
}
