//! Artifact formats: checkpoints, configuration, PNG images, cost reports.

pub mod checkpoint;
pub mod config;
pub mod costs;
pub mod image;

use serde::{Deserialize, Serialize};

use crate::encoder::{Inverter, InverterConfig};
use crate::error::{Error, Result};
use crate::generator::{GeneratorBundle, GeneratorConfig, Slot};
use crate::refinement::{ResidualFactors, Scaling};

pub use checkpoint::{Checkpoint, Provenance};
pub use config::{load_profile, RunConfig};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InverterBlob {
    inverter: InverterConfig,
    generator: GeneratorConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorsBlob {
    slots: Vec<Slot>,
    rank: usize,
    scaling: Scaling,
}

fn blob<T: for<'de> Deserialize<'de>>(c: &Checkpoint) -> Result<T> {
    serde_json::from_value(c.config.clone()).map_err(|e| Error::format(format!("{} checkpoint config: {e}", c.kind)))
}

pub fn generator_checkpoint(b: &GeneratorBundle, provenance: Provenance) -> Result<Checkpoint> {
    Ok(Checkpoint { kind: "generator".into(), config: serde_json::to_value(&b.config)?, provenance, params: b.params.clone() })
}

pub fn generator_from(c: &Checkpoint) -> Result<GeneratorBundle> {
    c.expect_kind("generator")?;
    let config: GeneratorConfig = blob(c)?;
    config.validate()?;
    let fresh = GeneratorBundle::fresh(config.clone(), 0)?;
    check_layout(&fresh.params, &c.params)?;
    Ok(GeneratorBundle { config, params: c.params.clone() })
}

pub fn inverter_checkpoint(inv: &Inverter, provenance: Provenance) -> Result<Checkpoint> {
    let config = serde_json::to_value(InverterBlob { inverter: inv.config.clone(), generator: inv.generator.clone() })?;
    Ok(Checkpoint { kind: "inverter".into(), config, provenance, params: inv.params.clone() })
}

pub fn inverter_from(c: &Checkpoint) -> Result<Inverter> {
    c.expect_kind("inverter")?;
    let b: InverterBlob = blob(c)?;
    let fresh = Inverter::new(b.inverter.clone(), b.generator.clone(), 0, None)?;
    check_layout(&fresh.params, &c.params)?;
    Ok(Inverter { config: b.inverter, generator: b.generator, params: c.params.clone() })
}

pub fn factors_checkpoint(f: &ResidualFactors, provenance: Provenance) -> Result<Checkpoint> {
    let config = serde_json::to_value(FactorsBlob { slots: f.slots.clone(), rank: f.rank, scaling: f.scaling })?;
    Ok(Checkpoint { kind: "factors".into(), config, provenance, params: f.params.clone() })
}

pub fn factors_from(c: &Checkpoint) -> Result<ResidualFactors> {
    c.expect_kind("factors")?;
    let b: FactorsBlob = blob(c)?;
    Ok(ResidualFactors { slots: b.slots, rank: b.rank, scaling: b.scaling, params: c.params.clone() })
}

/// Same names in the same order with the same shapes.
fn check_layout(expected: &crate::tensor::ParamStore, got: &crate::tensor::ParamStore) -> Result<()> {
    let a: Vec<_> = expected.iter().map(|(n, t)| (n, t.shape())).collect();
    let b: Vec<_> = got.iter().map(|(n, t)| (n, t.shape())).collect();
    if a != b {
        let missing = a.iter().find(|x| !b.contains(x)).or_else(|| b.iter().find(|x| !a.contains(x)));
        return Err(Error::format(format!("checkpoint tensors do not match the stored config (first mismatch: {:?})", missing)));
    }
    Ok(())
}
