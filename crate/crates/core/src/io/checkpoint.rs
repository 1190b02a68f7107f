//! `RFSK` checkpoint container: magic, version, JSON header, 64-byte
//! aligned little-endian payload.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"RFSK";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub git_describe: String,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

impl Provenance {
    pub fn now(seed: u64) -> Self {
        let git_describe = std::process::Command::new("git")
            .args(["describe", "--always", "--dirty"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
            .unwrap_or_else(|| "unknown".into());
        let created = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Provenance { seed, git_describe, created }
    }

    /// Fixed provenance for reproducible artifacts.
    pub fn fixed(seed: u64) -> Self {
        Provenance { seed, git_describe: "unknown".into(), created: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    tensors: IndexMap<String, TensorEntry>,
    config: serde_json::Value,
    provenance: Provenance,
}

/// Named tensors plus a config blob describing what they parameterize.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `generator`, `inverter` or `factors`.
    pub kind: String,
    pub config: serde_json::Value,
    pub provenance: Provenance,
    pub params: ParamStore,
}

fn pad_to(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = IndexMap::new();
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let length = t.numel() * 4;
            tensors.insert(
                name.to_string(),
                TensorEntry { dtype: "f32".into(), shape: t.shape().to_vec(), offset: offset as u64, length: length as u64, trainable: t.requires_grad() },
            );
            offset = pad_to(offset + length);
        }
        let header = Header { kind: self.kind.clone(), tensors, config: self.config.clone(), provenance: self.provenance.clone() };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(pad_to(16 + json.len()) + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(pad_to(out.len()), 0);
        let base = out.len();
        for (name, t) in self.params.iter() {
            let e = &header.tensors[name];
            out.resize(base + e.offset as usize, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(base + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fmt("missing RFSK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend]).map_err(|e| fmt(&format!("bad header: {e}")))?;
        let base = pad_to(hend);
        let payload = bytes.get(base..).ok_or_else(|| fmt("payload missing"))?;
        let mut spans: Vec<(u64, u64)> = header.tensors.values().map(|e| (e.offset, e.length)).collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err(fmt("overlapping tensor spans"));
            }
        }
        let mut params = ParamStore::new();
        for (name, e) in &header.tensors {
            if e.dtype != "f32" {
                return Err(fmt(&format!("tensor `{name}` has unsupported dtype {}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length as usize != numel * 4 {
                return Err(fmt(&format!("tensor `{name}` length {} does not match shape {:?}", e.length, e.shape)));
            }
            let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
            let raw = payload.get(start..end).ok_or_else(|| fmt(&format!("tensor `{name}` lies outside the payload")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let mut t = Tensor::new(e.shape.clone(), data)?;
            t.set_requires_grad(e.trainable);
            params.insert_raw(name.clone(), t);
        }
        Ok(Checkpoint { kind: header.kind, config: header.config, provenance: header.provenance, params })
    }

    /// Atomic write through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        ensure!(self.kind == kind, "checkpoint", "expected a {} checkpoint, found {}", kind, self.kind);
        Ok(())
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::randn([3, 5], 1.0, &mut Rng::new(1)));
        p.insert_raw("b", Tensor::new([2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        p.insert("c", Tensor::zeros([17]));
        Checkpoint { kind: "factors".into(), config: serde_json::json!({"rank": 4}), provenance: Provenance::fixed(9), params: p }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params.get("b").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn payload_is_aligned() {
        let bytes = sample().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert!(header.tensors.values().all(|e| e.offset % ALIGN as u64 == 0));
        assert_eq!(pad_to(16 + hlen) % ALIGN, 0);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE0000000000000000"), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 64]), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/ckpt.rfsk");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(c.expect_kind("generator").unwrap_err().is_contract());
    }
}
