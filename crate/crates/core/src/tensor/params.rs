use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::{Gradients, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named tensors forming one model's weights.
///
/// Trainability is the tensor's `requires_grad` flag: frozen entries enter a
/// graph as constants and never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

/// Graph handles for every entry of a [`ParamStore`], keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("param", format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    /// Adds a trainable entry.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) {
        t.set_requires_grad(true);
        self.entries.insert(name.into(), t);
    }

    /// Adds an entry preserving its `requires_grad` flag.
    pub fn insert_raw(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract("param", format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract("param", format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries.values().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// Sets trainability of every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for (k, t) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                t.set_requires_grad(on);
            }
        }
    }

    pub fn freeze(&mut self) {
        self.set_trainable("", false);
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Inserts every entry into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.entries.len());
        for (k, t) in &self.entries {
            vars.insert(k.clone(), g.leaf(t)?);
        }
        Ok(Bound { vars })
    }

    /// Per-entry gradients from one reverse pass, in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.entries
            .keys()
            .map(|k| bound.vars.get(k).and_then(|&v| grads.get(v)).map(<[T]>::to_vec))
            .collect()
    }

    /// Adds `scale · grads` (as returned by [`collect_grads`]) into the
    /// gradient buffers of trainable entries.
    ///
    /// [`collect_grads`]: ParamStore::collect_grads
    pub fn accumulate(&mut self, grads: &[Option<Vec<T>>], scale: f64) -> Result<()> {
        let s = T::from_f64(scale);
        for ((name, t), g) in self.entries.iter_mut().zip(grads) {
            if let Some(g) = g {
                if !t.requires_grad() {
                    return Err(Error::contract(
                        "accumulate",
                        format!("frozen parameter `{name}` received a gradient"),
                    ));
                }
                let scaled: Vec<T> = g.iter().map(|&v| v * s).collect();
                t.accumulate_grad(&scaled)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.entries {
            h.update(k.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
            t.data().iter().for_each(|&v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, t) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), t.clone());
        }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

/// Sums per-sample gradient sets in order; `None` entries stay absent.
pub fn sum_grads<T: Scalar>(sets: Vec<Vec<Option<Vec<T>>>>) -> Vec<Option<Vec<T>>> {
    let mut iter = sets.into_iter();
    let Some(mut acc) = iter.next() else { return Vec::new() };
    for set in iter {
        for (a, b) in acc.iter_mut().zip(set) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.iter_mut().zip(y).for_each(|(p, q)| *p = *p + q),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }
    acc
}
