//! Low-rank kernel residuals `ΔW = (A ⊙ P)ᵀ (B ⊙ Q)`, their application to
//! modulated kernels, parameter accounting and kernel spectra.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::generator::{modulate_kernel, GeneratorBundle, GeneratorConfig, Slot, SlotDeltas};
use crate::linalg;
use crate::tensor::{Bound, Graph, ParamStore, Rng, Scalar, Tensor, Var};

/// How the per-token scaling vectors are laid out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// No scaling vectors.
    Off,
    /// One `(A, B)` pair per refined layer.
    #[default]
    PerLayer,
    /// A single `(A, B)` pair shared by every layer.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorInit {
    pub p_std: f64,
    pub q_std: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FactorInit {
    fn default() -> Self {
        FactorInit { p_std: 0.02, q_std: 0.02, alpha: 1e-3, beta: 1e-3 }
    }
}

impl FactorInit {
    /// Exactly zero residual with nonzero gradient through `Q`.
    pub fn zero_q() -> Self {
        FactorInit { q_std: 0.0, ..Self::default() }
    }
}

/// Token matrices and scaling vectors for the refined conv slots.
///
/// Entries are named `"{slot}.p"` `[L, C_out]`, `"{slot}.q"` `[L, C_in]`,
/// and `"{slot}.a"`, `"{slot}.b"` `[L]` (or `"a"`, `"b"` when shared).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFactors<T: Scalar = f32> {
    pub slots: Vec<Slot>,
    pub rank: usize,
    pub scaling: Scaling,
    pub params: ParamStore<T>,
}

pub fn check_rank(slots: &[Slot], rank: usize) -> Result<()> {
    for s in slots {
        ensure!(
            rank <= s.c_out.min(s.c_in),
            "residual_factors",
            "L = {} exceeds min(C_out, C_in) = {} at slot {}",
            rank,
            s.c_out.min(s.c_in),
            s.index
        );
    }
    Ok(())
}

impl<T: Scalar> ResidualFactors<T> {
    pub fn new(config: &GeneratorConfig, n_r: usize, rank: usize, scaling: Scaling, init: &FactorInit, rng: &mut Rng) -> Result<Self> {
        let slots = config.refined_slots(n_r)?;
        check_rank(&slots, rank)?;
        let mut params = ParamStore::new();
        let randn = |std: f64, shape: Vec<usize>, rng: &mut Rng| -> Tensor<T> {
            if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                let n = shape.iter().product();
                Tensor::new(shape, rng.normal_vec(n, std).into_iter().map(T::from_f64).collect()).unwrap()
            }
        };
        for s in &slots {
            params.insert(format!("{}.p", s.index), randn(init.p_std, vec![rank, s.c_out], rng));
            params.insert(format!("{}.q", s.index), randn(init.q_std, vec![rank, s.c_in], rng));
            if scaling == Scaling::PerLayer {
                params.insert(format!("{}.a", s.index), Tensor::full([rank], T::from_f64(init.alpha)));
                params.insert(format!("{}.b", s.index), Tensor::full([rank], T::from_f64(init.beta)));
            }
        }
        if scaling == Scaling::Shared {
            params.insert("a", Tensor::full([rank], T::from_f64(init.alpha)));
            params.insert("b", Tensor::full([rank], T::from_f64(init.beta)));
        }
        Ok(ResidualFactors { slots, rank, scaling, params })
    }

    pub fn zeros(config: &GeneratorConfig, n_r: usize, rank: usize, scaling: Scaling) -> Result<Self> {
        let init = FactorInit { p_std: 0.0, q_std: 0.0, alpha: 1.0, beta: 1.0 };
        Self::new(config, n_r, rank, scaling, &init, &mut Rng::new(0))
    }

    /// Literal count of stored scalars.
    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    fn scale_names(&self, slot: usize) -> Option<(String, String)> {
        match self.scaling {
            Scaling::Off => None,
            Scaling::PerLayer => Some((format!("{slot}.a"), format!("{slot}.b"))),
            Scaling::Shared => Some(("a".into(), "b".into())),
        }
    }

    /// Row-scaled `(A ⊙ P, B ⊙ Q)` per refined slot.
    pub fn scale_tokens(&self) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g)?;
        self.slots
            .iter()
            .map(|s| {
                let (p, q) = self.scaled_graph(&mut g, &bound, s.index)?;
                Ok((g.tensor(p), g.tensor(q)))
            })
            .collect()
    }

    fn scaled_graph(&self, g: &mut Graph<T>, bound: &Bound, slot: usize) -> Result<(Var, Var)> {
        let p = bound.var(&format!("{slot}.p"))?;
        let q = bound.var(&format!("{slot}.q"))?;
        match self.scale_names(slot) {
            Some((a, b)) => {
                let (a, b) = (bound.var(&a)?, bound.var(&b)?);
                Ok((scale_rows_graph(g, p, a)?, scale_rows_graph(g, q, b)?))
            }
            None => Ok((p, q)),
        }
    }

    /// Composed residuals on an existing graph, keyed by w⁺ slot.
    pub fn deltas_graph(&self, g: &mut Graph<T>, bound: &Bound) -> Result<BTreeMap<usize, Var>> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            let (p, q) = self.scaled_graph(g, bound, s.index)?;
            out.insert(s.index, compose_graph(g, p, q)?);
        }
        Ok(out)
    }

    pub fn deltas(&self) -> Result<SlotDeltas<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g)?;
        let vars = self.deltas_graph(&mut g, &bound)?;
        Ok(vars.into_iter().map(|(k, v)| (k, g.tensor(v))).collect())
    }

    pub fn set_all(&mut self, suffix: &str, value: f64) {
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(suffix) {
                t.data_mut().fill(T::from_f64(value));
            }
        }
    }

    pub fn channel_table(&self) -> Vec<(usize, usize)> {
        self.slots.iter().map(|s| (s.c_out, s.c_in)).collect()
    }
}

/// Multiplies row `l` of `[.., L, C]` tokens by `scale[l]`.
pub fn scale_rows_graph<T: Scalar>(g: &mut Graph<T>, tokens: Var, scale: Var) -> Result<Var> {
    let l = g.shape(scale).to_vec();
    let st = g.shape(tokens).to_vec();
    ensure!(l.len() == 1 && st.len() >= 2 && st[st.len() - 2] == l[0], "scale_tokens", "scale {:?} does not match tokens {:?}", l, st);
    let col = g.reshape(scale, &[l[0], 1])?;
    g.mul(tokens, col)
}

/// `Pᵀ Q` for `[.., L, C_out]` and `[.., L, C_in]` → `[.., C_out, C_in]`.
pub fn compose_graph<T: Scalar>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    let (sp, sq) = (g.shape(p).to_vec(), g.shape(q).to_vec());
    ensure!(
        sp.len() == sq.len() && sp.len() >= 2 && sp[..sp.len() - 1] == sq[..sq.len() - 1],
        "compose_residual",
        "token shapes {:?} and {:?} disagree on L",
        sp,
        sq
    );
    let r = sp.len();
    let pt = g.transpose(p, r - 2, r - 1)?;
    g.matmul(pt, q)
}

pub fn compose_residual<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(p)?, g.constant(q)?);
    let d = compose_graph(&mut g, pv, qv)?;
    Ok(g.tensor(d))
}

/// `W^d[o, i, u, v] = W[o, i, u, v] + ΔW[o, i]`.
pub fn apply_residual<T: Scalar>(delta: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (sd, sw) = (delta.shape(), w.shape());
    ensure!(
        sd.len() == 2 && sw.len() == 4 && sw[0] == sd[0] && sw[1] == sd[1],
        "apply_residual",
        "residual {:?} does not match kernel {:?}",
        sd,
        sw
    );
    let taps = sw[2] * sw[3];
    let mut out = w.data().to_vec();
    for (chunk, &d) in out.chunks_mut(taps).zip(delta.data()) {
        chunk.iter_mut().for_each(|x| *x = *x + d);
    }
    Tensor::new(sw.to_vec(), out)
}

/// `Σ L·(C_out + C_in)`, plus `2L` per layer when scaling is included.
pub fn count_trainables(table: &[(usize, usize)], rank: usize, include_scaling: bool) -> Result<u64> {
    if table.is_empty() {
        return Err(Error::contract("count_trainables", "empty channel table"));
    }
    let l = rank as u64;
    let tokens: u64 = table.iter().map(|&(o, i)| l * (o + i) as u64).sum();
    let scaling = if include_scaling { 2 * l * table.len() as u64 } else { 0 };
    Ok(tokens + scaling)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub slot: usize,
    pub sigma: Vec<f64>,
    /// Running share of the singular-value sum.
    pub cumulative: Vec<f64>,
}

impl LayerSpectrum {
    pub fn from_sigma(slot: usize, sigma: Vec<f64>) -> Self {
        let total: f64 = sigma.iter().sum();
        let mut acc = 0.0;
        let cumulative = sigma
            .iter()
            .map(|s| {
                acc += s;
                if total > 0.0 { acc / total } else { 1.0 }
            })
            .collect();
        LayerSpectrum { slot, sigma, cumulative }
    }

    /// Share of the total carried by the leading `fraction` of values.
    pub fn top_share(&self, fraction: f64) -> f64 {
        let k = ((self.sigma.len() as f64 * fraction).ceil() as usize).clamp(1, self.sigma.len());
        self.cumulative[k - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub flattening: String,
    pub samples: usize,
    pub layers: Vec<LayerSpectrum>,
}

pub const FLATTENING: &str = "c_out x c_in*k*k";

impl SpectrumReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,index,sigma,cumulative_fraction\n");
        for l in &self.layers {
            for (i, (sig, c)) in l.sigma.iter().zip(&l.cumulative).enumerate() {
                writeln!(s, "{},{},{:.9e},{:.9}", l.slot, i, sig, c).unwrap();
            }
        }
        s
    }
}

/// Averaged singular spectra of the modulated conv kernels over sampled
/// latents.
pub fn kernel_spectrum(bundle: &GeneratorBundle, n_samples: usize, rng: &mut Rng) -> Result<SpectrumReport> {
    ensure!(n_samples >= 1, "kernel_spectrum", "need at least one sample");
    let cfg = &bundle.config;
    let convs = cfg.conv_slots();
    let mut sums: Vec<Vec<f64>> = convs.iter().map(|s| vec![0.0; s.c_out.min(s.c_in * 9)]).collect();
    for _ in 0..n_samples {
        let z = Tensor::randn([cfg.style_dim], 1.0, rng);
        let code = bundle.style_code(z.data())?;
        for (slot, acc) in convs.iter().zip(sums.iter_mut()) {
            let s = Tensor::new([slot.c_in], code.s[slot.index].clone())?;
            let w0 = bundle.params.get(&format!("slot.{}.kernel", slot.index))?;
            let w = modulate_kernel(&s, w0, cfg.demodulate)?;
            let sigma = linalg::singular_values(&w.to_f64_vec(), slot.c_out, slot.c_in * 9).map_err(|e| match e {
                Error::Numeric { detail, .. } => Error::numeric("kernel_spectrum", format!("layer {}: {detail}", slot.index)),
                other => other,
            })?;
            acc.iter_mut().zip(sigma).for_each(|(a, v)| *a += v);
        }
    }
    let layers = convs
        .iter()
        .zip(sums)
        .map(|(s, acc)| LayerSpectrum::from_sigma(s.index, acc.into_iter().map(|v| v / n_samples as f64).collect()))
        .collect();
    Ok(SpectrumReport { flattening: FLATTENING.into(), samples: n_samples, layers })
}
