//! Feature-pyramid encoder and transformer blocks that map images to w⁺
//! codes and to per-layer residual token factors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::generator::{GeneratorConfig, Slot};
use crate::refinement::{check_rank, compose_graph, scale_rows_graph, ResidualFactors, Scaling};
use crate::tensor::{Bound, Graph, ParamStore, Rng, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InverterConfig {
    /// 3 for image input, 6 for `[I, Î₀]`.
    pub in_channels: usize,
    /// Output channels of the four encoder stages.
    pub encoder_channels: Vec<usize>,
    /// Token width `C` of the residual branch.
    pub token_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub blocks: usize,
    pub n_r: usize,
    pub rank: usize,
    pub grouping: bool,
    pub scaling: Scaling,
    /// Initial value of every scaling entry.
    pub scale_init: f64,
    /// When false the scaling vectors stay frozen at `scale_init`.
    pub learnable_factors: bool,
    /// Predict w⁺ from learned queries (one-stage).
    pub predict_w: bool,
    /// Std multiplier for output projections, keeping blocks near identity.
    pub residual_init: f64,
}

impl Default for InverterConfig {
    fn default() -> Self {
        InverterConfig {
            in_channels: 3,
            encoder_channels: vec![32, 64, 128, 128],
            token_dim: 128,
            heads: 4,
            ffn_mult: 2,
            blocks: 3,
            n_r: 7,
            rank: 8,
            grouping: true,
            scaling: Scaling::PerLayer,
            scale_init: 1e-3,
            learnable_factors: true,
            predict_w: true,
            residual_init: 0.1,
        }
    }
}

impl InverterConfig {
    pub fn validate(&self, gen: &GeneratorConfig) -> Result<()> {
        let op = "inverter_config";
        ensure!(self.in_channels == 3 || self.in_channels == 6, op, "encoder input must have 3 or 6 channels, got {}", self.in_channels);
        ensure!(self.encoder_channels.len() == 4, op, "encoder needs 4 stages, got {}", self.encoder_channels.len());
        ensure!(gen.resolution() >= 8, op, "input resolution {} too small for the pyramid", gen.resolution());
        ensure!(self.heads > 0 && self.token_dim % self.heads == 0, op, "{} heads do not divide C = {}", self.heads, self.token_dim);
        ensure!(gen.style_dim % self.heads == 0, op, "{} heads do not divide style_dim = {}", self.heads, gen.style_dim);
        ensure!(self.blocks > 0, op, "need at least one block");
        ensure!(self.predict_w || self.n_r > 0, op, "inverter predicts neither w⁺ nor residuals");
        if self.n_r > 0 {
            ensure!(self.rank > 0, op, "L must be positive when N_r > 0");
            check_rank(&gen.refined_slots(self.n_r)?, self.rank)?;
        }
        Ok(())
    }

    /// `(channels, resolution)` of the three pyramid levels, finest first.
    pub fn pyramid_shapes(&self, resolution: usize) -> Vec<(usize, usize)> {
        (1..4).map(|s| (self.encoder_channels[s], resolution >> s)).collect()
    }

    /// Pyramid level attended by block `k`: coarsest for the first block.
    pub fn level_for_block(&self, k: usize) -> usize {
        2 - (k % 3)
    }
}

/// Encoder taps after stages 2 to 4, finest first, each `[B, C_k, h, w]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Trainable initial tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBank {
    /// `[N_r, L, C]`
    pub p: Option<Tensor>,
    /// `[N_r, L, C]`
    pub q: Option<Tensor>,
    /// `[N_w, style_dim]`
    pub w_init: Option<Tensor>,
}

/// Graph results of one inverter pass.
#[derive(Clone, Debug, Default)]
pub struct InverterOutput {
    /// `[B, N_w, D]`
    pub w_plus: Option<Var>,
    /// Per refined slot: scaled `P` `[B, L, C_out]` and `Q` `[B, L, C_in]`.
    pub factors: BTreeMap<usize, (Var, Var)>,
    /// Per refined slot: `ΔW` `[B, C_out, C_in]`.
    pub deltas: BTreeMap<usize, Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOpts {
    pub cross_attention: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts { cross_attention: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inverter {
    pub config: InverterConfig,
    pub generator: GeneratorConfig,
    pub params: ParamStore,
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

fn insert_linear(p: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize, std_mult: f64) {
    p.insert(format!("{name}.weight"), randn(rng, &[out, inp], std_mult / (inp as f64).sqrt()));
    p.insert(format!("{name}.bias"), Tensor::zeros([out]));
}

fn insert_norm(p: &mut ParamStore, name: &str, dim: usize) {
    p.insert(format!("{name}.gamma"), Tensor::full([dim], 1.0));
    p.insert(format!("{name}.beta"), Tensor::zeros([dim]));
}

fn insert_block(p: &mut ParamStore, rng: &mut Rng, prefix: &str, dim: usize, kv_dim: usize, cfg: &InverterConfig) {
    let r = cfg.residual_init;
    for n in ["norm1", "norm2", "norm3"] {
        insert_norm(p, &format!("{prefix}.{n}"), dim);
    }
    for n in ["q", "k", "v"] {
        insert_linear(p, rng, &format!("{prefix}.self.{n}"), dim, dim, 1.0);
    }
    insert_linear(p, rng, &format!("{prefix}.self.o"), dim, dim, r);
    insert_linear(p, rng, &format!("{prefix}.cross.q"), dim, dim, 1.0);
    insert_linear(p, rng, &format!("{prefix}.cross.k"), dim, kv_dim, 1.0);
    insert_linear(p, rng, &format!("{prefix}.cross.v"), dim, kv_dim, 1.0);
    insert_linear(p, rng, &format!("{prefix}.cross.o"), dim, dim, r);
    let h = dim * cfg.ffn_mult;
    insert_linear(p, rng, &format!("{prefix}.ffn.0"), h, dim, (2.0f64).sqrt());
    insert_linear(p, rng, &format!("{prefix}.ffn.1"), dim, h, r);
}

impl Inverter {
    /// Freshly initialized inverter. `mean_w` seeds the w⁺ queries.
    pub fn new(config: InverterConfig, generator: GeneratorConfig, seed: u64, mean_w: Option<&[f32]>) -> Result<Self> {
        config.validate(&generator)?;
        let root = Rng::new(seed);
        let mut p = ParamStore::new();
        let res = generator.resolution();
        let mut rng = root.fork(1);
        let mut c_prev = config.in_channels;
        for (s, &c) in config.encoder_channels.iter().enumerate() {
            p.insert(format!("enc.{s}.weight"), randn(&mut rng, &[c, c_prev, 3, 3], (2.0 / (9 * c_prev) as f64).sqrt()));
            p.insert(format!("enc.{s}.bias"), Tensor::zeros([c]));
            c_prev = c;
        }
        let pyramid = config.pyramid_shapes(res);
        let mut rng = root.fork(2);
        for (l, &(c, r)) in pyramid.iter().enumerate() {
            p.insert(format!("pos.{l}"), randn(&mut rng, &[r * r, c], 0.02));
        }
        if config.predict_w {
            let d = generator.style_dim;
            let n_w = generator.n_w();
            let w0 = match mean_w {
                Some(m) => {
                    ensure!(m.len() == d, "inverter", "mean w has {} entries, style_dim is {}", m.len(), d);
                    Tensor::new([n_w, d], m.iter().copied().cycle().take(n_w * d).collect())?
                }
                None => Tensor::zeros([n_w, d]),
            };
            p.insert("w_init", w0);
            let mut rng = root.fork(3);
            for k in 0..config.blocks {
                let kv = pyramid[config.level_for_block(k)].0;
                insert_block(&mut p, &mut rng, &format!("wblk.{k}"), d, kv, &config);
            }
        }
        if config.n_r > 0 {
            let (c, l) = (config.token_dim, config.rank);
            let mut rng = root.fork(4);
            p.insert("tokens.p", randn(&mut rng, &[config.n_r, l, c], 1.0));
            p.insert("tokens.q", randn(&mut rng, &[config.n_r, l, c], 1.0));
            let mut rng = root.fork(5);
            for k in 0..config.blocks {
                let kv = pyramid[config.level_for_block(k)].0;
                insert_block(&mut p, &mut rng, &format!("rblk.{k}"), c, kv, &config);
            }
            insert_norm(&mut p, "rblk.norm_out", c);
            for s in generator.refined_slots(config.n_r)? {
                let i = s.index;
                // P head starts at zero so ΔW = 0; Q head is a truncated identity.
                p.insert(format!("head.{i}.p.weight"), Tensor::zeros([s.c_out, c]));
                p.insert(format!("head.{i}.p.bias"), Tensor::zeros([s.c_out]));
                let mut q = Tensor::zeros([s.c_in, c]);
                for j in 0..s.c_in.min(c) {
                    q.data_mut()[j * c + j] = 1.0;
                }
                p.insert(format!("head.{i}.q.weight"), q);
                p.insert(format!("head.{i}.q.bias"), Tensor::zeros([s.c_in]));
            }
            let init = config.scale_init as f32;
            match config.scaling {
                Scaling::Off => {}
                Scaling::PerLayer => {
                    for s in generator.refined_slots(config.n_r)? {
                        p.insert(format!("scale.{}.a", s.index), Tensor::full([l], init));
                        p.insert(format!("scale.{}.b", s.index), Tensor::full([l], init));
                    }
                }
                Scaling::Shared => {
                    p.insert("scale.a", Tensor::full([l], init));
                    p.insert("scale.b", Tensor::full([l], init));
                }
            }
            if !config.learnable_factors {
                p.set_trainable("scale.", false);
            }
        }
        Ok(Inverter { config, generator, params: p })
    }

    /// Two-stage refiner seeded from a stage-1 inverter: encoder stages 2 to
    /// 4 and positional embeddings are copied; the input layer is fresh and
    /// takes 6 channels.
    pub fn refiner_from(stage1: &Inverter, mut config: InverterConfig, seed: u64) -> Result<Self> {
        config.in_channels = 6;
        config.predict_w = false;
        ensure!(stage1.config.encoder_channels == config.encoder_channels, "refiner_from", "encoder widths differ from the stage-1 inverter");
        let mut inv = Inverter::new(config, stage1.generator.clone(), seed, None)?;
        for (name, t) in stage1.params.iter() {
            let copy = (name.starts_with("enc.") && !name.starts_with("enc.0.")) || name.starts_with("pos.");
            if copy {
                let mut t = t.clone();
                t.set_requires_grad(true);
                *inv.params.get_mut(name)? = t;
            }
        }
        Ok(inv)
    }

    pub fn refined_slots(&self) -> Result<Vec<Slot>> {
        self.generator.refined_slots(self.config.n_r)
    }

    pub fn token_bank(&self) -> TokenBank {
        TokenBank {
            p: self.params.get("tokens.p").ok().cloned(),
            q: self.params.get("tokens.q").ok().cloned(),
            w_init: self.params.get("w_init").ok().cloned(),
        }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Full pass on a bound graph. `image` is `[B, in_channels, R, R]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, opts: ForwardOpts) -> Result<InverterOutput> {
        let pyr = encode_graph(&self.config, g, p, image, self.generator.resolution())?;
        let mut out = InverterOutput::default();
        if self.config.predict_w {
            out.w_plus = Some(invert_w_graph(&self.config, &self.generator, g, p, &pyr, opts)?);
        }
        if self.config.n_r > 0 {
            let (factors, deltas) = infer_residuals_graph(&self.config, &self.generator, g, p, &pyr, opts)?;
            out.factors = factors;
            out.deltas = deltas;
        }
        Ok(out)
    }

    /// Eager w⁺ for one `[3, R, R]` image.
    pub fn invert_w(&self, image: &Tensor) -> Result<Tensor> {
        ensure!(self.config.predict_w, "invert_w", "inverter has no w⁺ branch (two-stage configuration)");
        let (g, out) = self.eager(image)?;
        g.tensor(out.w_plus.expect("w⁺ branch present")).reshape([self.generator.n_w(), self.generator.style_dim])
    }

    /// Eager factors for one image, as standalone residual factors with the
    /// inverter's scaling vectors attached.
    pub fn infer_residuals(&self, image: &Tensor) -> Result<ResidualFactors> {
        ensure!(self.config.n_r > 0, "infer_residuals", "inverter has no residual branch");
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = self.image_var(&mut g, image)?;
        let pyr = encode_graph(&self.config, &mut g, &p, x, self.generator.resolution())?;
        let tokens = residual_tokens_graph(&self.config, &mut g, &p, &pyr, 1, ForwardOpts::default())?;
        let raw = project_heads_graph(&self.config, &self.generator, &mut g, &p, tokens)?;
        let mut params = ParamStore::new();
        for (slot, (pv, qv)) in &raw {
            params.insert(format!("{slot}.p"), g.tensor(*pv).reshape(g.shape(*pv)[1..].to_vec())?);
            params.insert(format!("{slot}.q"), g.tensor(*qv).reshape(g.shape(*qv)[1..].to_vec())?);
        }
        match self.config.scaling {
            Scaling::Off => {}
            Scaling::PerLayer => {
                for slot in raw.keys() {
                    params.insert(format!("{slot}.a"), self.params.get(&format!("scale.{slot}.a"))?.clone());
                    params.insert(format!("{slot}.b"), self.params.get(&format!("scale.{slot}.b"))?.clone());
                }
            }
            Scaling::Shared => {
                params.insert("a", self.params.get("scale.a")?.clone());
                params.insert("b", self.params.get("scale.b")?.clone());
            }
        }
        Ok(ResidualFactors { slots: self.refined_slots()?, rank: self.config.rank, scaling: self.config.scaling, params })
    }

    fn image_var(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let (c, r) = (self.config.in_channels, self.generator.resolution());
        ensure!(image.shape() == [c, r, r], "encode", "expected image [{}, {}, {}], got {:?}", c, r, r, image.shape());
        g.constant(&image.clone().reshape([1, c, r, r])?)
    }

    fn eager(&self, image: &Tensor) -> Result<(Graph, InverterOutput)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = self.image_var(&mut g, image)?;
        let out = self.forward(&mut g, &p, x, ForwardOpts::default())?;
        Ok((g, out))
    }

    /// Eager pyramid for one image.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = self.image_var(&mut g, image)?;
        let pyr = encode_graph(&self.config, &mut g, &p, x, self.generator.resolution())?;
        pyr.levels.iter().map(|&v| {
            let t = g.tensor(v);
            t.reshape(g.shape(v)[1..].to_vec())
        }).collect()
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.linear(x, p.var(&format!("{name}.weight"))?, Some(p.var(&format!("{name}.bias"))?))
}

/// `l2_normalize(x − mean) · √C · γ + β` over the last axis.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    let dim = g.shape(x)[rank - 1];
    let m = g.mean(x, &[rank - 1], true)?;
    let c = g.sub(x, m)?;
    let n = g.l2_normalize(c, 1e-5 * dim as f64)?;
    let n = g.scale(n, (dim as f64).sqrt())?;
    let y = g.mul(n, p.var(&format!("{name}.gamma"))?)?;
    g.add(y, p.var(&format!("{name}.beta"))?)
}

/// Encoder stages (3×3 conv + leaky ReLU; stride 2 after the first).
pub fn encode_graph<T: Scalar>(cfg: &InverterConfig, g: &mut Graph<T>, p: &Bound, image: Var, resolution: usize) -> Result<FeaturePyramid> {
    let s = g.shape(image).to_vec();
    ensure!(
        s.len() == 4 && (s[1] == 3 || s[1] == 6),
        "encode",
        "input must be [B, 3|6, R, R], got {:?}",
        s
    );
    ensure!(s[1] == cfg.in_channels, "encode", "encoder takes {} channels, input has {}", cfg.in_channels, s[1]);
    ensure!(s[2] == resolution && s[3] == resolution, "encode", "input {:?} is not {}×{}", s, resolution, resolution);
    let mut x = image;
    let mut levels = Vec::with_capacity(3);
    for st in 0..4 {
        let stride = if st == 0 { 1 } else { 2 };
        x = g.conv2d(x, p.var(&format!("enc.{st}.weight"))?, stride)?;
        let c = cfg.encoder_channels[st];
        let b = g.reshape(p.var(&format!("enc.{st}.bias"))?, &[1, c, 1, 1])?;
        x = g.add(x, b)?;
        x = g.leaky_relu(x)?;
        if st >= 1 {
            levels.push(x);
        }
    }
    Ok(FeaturePyramid { levels })
}

/// Multi-head scaled dot-product attention on `[N, T, C]` projections.
/// Scores are divided by `√C`.
fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    let (n, tq, c) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    let dh = c / heads;
    let split = |g: &mut Graph<T>, x: Var, t: usize| -> Result<Var> {
        let r = g.reshape(x, &[n, t, heads, dh])?;
        g.transpose(r, 1, 2)
    };
    let qh = split(g, q, tq)?;
    let kh = split(g, k, tk)?;
    let vh = split(g, v, tk)?;
    let kt = g.transpose(kh, 2, 3)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let o = g.matmul(attn, vh)?;
    let o = g.transpose(o, 1, 2)?;
    g.reshape(o, &[n, tq, c])
}

/// Self-attention within each group of `[B, G, L, C]` tokens.
pub fn grouped_self_attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    ensure!(s.len() == 4 && s[2] >= 1, "grouped_self_attention", "tokens must be [B, G, L, C] with L ≥ 1, got {:?}", s);
    let flat = g.reshape(x, &[s[0] * s[1], s[2], s[3]])?;
    let q = linear(g, p, &format!("{prefix}.q"), flat)?;
    let k = linear(g, p, &format!("{prefix}.k"), flat)?;
    let v = linear(g, p, &format!("{prefix}.v"), flat)?;
    let a = attend(g, q, k, v, heads)?;
    let o = linear(g, p, &format!("{prefix}.o"), a)?;
    g.reshape(o, &s)
}

/// Ungrouped self-attention over `[B, T, C]`, computed head by head.
pub fn standard_self_attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    ensure!(s.len() == 3, "standard_self_attention", "tokens must be [B, T, C], got {:?}", s);
    let c = s[2];
    let dh = c / heads;
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 2, h * dh, dh)?;
        let kh = g.narrow(k, 2, h * dh, dh)?;
        let vh = g.narrow(v, 2, h * dh, dh)?;
        let kt = g.transpose(kh, 1, 2)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (c as f64).sqrt())?;
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = g.concat(&outs, 2)?;
    linear(g, p, &format!("{prefix}.o"), cat)
}

/// All `[B, G, L, C]` tokens attend flattened features `[B, C_k, h, w]`.
pub fn cross_attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, feats: Var, pos: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let sf = g.shape(feats).to_vec();
    ensure!(s.len() == 4 && sf.len() == 4 && sf[0] == s[0], "cross_attention", "tokens {:?} and features {:?} disagree", s, sf);
    let (b, ck, hw) = (sf[0], sf[1], sf[2] * sf[3]);
    let t = s[1] * s[2];
    let tokens = g.reshape(x, &[b, t, s[3]])?;
    let f = g.reshape(feats, &[b, ck, hw])?;
    let f = g.transpose(f, 1, 2)?;
    let f = g.add(f, pos)?;
    let q = linear(g, p, &format!("{prefix}.q"), tokens)?;
    let k = linear(g, p, &format!("{prefix}.k"), f)?;
    let v = linear(g, p, &format!("{prefix}.v"), f)?;
    let a = attend(g, q, k, v, heads)?;
    let o = linear(g, p, &format!("{prefix}.o"), a)?;
    g.reshape(o, &s)
}

/// Pre-norm block: self-attention, cross-attention, feed-forward, each
/// with a residual connection. `x` is `[B, G, L, C]`; self-attention stays
/// inside groups.
#[allow(clippy::too_many_arguments)]
pub fn block_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    feats: Var,
    pos: Var,
    heads: usize,
    opts: ForwardOpts,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.norm1"), x)?;
    let a = grouped_self_attention(g, p, &format!("{prefix}.self"), h, heads)?;
    let mut x = g.add(x, a)?;
    if opts.cross_attention {
        let h = layer_norm(g, p, &format!("{prefix}.norm2"), x)?;
        let c = cross_attention(g, p, &format!("{prefix}.cross"), h, feats, pos, heads)?;
        x = g.add(x, c)?;
    }
    let h = layer_norm(g, p, &format!("{prefix}.norm3"), x)?;
    let f = linear(g, p, &format!("{prefix}.ffn.0"), h)?;
    let f = g.leaky_relu(f)?;
    let f = linear(g, p, &format!("{prefix}.ffn.1"), f)?;
    g.add(x, f)
}

fn expand_batch<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize) -> Result<Var> {
    let mut s = vec![b];
    s.extend(std::iter::repeat_n(1, g.shape(x).len()));
    let z = g.constant(&Tensor::zeros(s))?;
    g.add(z, x)
}

pub fn invert_w_graph<T: Scalar>(
    cfg: &InverterConfig,
    gen: &GeneratorConfig,
    g: &mut Graph<T>,
    p: &Bound,
    pyr: &FeaturePyramid,
    opts: ForwardOpts,
) -> Result<Var> {
    ensure!(cfg.predict_w, "invert_w", "inverter has no w⁺ branch (two-stage configuration)");
    let b = g.shape(pyr.levels[0])[0];
    let (n_w, d) = (gen.n_w(), gen.style_dim);
    let q0 = g.reshape(p.var("w_init")?, &[1, n_w, d])?;
    let mut x = expand_batch(g, q0, b)?;
    for k in 0..cfg.blocks {
        let lvl = cfg.level_for_block(k);
        x = block_graph(g, p, &format!("wblk.{k}"), x, pyr.levels[lvl], p.var(&format!("pos.{lvl}"))?, cfg.heads, opts)?;
    }
    g.reshape(x, &[b, n_w, d])
}

/// Updated token groups `[B, 2·N_r, L, C]`: the P stream's groups first.
pub fn residual_tokens_graph<T: Scalar>(
    cfg: &InverterConfig,
    g: &mut Graph<T>,
    p: &Bound,
    pyr: &FeaturePyramid,
    b: usize,
    opts: ForwardOpts,
) -> Result<Var> {
    let (n_r, l, c) = (cfg.n_r, cfg.rank, cfg.token_dim);
    let both = g.concat(&[p.var("tokens.p")?, p.var("tokens.q")?], 0)?;
    let mut x = expand_batch(g, both, b)?;
    let grouped_shape = [b, 2 * n_r, l, c];
    for k in 0..cfg.blocks {
        if !cfg.grouping {
            x = g.reshape(x, &[b, 1, 2 * n_r * l, c])?;
        }
        let lvl = cfg.level_for_block(k);
        x = block_graph(g, p, &format!("rblk.{k}"), x, pyr.levels[lvl], p.var(&format!("pos.{lvl}"))?, cfg.heads, opts)?;
        x = g.reshape(x, &grouped_shape)?;
    }
    layer_norm(g, p, "rblk.norm_out", x)
}

/// Per-slot heads: group `n` of the P stream to `[B, L, C_out]`, of the Q
/// stream to `[B, L, C_in]`.
pub fn project_heads_graph<T: Scalar>(
    cfg: &InverterConfig,
    gen: &GeneratorConfig,
    g: &mut Graph<T>,
    p: &Bound,
    tokens: Var,
) -> Result<BTreeMap<usize, (Var, Var)>> {
    let s = g.shape(tokens).to_vec();
    let slots = gen.refined_slots(cfg.n_r)?;
    ensure!(
        s.len() == 4 && s[1] == 2 * slots.len(),
        "project_heads",
        "{} token groups for a channel table of {} layers",
        s.get(1).copied().unwrap_or(0),
        slots.len()
    );
    let (b, l, c) = (s[0], s[2], s[3]);
    let mut out = BTreeMap::new();
    for (n, slot) in slots.iter().enumerate() {
        let take = |g: &mut Graph<T>, group: usize| -> Result<Var> {
            let t = g.narrow(tokens, 1, group, 1)?;
            g.reshape(t, &[b, l, c])
        };
        let tp = take(g, n)?;
        let tq = take(g, slots.len() + n)?;
        let i = slot.index;
        let pn = linear(g, p, &format!("head.{i}.p"), tp)?;
        let qn = linear(g, p, &format!("head.{i}.q"), tq)?;
        out.insert(i, (pn, qn));
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
pub fn infer_residuals_graph<T: Scalar>(
    cfg: &InverterConfig,
    gen: &GeneratorConfig,
    g: &mut Graph<T>,
    p: &Bound,
    pyr: &FeaturePyramid,
    opts: ForwardOpts,
) -> Result<(BTreeMap<usize, (Var, Var)>, BTreeMap<usize, Var>)> {
    let b = g.shape(pyr.levels[0])[0];
    let tokens = residual_tokens_graph(cfg, g, p, pyr, b, opts)?;
    let raw = project_heads_graph(cfg, gen, g, p, tokens)?;
    let mut factors = BTreeMap::new();
    let mut deltas = BTreeMap::new();
    for (slot, (pn, qn)) in raw {
        let (ps, qs) = match cfg.scaling {
            Scaling::Off => (pn, qn),
            Scaling::PerLayer => {
                let a = p.var(&format!("scale.{slot}.a"))?;
                let bv = p.var(&format!("scale.{slot}.b"))?;
                (scale_rows_graph(g, pn, a)?, scale_rows_graph(g, qn, bv)?)
            }
            Scaling::Shared => {
                let a = p.var("scale.a")?;
                let bv = p.var("scale.b")?;
                (scale_rows_graph(g, pn, a)?, scale_rows_graph(g, qn, bv)?)
            }
        };
        deltas.insert(slot, compose_graph(g, ps, qs)?);
        factors.insert(slot, (ps, qs));
    }
    Ok((factors, deltas))
}

/// Enumerated parameter count of the inverter, by name prefix.
pub fn parameter_groups(inv: &Inverter) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, t) in inv.params.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        *out.entry(group).or_insert(0) += t.numel();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_cfg() -> GeneratorConfig {
        GeneratorConfig { resolutions: vec![4, 8, 16], channels: vec![16, 16, 16], style_dim: 16, mapping_depth: 2, ..GeneratorConfig::default() }
    }

    fn inv_cfg() -> InverterConfig {
        InverterConfig { encoder_channels: vec![8, 16, 16, 16], token_dim: 16, n_r: 5, rank: 4, ..InverterConfig::default() }
    }

    fn image(seed: u64, c: usize, r: usize) -> Tensor {
        Tensor::randn([c, r, r], 0.5, &mut Rng::new(seed))
    }

    #[test]
    fn pyramid_shapes_for_default_input() {
        let gen = GeneratorConfig::default();
        let inv = Inverter::new(InverterConfig { n_r: 1, ..InverterConfig::default() }, gen, 0, None).unwrap();
        let pyr = inv.encode(&image(1, 3, 32)).unwrap();
        let shapes: Vec<_> = pyr.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![64, 16, 16], vec![128, 8, 8], vec![128, 4, 4]]);
    }

    #[test]
    fn encoder_rejects_other_channel_counts() {
        let inv = Inverter::new(inv_cfg(), gen_cfg(), 0, None).unwrap();
        assert!(inv.encode(&image(1, 4, 16)).unwrap_err().is_contract());
        assert!(InverterConfig { in_channels: 4, ..inv_cfg() }.validate(&gen_cfg()).is_err());
    }

    #[test]
    fn zero_image_pyramid_comes_from_biases() {
        let mut inv = Inverter::new(inv_cfg(), gen_cfg(), 0, None).unwrap();
        inv.params.get_mut("enc.0.bias").unwrap().data_mut().fill(0.5);
        let pyr = inv.encode(&Tensor::zeros([3, 16, 16])).unwrap();
        // away from the borders every position sees the same zero-padded input
        let lvl = &pyr[0];
        let (h, w) = (lvl.shape()[1], lvl.shape()[2]);
        let at = |c: usize, y: usize, x: usize| lvl.data()[(c * h + y) * w + x];
        assert_eq!(at(0, 3, 3), at(0, 4, 4));
        assert!(lvl.data().iter().any(|&v| v != 0.0));
    }

    fn bound_block(seed: u64, dim: usize) -> (ParamStore<f64>, InverterConfig) {
        let cfg = InverterConfig { token_dim: dim, ..inv_cfg() };
        let mut p = ParamStore::<f32>::new();
        insert_block(&mut p, &mut Rng::new(seed), "blk", dim, 16, &cfg);
        (p.cast(), cfg)
    }

    #[test]
    fn perturbing_one_group_leaves_others_bitwise() {
        let (params, cfg) = bound_block(1, 16);
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn([2, 4, 3, 16], 1.0, &mut rng);
        let mut x2 = x.clone();
        let stride = 3 * 16;
        for v in &mut x2.data_mut()[2 * stride..3 * stride] {
            *v += 0.7;
        }
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let p = params.bind(&mut g).unwrap();
            let xv = g.constant(x).unwrap();
            let f = g.constant(&Tensor::zeros([2, 16, 2, 2])).unwrap();
            let pos = g.constant(&Tensor::zeros([4, 16])).unwrap();
            let y = block_graph(&mut g, &p, "blk", xv, f, pos, cfg.heads, ForwardOpts { cross_attention: false }).unwrap();
            g.tensor(y)
        };
        let (a, b) = (run(&x), run(&x2));
        for batch in 0..2 {
            for grp in 0..4 {
                let off = (batch * 4 + grp) * stride;
                let same = a.data()[off..off + stride] == b.data()[off..off + stride];
                assert_eq!(same, (batch, grp) != (0, 2), "batch {batch} group {grp}");
            }
        }
    }

    #[test]
    fn single_group_matches_standard_attention() {
        let (params, cfg) = bound_block(3, 16);
        let x = Tensor::<f64>::randn([2, 1, 6, 16], 1.0, &mut Rng::new(4));
        let mut g = Graph::<f64>::new();
        let p = params.bind(&mut g).unwrap();
        let xv = g.constant(&x).unwrap();
        let grouped = grouped_self_attention(&mut g, &p, "blk.self", xv, cfg.heads).unwrap();
        let flat = g.reshape(xv, &[2, 6, 16]).unwrap();
        let standard = standard_self_attention(&mut g, &p, "blk.self", flat, cfg.heads).unwrap();
        let (a, b) = (g.tensor(grouped), g.tensor(standard));
        let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-6 * scale));
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let (params, cfg) = bound_block(5, 16);
        let x = Tensor::<f64>::randn([1, 3, 1, 16], 1.0, &mut Rng::new(6));
        let mut g = Graph::<f64>::new();
        let p = params.bind(&mut g).unwrap();
        let xv = g.constant(&x).unwrap();
        let a = grouped_self_attention(&mut g, &p, "blk.self", xv, cfg.heads).unwrap();
        let v = linear(&mut g, &p, "blk.self.v", xv).unwrap();
        let o = linear(&mut g, &p, "blk.self.o", v).unwrap();
        assert!(g.tensor(a).max_abs_diff(&g.tensor(o)) < 1e-12);
    }

    #[test]
    fn group_permutation_is_equivariant() {
        let (params, cfg) = bound_block(7, 16);
        let x = Tensor::<f64>::randn([1, 3, 4, 16], 1.0, &mut Rng::new(8));
        let stride = 4 * 16;
        let perm = [2usize, 0, 1];
        let mut xp = Tensor::<f64>::zeros([1, 3, 4, 16]);
        for (dst, &src) in perm.iter().enumerate() {
            xp.data_mut()[dst * stride..(dst + 1) * stride].copy_from_slice(&x.data()[src * stride..(src + 1) * stride]);
        }
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let p = params.bind(&mut g).unwrap();
            let xv = g.constant(x).unwrap();
            let y = grouped_self_attention(&mut g, &p, "blk.self", xv, cfg.heads).unwrap();
            g.tensor(y)
        };
        let (a, b) = (run(&x), run(&xp));
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&b.data()[dst * stride..(dst + 1) * stride], &a.data()[src * stride..(src + 1) * stride]);
        }
    }

    #[test]
    fn zero_value_projection_annihilates_cross_attention() {
        let (mut params, cfg) = bound_block(9, 16);
        params.get_mut("blk.cross.v.weight").unwrap().data_mut().fill(0.0);
        let mut rng = Rng::new(10);
        let x = Tensor::<f64>::randn([1, 2, 3, 16], 1.0, &mut rng);
        let f = Tensor::<f64>::randn([1, 16, 2, 2], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let p = params.bind(&mut g).unwrap();
        let (xv, fv) = (g.constant(&x).unwrap(), g.constant(&f).unwrap());
        let pos = g.constant(&Tensor::zeros([4, 16])).unwrap();
        let with = block_graph(&mut g, &p, "blk", xv, fv, pos, cfg.heads, ForwardOpts::default()).unwrap();
        let without = block_graph(&mut g, &p, "blk", xv, fv, pos, cfg.heads, ForwardOpts { cross_attention: false }).unwrap();
        assert!(g.tensor(with).max_abs_diff(&g.tensor(without)) < 1e-12);
    }

    #[test]
    fn uniform_features_make_attention_weights_irrelevant() {
        let (params, cfg) = bound_block(11, 16);
        let mut rng = Rng::new(12);
        let x = Tensor::<f64>::randn([1, 2, 3, 16], 1.0, &mut rng);
        let col = rng.normal_vec(16, 1.0);
        let f = Tensor::<f64>::from_f64([1, 16, 2, 2], &col.iter().flat_map(|&v| [v; 4]).collect::<Vec<_>>()).unwrap();
        let run = |params: &ParamStore<f64>| {
            let mut g = Graph::<f64>::new();
            let p = params.bind(&mut g).unwrap();
            let (xv, fv) = (g.constant(&x).unwrap(), g.constant(&f).unwrap());
            let pos = g.constant(&Tensor::zeros([4, 16])).unwrap();
            let y = cross_attention(&mut g, &p, "blk.cross", xv, fv, pos, cfg.heads).unwrap();
            g.tensor(y)
        };
        let mut other = params.clone();
        other.get_mut("blk.cross.q.weight").unwrap().data_mut().iter_mut().for_each(|v| *v *= -3.0);
        assert!(run(&params).max_abs_diff(&run(&other)) < 1e-12);
    }

    #[test]
    fn untrained_heads_give_zero_residuals() {
        let inv = Inverter::new(inv_cfg(), gen_cfg(), 3, None).unwrap();
        let f = inv.infer_residuals(&image(4, 3, 16)).unwrap();
        assert_eq!(f.slots.len(), 5);
        for d in f.deltas().unwrap().values() {
            assert!(d.data().iter().all(|&v| v == 0.0));
        }
        for s in &f.slots {
            assert_eq!(f.params.get(&format!("{}.p", s.index)).unwrap().shape(), &[4, s.c_out]);
            assert_eq!(f.params.get(&format!("{}.q", s.index)).unwrap().shape(), &[4, s.c_in]);
        }
    }

    #[test]
    fn square_q_head_starts_as_identity() {
        let inv = Inverter::new(inv_cfg(), gen_cfg(), 3, None).unwrap();
        let slot = inv.refined_slots().unwrap()[0].index;
        let w = inv.params.get(&format!("head.{slot}.q.weight")).unwrap();
        let tokens = Tensor::randn([2, 4, 16], 1.0, &mut Rng::new(1));
        let mut g = Graph::new();
        let p = inv.params.bind(&mut g).unwrap();
        let t = g.constant(&tokens).unwrap();
        let y = linear(&mut g, &p, &format!("head.{slot}.q"), t).unwrap();
        assert_eq!(w.shape(), &[16, 16]);
        assert_eq!(g.value(y), tokens.data());
    }

    #[test]
    fn head_table_mismatch_is_rejected() {
        let inv = Inverter::new(inv_cfg(), gen_cfg(), 3, None).unwrap();
        let mut g = Graph::new();
        let p = inv.params.bind(&mut g).unwrap();
        let t = g.constant(&Tensor::zeros([1, 6, 4, 16])).unwrap();
        assert!(project_heads_graph(&inv.config, &inv.generator, &mut g, &p, t).is_err());
    }

    #[test]
    fn untrained_w_branch_stays_near_queries() {
        let mean = vec![0.3f32; 16];
        let inv = Inverter::new(inv_cfg(), gen_cfg(), 5, Some(&mean)).unwrap();
        let w = inv.invert_w(&image(6, 3, 16)).unwrap();
        assert_eq!(w.shape(), &[8, 16]);
        let dev = w.data().iter().map(|v| (v - 0.3).abs()).fold(0.0f32, f32::max);
        assert!(dev < 1.5, "deviation {dev}");
        assert_eq!(inv.invert_w(&image(6, 3, 16)).unwrap(), w);
        let refiner = Inverter::refiner_from(&inv, inv_cfg(), 1).unwrap();
        assert!(refiner.invert_w(&image(6, 6, 16)).unwrap_err().is_contract());
    }

    #[test]
    fn refiner_copies_encoder_trunk() {
        let inv = Inverter::new(inv_cfg(), gen_cfg(), 5, None).unwrap();
        let r = Inverter::refiner_from(&inv, inv_cfg(), 9).unwrap();
        assert_eq!(r.params.get("enc.0.weight").unwrap().shape(), &[8, 6, 3, 3]);
        assert_eq!(r.params.get("enc.2.weight").unwrap().data(), inv.params.get("enc.2.weight").unwrap().data());
        assert!(!r.params.contains("w_init"));
    }

    #[test]
    fn residual_branch_receives_gradients() {
        let inv = Inverter::new(inv_cfg(), gen_cfg(), 5, None).unwrap();
        let mut g = Graph::new();
        let p = inv.params.bind(&mut g).unwrap();
        let x = g.constant(&image(1, 3, 16).reshape([1, 3, 16, 16]).unwrap()).unwrap();
        let out = inv.forward(&mut g, &p, x, ForwardOpts::default()).unwrap();
        let target = g.constant(&Tensor::full([1, 16, 16], 0.1)).unwrap();
        let slot = *out.deltas.keys().next().unwrap();
        let loss = g.mse(out.deltas[&slot], target).unwrap();
        let grads = g.backward(loss).unwrap();
        let gp = grads.get(p.var(&format!("head.{slot}.p.weight")).unwrap()).unwrap();
        assert!(gp.iter().any(|&v| v != 0.0));
    }
}
