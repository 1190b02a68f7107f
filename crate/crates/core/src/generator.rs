//! Miniature style-based generator: mapping MLP, per-slot affine styles,
//! modulated 3×3 convolutions with an additive kernel hook, and a toRGB skip
//! path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Bound, Graph, ParamStore, Rng, Scalar, Tensor, Var};

pub const DEMOD_EPS: f64 = 1e-8;

/// Where the residual enters relative to demodulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemodOrder {
    /// Demodulate the modulated kernel, then add the residual.
    Before,
    /// Add the residual, then demodulate the sum.
    #[default]
    After,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub style_dim: usize,
    pub mapping_depth: usize,
    pub demodulate: bool,
    pub noise_injection: bool,
    pub demod_order: DemodOrder,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolutions: vec![4, 8, 16, 32],
            channels: vec![64, 64, 32, 16],
            style_dim: 128,
            mapping_depth: 4,
            demodulate: true,
            noise_injection: false,
            demod_order: DemodOrder::After,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Conv,
    ToRgb,
}

/// One modulated layer. `index` is its row in w⁺.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub index: usize,
    pub kind: SlotKind,
    pub c_in: usize,
    pub c_out: usize,
    pub resolution: usize,
    /// Position among conv slots, for conv slots.
    pub conv_index: Option<usize>,
    /// Input is upsampled before this conv.
    pub upsample: bool,
}

impl GeneratorConfig {
    /// Public 1024² channel schedule (17 convs). Used for accounting only.
    pub fn stylegan2_1024() -> Self {
        GeneratorConfig {
            resolutions: vec![4, 8, 16, 32, 64, 128, 256, 512, 1024],
            channels: vec![512, 512, 512, 512, 512, 256, 128, 64, 32],
            style_dim: 512,
            mapping_depth: 8,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "generator_config";
        ensure!(!self.resolutions.is_empty(), op, "no resolutions");
        ensure!(self.resolutions[0] == 4, op, "resolutions must start at 4, got {}", self.resolutions[0]);
        for w in self.resolutions.windows(2) {
            ensure!(w[1] == 2 * w[0], op, "resolutions must double, got {} then {}", w[0], w[1]);
        }
        ensure!(
            self.channels.len() == self.resolutions.len(),
            op,
            "{} channel entries for {} resolutions",
            self.channels.len(),
            self.resolutions.len()
        );
        ensure!(self.channels.iter().all(|&c| c > 0), op, "channel extents must be positive");
        for w in self.channels.windows(2) {
            ensure!(w[1] <= w[0], op, "channels must be non-increasing, got {:?}", self.channels);
        }
        ensure!(self.style_dim > 0, op, "style_dim must be positive");
        ensure!(self.mapping_depth > 0, op, "mapping_depth must be positive");
        Ok(())
    }

    pub fn n_conv(&self) -> usize {
        1 + 2 * (self.resolutions.len() - 1)
    }

    pub fn n_w(&self) -> usize {
        self.n_conv() + self.resolutions.len()
    }

    pub fn resolution(&self) -> usize {
        *self.resolutions.last().unwrap()
    }

    /// Slots in execution order: conv@4, rgb@4, then per resolution
    /// (upsampling conv, conv, rgb).
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.n_w());
        let mut conv = 0;
        let mut push = |out: &mut Vec<Slot>, kind, c_in, c_out, resolution, upsample| {
            let conv_index = (kind == SlotKind::Conv).then(|| {
                conv += 1;
                conv - 1
            });
            let index = out.len();
            out.push(Slot { index, kind, c_in, c_out, resolution, conv_index, upsample });
        };
        let c0 = self.channels[0];
        push(&mut out, SlotKind::Conv, c0, c0, 4, false);
        push(&mut out, SlotKind::ToRgb, c0, 3, 4, false);
        for i in 1..self.resolutions.len() {
            let (cp, c, r) = (self.channels[i - 1], self.channels[i], self.resolutions[i]);
            push(&mut out, SlotKind::Conv, cp, c, r, true);
            push(&mut out, SlotKind::Conv, c, c, r, false);
            push(&mut out, SlotKind::ToRgb, c, 3, r, false);
        }
        out
    }

    pub fn conv_slots(&self) -> Vec<Slot> {
        self.slots().into_iter().filter(|s| s.kind == SlotKind::Conv).collect()
    }

    /// The last `n_r` conv slots, which are the ones refined.
    pub fn refined_slots(&self, n_r: usize) -> Result<Vec<Slot>> {
        let convs = self.conv_slots();
        ensure!(
            n_r <= convs.len(),
            "refined_slots",
            "N_r = {} exceeds the {} conv slots of this generator",
            n_r,
            convs.len()
        );
        Ok(convs[convs.len() - n_r..].to_vec())
    }

    /// `(C_out, C_in)` of the last `n_r` conv slots.
    pub fn channel_table(&self, n_r: usize) -> Result<Vec<(usize, usize)>> {
        Ok(self.refined_slots(n_r)?.iter().map(|s| (s.c_out, s.c_in)).collect())
    }
}

/// Frozen generator weights plus topology.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBundle {
    pub config: GeneratorConfig,
    pub params: ParamStore,
}

/// Additive kernel residuals keyed by w⁺ slot; each entry is `[C_out, C_in]`
/// or per-sample `[B, C_out, C_in]`.
pub type SlotDeltas<T = f32> = BTreeMap<usize, Tensor<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode {
    pub z: Vec<f32>,
    pub w: Vec<f32>,
    /// `[N_w, style_dim]`
    pub w_plus: Tensor,
    pub s: Vec<Vec<f32>>,
}

fn he(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng)
}

impl GeneratorBundle {
    /// Untrained bundle: He-initialized kernels, zero-weight unit-bias affine
    /// maps, zero biases.
    pub fn fresh(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let d = config.style_dim;
        let mut p = ParamStore::new();
        let mut rng = root.fork(1);
        for l in 0..config.mapping_depth {
            p.insert_raw(format!("mapping.{l}.weight"), he(&mut rng, &[d, d], d));
            p.insert_raw(format!("mapping.{l}.bias"), Tensor::zeros([d]));
        }
        let c0 = config.channels[0];
        p.insert_raw("const", Tensor::randn([c0, 4, 4], 1.0, &mut root.fork(2)));
        for slot in config.slots() {
            let mut rng = root.fork(100 + slot.index as u64);
            let n = slot.index;
            p.insert_raw(format!("slot.{n}.affine.weight"), Tensor::zeros([slot.c_in, d]));
            p.insert_raw(format!("slot.{n}.affine.bias"), Tensor::full([slot.c_in], 1.0));
            match slot.kind {
                SlotKind::Conv => {
                    p.insert_raw(format!("slot.{n}.kernel"), he(&mut rng, &[slot.c_out, slot.c_in, 3, 3], slot.c_in * 9));
                    p.insert_raw(format!("slot.{n}.noise"), Tensor::zeros([1]));
                }
                SlotKind::ToRgb => {
                    let std = 1.0 / (slot.c_in as f64).sqrt();
                    p.insert_raw(format!("slot.{n}.kernel"), Tensor::randn([3, slot.c_in], std, &mut rng));
                }
            }
            p.insert_raw(format!("slot.{n}.bias"), Tensor::zeros([slot.c_out]));
        }
        Ok(GeneratorBundle { config, params: p })
    }

    /// Seeded stand-in for a pretrained generator. Kernels have a decaying
    /// singular spectrum, affine maps are nonzero, and the toRGB path is
    /// rescaled so outputs have standard deviation near 0.4.
    pub fn fixture(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let mut b = Self::fresh(config, seed)?;
        let root = Rng::new(seed).fork(7);
        let d = b.config.style_dim;
        for slot in b.config.slots() {
            let mut rng = root.fork(slot.index as u64);
            let n = slot.index;
            let aw = Tensor::randn([slot.c_in, d], 0.3 / (d as f64).sqrt(), &mut rng);
            *b.params.get_mut(&format!("slot.{n}.affine.weight"))? = aw;
            let bias = Tensor::randn([slot.c_out], 0.1, &mut rng);
            *b.params.get_mut(&format!("slot.{n}.bias"))? = bias;
            if slot.kind == SlotKind::Conv {
                let k = low_rank_kernel(slot.c_out, slot.c_in * 9, &mut rng);
                *b.params.get_mut(&format!("slot.{n}.kernel"))? = Tensor::new([slot.c_out, slot.c_in, 3, 3], k)?;
                if b.config.noise_injection {
                    *b.params.get_mut(&format!("slot.{n}.noise"))? = Tensor::full([1], 0.05);
                }
            }
        }
        b.calibrate_output(0.4, seed)?;
        b.params.freeze();
        Ok(b)
    }

    fn calibrate_output(&mut self, target_std: f64, seed: u64) -> Result<()> {
        let mut rng = Rng::new(seed).fork(11);
        let n = 16;
        let z = Tensor::randn([n, self.config.style_dim], 1.0, &mut rng);
        let w = self.map_latent_batch(&z)?;
        let img = self.synthesize(&self.broadcast_batch(&w)?, None)?;
        let v = img.to_f64_vec();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
        let c = target_std / std.max(1e-12);
        for slot in self.config.slots().into_iter().filter(|s| s.kind == SlotKind::ToRgb) {
            for name in [format!("slot.{}.kernel", slot.index), format!("slot.{}.bias", slot.index)] {
                let t = self.params.get_mut(&name)?;
                t.data_mut().iter_mut().for_each(|x| *x = (*x as f64 * c) as f32);
            }
        }
        // Centre the image mean on zero through the last toRGB bias.
        let last = self.config.slots().into_iter().rev().find(|s| s.kind == SlotKind::ToRgb).unwrap();
        let t = self.params.get_mut(&format!("slot.{}.bias", last.index))?;
        t.data_mut().iter_mut().for_each(|x| *x -= (mean * c) as f32);
        Ok(())
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// `[style_dim]` → `[style_dim]`.
    pub fn map_latent(&self, z: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.style_dim;
        ensure!(z.len() == d, "map_latent", "z has {} entries, style_dim is {}", z.len(), d);
        Ok(self.map_latent_batch(&Tensor::new([1, d], z.to_vec())?)?.into_data())
    }

    /// `[B, style_dim]` → `[B, style_dim]`.
    pub fn map_latent_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = bind_frozen(&self.params, &mut g)?;
        let zv = g.constant(z)?;
        let w = map_latent_graph(&self.config, &mut g, &p, zv)?;
        Ok(g.tensor(w))
    }

    /// Monte-Carlo mean of w over `n` seeded latents.
    pub fn mean_w(&self, n: usize, seed: u64) -> Result<Vec<f32>> {
        ensure!(n > 0, "mean_w", "need at least one sample");
        let d = self.config.style_dim;
        let mut rng = Rng::new(seed);
        let mut acc = vec![0.0f64; d];
        let mut left = n;
        while left > 0 {
            let chunk = left.min(1000);
            let z = Tensor::randn([chunk, d], 1.0, &mut rng);
            let w = self.map_latent_batch(&z)?;
            for row in w.data().chunks(d) {
                acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x as f64);
            }
            left -= chunk;
        }
        Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
    }

    /// Replicates a single w over all slots: `[style_dim]` → `[N_w, style_dim]`.
    pub fn broadcast_w(&self, w: &[f32]) -> Result<Tensor> {
        let d = self.config.style_dim;
        ensure!(w.len() == d, "broadcast_w", "w has {} entries, style_dim is {}", w.len(), d);
        let n = self.config.n_w();
        Tensor::new([n, d], w.iter().copied().cycle().take(n * d).collect())
    }

    /// `[B, style_dim]` → `[B, N_w, style_dim]`.
    pub fn broadcast_batch(&self, w: &Tensor) -> Result<Tensor> {
        let d = self.config.style_dim;
        ensure!(w.shape().len() == 2 && w.shape()[1] == d, "broadcast_w", "expected [B, {}], got {:?}", d, w.shape());
        let (b, n) = (w.shape()[0], self.config.n_w());
        let mut out = Vec::with_capacity(b * n * d);
        for row in w.data().chunks(d) {
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        Tensor::new([b, n, d], out)
    }

    pub fn style_code(&self, z: &[f32]) -> Result<StyleCode> {
        let w = self.map_latent(z)?;
        let w_plus = self.broadcast_w(&w)?;
        let s = self.affine_style(&w_plus)?.into_iter().map(Tensor::into_data).collect();
        Ok(StyleCode { z: z.to_vec(), w, w_plus, s })
    }

    /// Per-slot modulation vectors for one `[N_w, style_dim]` code.
    pub fn affine_style(&self, w_plus: &Tensor) -> Result<Vec<Tensor>> {
        let code = self.check_code(w_plus, "affine_style")?;
        let mut g = Graph::new();
        let p = bind_frozen(&self.params, &mut g)?;
        let wv = g.constant(&code)?;
        let styles = styles_graph(&self.config, &mut g, &p, wv)?;
        styles
            .into_iter()
            .map(|s| {
                let t = g.tensor(s);
                let n = t.numel();
                t.reshape([n])
            })
            .collect()
    }

    /// Accepts `[N_w, D]` or `[B, N_w, D]` and returns the batched form.
    fn check_code(&self, w_plus: &Tensor, op: &str) -> Result<Tensor> {
        let (n, d) = (self.config.n_w(), self.config.style_dim);
        match w_plus.shape() {
            [r, c] if *r == n && *c == d => w_plus.clone().reshape([1, n, d]),
            [_, r, c] if *r == n && *c == d => Ok(w_plus.clone()),
            s => Err(Error::contract(op, format!("w⁺ must be [{n}, {d}] or [B, {n}, {d}], got {s:?}"))),
        }
    }

    /// Renders `[N_w, D]` → `[3, R, R]` or `[B, N_w, D]` → `[B, 3, R, R]`.
    pub fn synthesize(&self, w_plus: &Tensor, residuals: Option<&SlotDeltas>) -> Result<Tensor> {
        self.synthesize_with_noise(w_plus, residuals, 0)
    }

    pub fn synthesize_with_noise(&self, w_plus: &Tensor, residuals: Option<&SlotDeltas>, noise_seed: u64) -> Result<Tensor> {
        let batched = w_plus.shape().len() == 3;
        let code = self.check_code(w_plus, "synthesize")?;
        let mut g = Graph::new();
        let p = bind_frozen(&self.params, &mut g)?;
        let wv = g.constant(&code)?;
        let mut deltas = BTreeMap::new();
        if let Some(res) = residuals {
            for (&slot, t) in res {
                deltas.insert(slot, g.constant(t)?);
            }
        }
        let img = synthesize_graph(&self.config, &mut g, &p, wv, &deltas, noise_seed)?;
        let out = g.tensor(img);
        if batched {
            Ok(out)
        } else {
            let r = self.config.resolution();
            out.reshape([3, r, r])
        }
    }

    /// Samples `n` codes from seeded latents and broadcasts them: `[n, N_w, D]`.
    pub fn sample_codes(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let z = Tensor::randn([n, self.config.style_dim], 1.0, rng);
        self.broadcast_batch(&self.map_latent_batch(&z)?)
    }
}

/// Binds a store into `g` with every entry untracked.
pub fn bind_frozen<T: Scalar>(params: &ParamStore<T>, g: &mut Graph<T>) -> Result<Bound> {
    let mut frozen = params.clone();
    frozen.freeze();
    frozen.bind(g)
}

fn low_rank_kernel(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f32> {
    let r = rows.min(cols);
    let mut k = vec![0.0f64; rows * cols];
    for c in 0..r {
        let sigma = (c as f64 + 1.0).powf(-1.5);
        let u = rng.normal_vec(rows, 1.0 / (rows as f64).sqrt());
        let v = rng.normal_vec(cols, 1.0 / (cols as f64).sqrt());
        for i in 0..rows {
            for j in 0..cols {
                k[i * cols + j] += sigma * u[i] * v[j];
            }
        }
    }
    let noise = 0.01 / (cols as f64).sqrt();
    k.iter().map(|&x| (x + rng.normal() * noise) as f32).collect()
}

/// Pixel-normalized input followed by `mapping_depth` linear layers; leaky
/// ReLU between layers, none after the last.
pub fn map_latent_graph<T: Scalar>(cfg: &GeneratorConfig, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
    let d = cfg.style_dim;
    ensure!(
        g.shape(z).last() == Some(&d),
        "map_latent",
        "z has shape {:?}, style_dim is {}",
        g.shape(z),
        d
    );
    let n = g.l2_normalize(z, 1e-8)?;
    let mut x = g.scale(n, (d as f64).sqrt())?;
    for l in 0..cfg.mapping_depth {
        x = g.linear(x, p.var(&format!("mapping.{l}.weight"))?, Some(p.var(&format!("mapping.{l}.bias"))?))?;
        if l + 1 < cfg.mapping_depth {
            x = g.leaky_relu(x)?;
        }
    }
    Ok(x)
}

/// `[B, N_w, D]` → one `[B, C_in]` modulation per slot.
pub fn styles_graph<T: Scalar>(cfg: &GeneratorConfig, g: &mut Graph<T>, p: &Bound, w_plus: Var) -> Result<Vec<Var>> {
    let s = g.shape(w_plus).to_vec();
    let (n, d) = (cfg.n_w(), cfg.style_dim);
    ensure!(s.len() == 3 && s[1] == n && s[2] == d, "affine_style", "w⁺ must be [B, {}, {}], got {:?}", n, d, s);
    let b = s[0];
    cfg.slots()
        .iter()
        .map(|slot| {
            let row = g.narrow(w_plus, 1, slot.index, 1)?;
            let row = g.reshape(row, &[b, d])?;
            let i = slot.index;
            g.linear(row, p.var(&format!("slot.{i}.affine.weight"))?, Some(p.var(&format!("slot.{i}.affine.bias"))?))
        })
        .collect()
}

/// Modulated kernel `[B, C_out, C_in, 3, 3]` from styles `[B, C_in]` and a
/// static kernel `[C_out, C_in, 3, 3]`, with an optional `[C_out, C_in]` or
/// `[B, C_out, C_in]` residual expanded over the taps.
pub fn modulate_graph<T: Scalar>(
    g: &mut Graph<T>,
    s: Var,
    w0: Var,
    delta: Option<Var>,
    demodulate: bool,
    order: DemodOrder,
) -> Result<Var> {
    let ss = g.shape(s).to_vec();
    let sw = g.shape(w0).to_vec();
    ensure!(sw.len() == 4 && sw[2] == 3 && sw[3] == 3, "modulate_kernel", "kernel must be [C_out, C_in, 3, 3], got {:?}", sw);
    let (co, ci) = (sw[0], sw[1]);
    ensure!(ss.len() == 2 && ss[1] == ci, "modulate_kernel", "style {:?} does not match C_in = {}", ss, ci);
    let b = ss[0];
    let s4 = g.reshape(s, &[b, 1, ci, 1])?;
    let w3 = g.reshape(w0, &[co, ci, 9])?;
    let mut w = g.mul(s4, w3)?;
    let delta = match delta {
        Some(dv) => {
            let sd = g.shape(dv).to_vec();
            let ok = sd == [co, ci] || (sd.len() == 3 && sd[0] == b && sd[1..] == [co, ci]);
            ensure!(ok, "apply_residual", "residual {:?} does not match kernel channels [{}, {}]", sd, co, ci);
            let mut shape = sd.clone();
            shape.push(1);
            Some(g.reshape(dv, &shape)?)
        }
        None => None,
    };
    let demod = |g: &mut Graph<T>, w: Var| -> Result<Var> {
        let flat = g.reshape(w, &[b, co, ci * 9])?;
        let n = g.l2_normalize(flat, DEMOD_EPS)?;
        g.reshape(n, &[b, co, ci, 9])
    };
    match (demodulate, order) {
        (true, DemodOrder::After) => {
            if let Some(dv) = delta {
                w = g.add(w, dv)?;
            }
            w = demod(g, w)?;
        }
        (true, DemodOrder::Before) => {
            w = demod(g, w)?;
            if let Some(dv) = delta {
                w = g.add(w, dv)?;
            }
        }
        (false, _) => {
            if let Some(dv) = delta {
                w = g.add(w, dv)?;
            }
        }
    }
    g.reshape(w, &[b, co, ci, 3, 3])
}

fn noise_tensor<T: Scalar>(seed: u64, slot: usize, b: usize, r: usize) -> Tensor<T> {
    let mut rng = Rng::new(seed).fork(1000 + slot as u64);
    let v: Vec<T> = (0..b * r * r).map(|_| T::from_f64(rng.normal())).collect();
    Tensor::new([b, 1, r, r], v).expect("noise shape")
}

/// Full forward pass: `[B, N_w, D]` → `[B, 3, R, R]`. `deltas` maps conv
/// slot indices to kernel residuals.
pub fn synthesize_graph<T: Scalar>(
    cfg: &GeneratorConfig,
    g: &mut Graph<T>,
    p: &Bound,
    w_plus: Var,
    deltas: &BTreeMap<usize, Var>,
    noise_seed: u64,
) -> Result<Var> {
    let slots = cfg.slots();
    for &k in deltas.keys() {
        let slot = slots
            .get(k)
            .ok_or_else(|| Error::contract("synthesize", format!("residual addresses slot {k}, generator has {}", slots.len())))?;
        ensure!(slot.kind == SlotKind::Conv, "synthesize", "residual addresses toRGB slot {}", k);
    }
    let styles = styles_graph(cfg, g, p, w_plus)?;
    let b = g.shape(w_plus)[0];
    let c0 = cfg.channels[0];
    let cst = g.reshape(p.var("const")?, &[1, c0, 4, 4])?;
    let mut x = if b == 1 {
        cst
    } else {
        let ones = g.constant(&Tensor::full([b, 1, 1, 1], T::one()))?;
        g.mul(ones, cst)?
    };
    let mut rgb: Option<Var> = None;
    for slot in &slots {
        let i = slot.index;
        let kernel = p.var(&format!("slot.{i}.kernel"))?;
        let bias = g.reshape(p.var(&format!("slot.{i}.bias"))?, &[1, slot.c_out, 1, 1])?;
        match slot.kind {
            SlotKind::Conv => {
                if slot.upsample {
                    x = g.upsample2x(x)?;
                }
                let w = modulate_graph(g, styles[i], kernel, deltas.get(&i).copied(), cfg.demodulate, cfg.demod_order)?;
                x = g.conv2d(x, w, 1)?;
                x = g.add(x, bias)?;
                if cfg.noise_injection {
                    let nz = g.constant(&noise_tensor::<T>(noise_seed, i, b, slot.resolution))?;
                    let scaled = g.mul(nz, p.var(&format!("slot.{i}.noise"))?)?;
                    x = g.add(x, scaled)?;
                }
                x = g.leaky_relu(x)?;
            }
            SlotKind::ToRgb => {
                let s = g.reshape(styles[i], &[b, 1, slot.c_in])?;
                let w = g.mul(s, kernel)?;
                let y = g.conv2d_1x1(x, w)?;
                let y = g.add(y, bias)?;
                rgb = Some(match rgb {
                    Some(prev) => {
                        let up = g.upsample2x(prev)?;
                        g.add(up, y)?
                    }
                    None => y,
                });
            }
        }
    }
    Ok(rgb.expect("at least one toRGB slot"))
}

/// Eager modulation of one kernel: `s` is `[C_in]`, `w0` `[C_out, C_in, 3, 3]`.
pub fn modulate_kernel<T: Scalar>(s: &Tensor<T>, w0: &Tensor<T>, demodulate: bool) -> Result<Tensor<T>> {
    ensure!(s.shape().len() == 1, "modulate_kernel", "style must be a vector, got {:?}", s.shape());
    let mut g = Graph::new();
    let sv = g.constant(&s.clone().reshape([1, s.numel()])?)?;
    let wv = g.constant(w0)?;
    let out = modulate_graph(&mut g, sv, wv, None, demodulate, DemodOrder::After)?;
    g.tensor(out).reshape(w0.shape().to_vec())
}

/// Rows `[0, split)` from `w_c`, the rest from `w_r`.
pub fn style_mix(w_c: &Tensor, w_r: &Tensor, split: usize) -> Result<Tensor> {
    ensure!(w_c.shape() == w_r.shape(), "style_mix", "codes {:?} and {:?} differ", w_c.shape(), w_r.shape());
    ensure!(w_c.shape().len() == 2, "style_mix", "codes must be [N_w, D], got {:?}", w_c.shape());
    let (n, d) = (w_c.shape()[0], w_c.shape()[1]);
    ensure!(split <= n, "style_mix", "split index {} outside 0..={}", split, n);
    let mut out = w_c.data()[..split * d].to_vec();
    out.extend_from_slice(&w_r.data()[split * d..]);
    Tensor::new([n, d], out)
}

pub fn default_split(n_w: usize) -> usize {
    n_w.div_ceil(2)
}
