//! Domain adaptation by optimizing residual factors only: a direction loss
//! against a proxy embedding offset, and one-shot adaptation with a
//! reconstruction term plus a sliced Wasserstein style term.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::domain::Transform;
use crate::encoder::Inverter;
use crate::error::{ensure, Error, Result};
use crate::generator::{bind_frozen, default_split, style_mix, synthesize_graph, GeneratorBundle};
use crate::inversion::{loss_rec, LossWeights};
use crate::proxy::{ProxyNet, EMBED_DIM};
use crate::refinement::ResidualFactors;
use crate::tensor::{Graph, Optimizer, OptimizerConfig, Rng, Scalar, Tensor, Var};

/// Offsets with norm at or below this are degenerate.
pub const OFFSET_EPS: f64 = 1e-8;

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= OFFSET_EPS {
        return Err(Error::Degenerate { op: "normalize".into(), detail: format!("vector norm {n:e}") });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Target domain described by an image transform and proxy embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub transform: Transform,
    /// Normalized mean of the unit source embeddings.
    pub e_src: Vec<f64>,
    /// Normalized mean of the unit transformed embeddings.
    pub e_tar: Vec<f64>,
    /// Unit direction of the mean displacement between unit embeddings.
    pub delta_t: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl DomainSpec {
    /// Embeds `samples` generator renders before and after `transform`.
    pub fn from_transform(name: &str, transform: Transform, bundle: &GeneratorBundle, embedder: &ProxyNet, samples: usize, seed: u64) -> Result<Self> {
        ensure!(samples > 0, "domain_spec", "need at least one sample");
        let mut rng = Rng::new(seed);
        let z = Tensor::randn([samples, bundle.config.style_dim], 1.0, &mut rng);
        let w = bundle.broadcast_batch(&bundle.map_latent_batch(&z)?)?;
        let src = bundle.synthesize(&w, None)?;
        let r = bundle.config.resolution();
        let plane = 3 * r * r;
        let mut tar = Vec::with_capacity(src.numel());
        for i in 0..samples {
            let img = Tensor::new([3, r, r], src.data()[i * plane..(i + 1) * plane].to_vec())?;
            tar.extend_from_slice(transform.apply(&img, i as u64)?.data());
        }
        let tar = Tensor::new(src.shape().to_vec(), tar)?;
        let es = unit_rows(&embedder.embed(&src)?)?;
        let et = unit_rows(&embedder.embed(&tar)?)?;
        let mean = |e: &[f64]| -> Vec<f64> { (0..EMBED_DIM).map(|j| (0..samples).map(|i| e[i * EMBED_DIM + j]).sum::<f64>() / samples as f64).collect() };
        let (ms, mt) = (mean(&es), mean(&et));
        let disp: Vec<f64> = mt.iter().zip(&ms).map(|(a, b)| a - b).collect();
        let spec = DomainSpec { name: name.into(), transform, e_src: normalize(&ms)?, e_tar: normalize(&mt)?, delta_t: normalize(&disp)?, samples, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("e_src", &self.e_src), ("e_tar", &self.e_tar), ("delta_t", &self.delta_t)] {
            ensure!(v.len() == EMBED_DIM, "domain_spec", "{} has {} entries, expected {}", n, v.len(), EMBED_DIM);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            ensure!((norm - 1.0).abs() <= 1e-6, "domain_spec", "{} has norm {}, expected 1", n, norm);
        }
        ensure!(self.e_src != self.e_tar, "domain_spec", "source and target embeddings coincide");
        Ok(())
    }
}

/// Embeddings projected onto the unit sphere, row by row, as f64.
fn unit_rows(e: &Tensor) -> Result<Vec<f64>> {
    let d = *e.shape().last().expect("embedding axis");
    let mut out = Vec::with_capacity(e.numel());
    for row in e.data().chunks(d) {
        let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        out.extend(normalize(&v)?);
    }
    Ok(out)
}

fn degenerate_rows<T: Scalar>(g: &Graph<T>, d: Var) -> Option<(usize, f64)> {
    let e = *g.shape(d).last().expect("offset has an embedding axis");
    g.value(d).chunks(e).enumerate().find_map(|(i, row)| {
        let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        (n <= OFFSET_EPS).then_some((i, n))
    })
}

/// `1 − cos(ΔI, ΔT)` averaged over the batch, with `ΔI = tar − src` on
/// `[B, E]` embeddings, each first projected onto the unit sphere.
pub fn direction_loss_graph<T: Scalar>(g: &mut Graph<T>, src: Var, tar: Var, delta_t: &[f64]) -> Result<Var> {
    let s = g.shape(src).to_vec();
    ensure!(s == g.shape(tar) && s.len() == 2, "direction_loss", "embeddings {:?} and {:?} must be matching [B, E]", s, g.shape(tar));
    ensure!(delta_t.len() == s[1], "direction_loss", "ΔT has {} entries, embeddings have {}", delta_t.len(), s[1]);
    let t_norm = delta_t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if t_norm <= OFFSET_EPS {
        return Err(Error::Degenerate { op: "direction_loss".into(), detail: format!("|ΔT| = {t_norm:e}") });
    }
    let src = g.l2_normalize(src, 0.0)?;
    let tar = g.l2_normalize(tar, 0.0)?;
    let d = g.sub(tar, src)?;
    if let Some((i, n)) = degenerate_rows(g, d) {
        return Err(Error::Degenerate { op: "direction_loss".into(), detail: format!("|ΔI| = {n:e} for batch item {i}") });
    }
    let rows: Vec<f64> = (0..s[0]).flat_map(|_| delta_t.iter().copied()).collect();
    let t = g.constant(&Tensor::from_f64(s.clone(), &rows)?)?;
    let cos = g.cosine_similarity(d, t)?;
    let m = g.mean_all(cos)?;
    let neg = g.scale(m, -1.0)?;
    let one = g.scalar_constant(T::one())?;
    g.add(one, neg)
}

/// Eager direction loss on `[B, 3, R, R]` source and target batches.
pub fn direction_loss(src: &Tensor, tar: &Tensor, delta_t: &[f64], embedder: &ProxyNet) -> Result<f64> {
    ensure!(src.shape() == tar.shape(), "direction_loss", "image batches {:?} and {:?} differ", src.shape(), tar.shape());
    let mut g = Graph::new();
    let es = g.constant(&embedder.embed(src)?)?;
    let et = g.constant(&embedder.embed(tar)?)?;
    let l = direction_loss_graph(&mut g, es, et, delta_t)?;
    Ok(g.item(l) as f64)
}

/// Per-sample `cos(ΔI, ΔT)` from `[B, E]` embedding batches.
pub fn offset_cosines(src: &Tensor, tar: &Tensor, delta_t: &[f64]) -> Result<Vec<f64>> {
    ensure!(src.shape() == tar.shape() && src.shape().len() == 2, "offset_cosines", "embeddings must be matching [B, E]");
    let e = src.shape()[1];
    ensure!(delta_t.len() == e, "offset_cosines", "ΔT has {} entries, embeddings have {}", delta_t.len(), e);
    let t = normalize(delta_t)?;
    let (us, ut) = (unit_rows(src)?, unit_rows(tar)?);
    us.chunks(e)
        .zip(ut.chunks(e))
        .map(|(a, b)| {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
            let d = normalize(&d).map_err(|_| Error::Degenerate { op: "offset_cosines".into(), detail: "adapted output equals source".into() })?;
            Ok(d.iter().zip(&t).map(|(x, y)| x * y).sum())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwdSource {
    Pixels,
    ProxyFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwdConfig {
    pub directions: usize,
    pub source: SwdSource,
    /// Spatial positions sampled per image.
    pub positions: usize,
    /// Proxy tap used for features.
    pub tap: usize,
    pub seed: u64,
}

impl Default for SwdConfig {
    fn default() -> Self {
        SwdConfig { directions: 128, source: SwdSource::ProxyFeatures, positions: 256, tap: 1, seed: 0x5357_4400 }
    }
}

/// `K` seeded unit directions in `d` dimensions, `[K, d]`.
pub fn swd_directions<T: Scalar>(k: usize, d: usize, seed: u64) -> Result<Tensor<T>> {
    ensure!(k >= 1 && d >= 1, "swd", "need K ≥ 1 and d ≥ 1, got K = {}, d = {}", k, d);
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(k * d);
    for _ in 0..k {
        let v = loop {
            let v = rng.normal_vec(d, 1.0);
            if let Ok(u) = normalize(&v) {
                break u;
            }
        };
        out.extend(v.into_iter().map(T::from_f64));
    }
    Tensor::new([k, d], out)
}

/// Sliced squared 2-Wasserstein distance between `[m, d]` point sets
/// along `dirs` `[K, d]`.
pub fn swd_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, dirs: &Tensor<T>) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    ensure!(sa.len() == 2 && sb.len() == 2, "swd", "point sets must be [m, d], got {:?} and {:?}", sa, sb);
    ensure!(sa[0] == sb[0], "swd", "point counts differ: {} vs {}", sa[0], sb[0]);
    ensure!(sa[1] == sb[1] && dirs.shape()[1] == sa[1], "swd", "dimensions differ: {:?}, {:?}, directions {:?}", sa, sb, dirs.shape());
    let dt = g.constant(&transpose2(dirs))?;
    let pa = g.matmul(a, dt)?;
    let pb = g.matmul(b, dt)?;
    let pa = g.transpose(pa, 0, 1)?;
    let pb = g.transpose(pb, 0, 1)?;
    let (sa, _) = g.sort_lastaxis(pa)?;
    let (sb, _) = g.sort_lastaxis(pb)?;
    g.mse(sa, sb)
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new([c, r], out).expect("transpose shape")
}

/// Eager SWD; `cfg.directions` and `cfg.seed` select the slices.
pub fn swd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SwdConfig) -> Result<f64> {
    ensure!(a.shape().len() == 2 && b.shape().len() == 2, "swd", "point sets must be [m, d]");
    let dirs = swd_directions::<T>(cfg.directions, a.shape()[1], cfg.seed)?;
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a)?, g.constant(b)?);
    let v = swd_graph(&mut g, va, vb, &dirs)?;
    Ok(g.item(v).as_f64())
}

/// Point set `[m, d]` of a `[1, 3, R, R]` image for the style term.
fn style_points(g: &mut Graph, image: Var, net: &ProxyNet, cfg: &SwdConfig) -> Result<Var> {
    let x = match cfg.source {
        SwdSource::Pixels => image,
        SwdSource::ProxyFeatures => {
            let p = net.bind(g)?;
            let f = net.features(g, &p, image)?;
            ensure!(cfg.tap < f.taps.len(), "swd", "tap {} out of range ({} taps)", cfg.tap, f.taps.len());
            f.taps[cfg.tap]
        }
    };
    let s = g.shape(x).to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    let flat = g.reshape(x, &[c, hw])?;
    let pts = g.transpose(flat, 0, 1)?;
    if hw <= cfg.positions {
        return Ok(pts);
    }
    let mut idx: Vec<usize> = (0..hw).collect();
    Rng::new(cfg.seed).fork(1).shuffle(&mut idx);
    idx.truncate(cfg.positions);
    idx.sort_unstable();
    g.index_select(pts, 0, &idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptRun {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub log_every: usize,
    /// Std of the seeded factor perturbation applied when the image offset
    /// is degenerate.
    pub perturb_std: f64,
    pub max_perturb: usize,
    /// Weight of the style term (one-shot).
    pub style_weight: f64,
    pub weights: LossWeights,
    pub swd: SwdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl Default for AdaptRun {
    fn default() -> Self {
        AdaptRun {
            steps: 300,
            batch: 2,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            log_every: 10,
            perturb_std: 0.02,
            max_perturb: 8,
            style_weight: 0.5,
            weights: LossWeights::default(),
            swd: SwdConfig::default(),
            dump_dir: None,
        }
    }
}

impl AdaptRun {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch > 0 && self.log_every > 0, "adapt", "batch size and log interval must be positive");
        ensure!(self.swd.directions >= 1, "adapt", "SWD needs at least one direction");
        ensure!(self.style_weight >= 0.0, "adapt", "style weight must be non-negative");
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub records: Vec<AdaptRecord>,
    /// Perturbations applied because the offset was degenerate.
    pub perturbations: usize,
}

impl AdaptLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

fn perturb(f: &mut ResidualFactors, std: f64, rng: &mut Rng) {
    for (_, t) in f.params.iter_mut() {
        for v in t.data_mut() {
            *v += (rng.normal() * std) as f32;
        }
    }
}

fn check_factors(bundle: &GeneratorBundle, f: &ResidualFactors) -> Result<()> {
    let slots = bundle.config.refined_slots(f.slots.len())?;
    ensure!(slots == f.slots, "adapt", "factors address slots incompatible with this generator");
    Ok(())
}

fn dump(run: &AdaptRun, step: usize, loss: f64, f: &ResidualFactors) -> Result<String> {
    let Some(dir) = &run.dump_dir else { return Ok(String::new()) };
    std::fs::create_dir_all(dir)?;
    let norms: std::collections::BTreeMap<&str, f64> = f.params.iter().map(|(k, t)| (k, t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())).collect();
    let path = dir.join("divergence.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&serde_json::json!({ "step": step, "loss": loss, "param_norms": norms }))?)?;
    Ok(format!("; dump written to {}", path.display()))
}

fn batch_codes(bundle: &GeneratorBundle, b: usize, rng: &mut Rng) -> Result<Tensor> {
    let z = Tensor::randn([b, bundle.config.style_dim], 1.0, rng);
    bundle.broadcast_batch(&bundle.map_latent_batch(&z)?)
}

/// Starting point of text-driven adaptation: `factors` perturbed with
/// seeded noise of doubling std until the first training batch has a
/// non-degenerate image offset. Also returns the number of perturbations.
pub fn text_start(
    spec: &DomainSpec,
    bundle: &GeneratorBundle,
    factors: &ResidualFactors,
    embedder: &ProxyNet,
    run: &AdaptRun,
) -> Result<(ResidualFactors, usize)> {
    let w = batch_codes(bundle, run.batch, &mut Rng::new(run.seed))?;
    let src = embedder.embed(&bundle.synthesize(&w, None)?)?;
    let mut f = factors.clone();
    let mut noise = Rng::new(run.seed).fork(0x7065_7274);
    let mut attempt = 0;
    loop {
        let tar = embedder.embed(&bundle.synthesize(&w, Some(&f.deltas()?))?)?;
        match offset_cosines(&src, &tar, &spec.delta_t) {
            Err(e) if e.is_degenerate() && attempt < run.max_perturb => {
                perturb(&mut f, run.perturb_std * (1u64 << attempt) as f64, &mut noise);
                attempt += 1;
            }
            Err(e) => return Err(e),
            Ok(_) => return Ok((f, attempt)),
        }
    }
}

/// Optimizes `factors` so adapted renders move along `spec.delta_t` in the
/// embedder's space. Generator and embedder stay frozen.
pub fn adapt_text_driven(
    spec: &DomainSpec,
    bundle: &GeneratorBundle,
    factors: &ResidualFactors,
    embedder: &ProxyNet,
    run: &AdaptRun,
) -> Result<(ResidualFactors, AdaptLog)> {
    run.validate()?;
    spec.validate()?;
    check_factors(bundle, factors)?;
    let frozen = (bundle.checksum(), embedder.checksum());
    let (mut f, perturbations) = if run.steps == 0 { (factors.clone(), 0) } else { text_start(spec, bundle, factors, embedder, run)? };
    let mut opt = Optimizer::new(run.optimizer);
    let mut rng = Rng::new(run.seed);
    let mut noise = Rng::new(run.seed).fork(0x7065_7275);
    let mut log = AdaptLog { perturbations, ..AdaptLog::default() };
    for step in 0..run.steps {
        let w = batch_codes(bundle, run.batch, &mut rng)?;
        let src = embedder.embed(&bundle.synthesize(&w, None)?)?;
        let mut attempts = 0;
        loop {
            let mut g = Graph::new();
            let fp = f.params.bind(&mut g)?;
            let gp = bind_frozen(&bundle.params, &mut g)?;
            let deltas = f.deltas_graph(&mut g, &fp)?;
            let wv = g.constant(&w)?;
            let img = synthesize_graph(&bundle.config, &mut g, &gp, wv, &deltas, 0)?;
            let ep = embedder.bind(&mut g)?;
            let tar = embedder.features(&mut g, &ep, img)?.embedding;
            let sv = g.constant(&src)?;
            match direction_loss_graph(&mut g, sv, tar, &spec.delta_t) {
                Err(e) if e.is_degenerate() && attempts < run.max_perturb => {
                    perturb(&mut f, run.perturb_std * (1 << attempts) as f64, &mut noise);
                    attempts += 1;
                    log.perturbations += 1;
                }
                Err(e) => return Err(e),
                Ok(loss) => {
                    let lv = g.item(loss) as f64;
                    if !lv.is_finite() {
                        let at = dump(run, step, lv, &f)?;
                        return Err(Error::numeric("adapt_text", format!("loss diverged at step {step}{at}")));
                    }
                    if step % run.log_every == 0 || step + 1 == run.steps {
                        log.records.push(AdaptRecord { step, loss: lv, cosine: Some(1.0 - lv), rec: None, style: None });
                    }
                    let grads = g.backward(loss)?;
                    let set = f.params.collect_grads(&fp, &grads);
                    f.params.accumulate(&set, 1.0)?;
                    opt.step(&mut f.params)?;
                    f.params.zero_grad();
                    break;
                }
            }
        }
    }
    ensure!((bundle.checksum(), embedder.checksum()) == frozen, "adapt_text", "frozen generator or embedder changed");
    Ok((f, log))
}

/// Per-sample `cos(ΔI, ΔT)` on `n` fresh samples drawn from `seed`.
pub fn direction_cosines(spec: &DomainSpec, bundle: &GeneratorBundle, factors: &ResidualFactors, embedder: &ProxyNet, n: usize, seed: u64) -> Result<Vec<f64>> {
    let w = batch_codes(bundle, n, &mut Rng::new(seed))?;
    let src = embedder.embed(&bundle.synthesize(&w, None)?)?;
    let tar = embedder.embed(&bundle.synthesize(&w, Some(&factors.deltas()?))?)?;
    offset_cosines(&src, &tar, &spec.delta_t)
}

/// Inputs of one-shot adaptation derived from the reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub image: Tensor,
    /// Reference code from the stage-1 inverter.
    pub w_r: Tensor,
    /// Reconstruction loss of the plain stage-1 inversion.
    pub inversion_loss: f64,
}

impl Reference {
    pub fn invert(image: &Tensor, stage1: &Inverter, bundle: &GeneratorBundle, weights: &LossWeights, proxies: &crate::proxy::Proxies) -> Result<Self> {
        let w_r = stage1.invert_w(image)?;
        let recon = bundle.synthesize(&w_r, None)?;
        let inversion_loss = crate::inversion::loss_rec_eager(image, &recon, weights, proxies)?.total;
        Ok(Reference { image: image.clone(), w_r, inversion_loss })
    }
}

/// Factor initialization from a two-stage refiner's prediction on the
/// reference.
pub fn factors_from_refiner(reference: &Reference, refiner: &Inverter, bundle: &GeneratorBundle) -> Result<ResidualFactors> {
    let r0 = bundle.synthesize(&reference.w_r, None)?;
    let r = bundle.config.resolution();
    let mut both = reference.image.data().to_vec();
    both.extend_from_slice(r0.data());
    let input = Tensor::new([6, r, r], both)?;
    let mut f = refiner.infer_residuals(&input)?;
    for (_, t) in f.params.iter_mut() {
        t.set_requires_grad(true);
    }
    Ok(f)
}

/// Loss parts of one one-shot step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotLoss {
    pub total: f64,
    pub rec: f64,
    pub style: f64,
}

fn one_shot_graph(
    g: &mut Graph,
    reference: &Reference,
    bundle: &GeneratorBundle,
    f: &ResidualFactors,
    style_net: &ProxyNet,
    proxies: &crate::proxy::Proxies,
    run: &AdaptRun,
    w_g: &[Tensor],
    dirs: &Tensor,
) -> Result<(Var, crate::tensor::Bound, OneShotLoss)> {
    let fp = f.params.bind(g)?;
    let gp = bind_frozen(&bundle.params, g)?;
    let deltas = f.deltas_graph(g, &fp)?;
    let r = bundle.config.resolution();
    let target = g.constant(&reference.image.clone().reshape([1, 3, r, r])?)?;
    let wr = g.constant(&reference.w_r.clone().reshape([1, bundle.config.n_w(), bundle.config.style_dim])?)?;
    let rec_img = synthesize_graph(&bundle.config, g, &gp, wr, &deltas, 0)?;
    let rec = loss_rec(g, target, rec_img, &run.weights, proxies)?.total;
    let ref_pts = style_points(g, target, style_net, &run.swd)?;
    let mut style: Option<Var> = None;
    for w in w_g {
        let wv = g.constant(&w.clone().reshape([1, bundle.config.n_w(), bundle.config.style_dim])?)?;
        let img = synthesize_graph(&bundle.config, g, &gp, wv, &deltas, 0)?;
        let pts = style_points(g, img, style_net, &run.swd)?;
        let s = swd_graph(g, pts, ref_pts, dirs)?;
        style = Some(match style {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let style = g.scale(style.expect("batch is non-empty"), 1.0 / w_g.len() as f64)?;
    let ws = g.scale(style, run.style_weight)?;
    let total = g.add(rec, ws)?;
    let parts = OneShotLoss { total: g.item(total) as f64, rec: g.item(rec) as f64, style: g.item(style) as f64 };
    Ok((total, fp, parts))
}

fn style_feature_dim(bundle: &GeneratorBundle, style_net: &ProxyNet, cfg: &SwdConfig) -> Result<usize> {
    let mut g = Graph::new();
    let r = bundle.config.resolution();
    let x = g.constant(&Tensor::zeros([1, 3, r, r]))?;
    let pts = style_points(&mut g, x, style_net, cfg)?;
    Ok(g.shape(pts)[1])
}

/// Style-mixed codes for one step: content from fresh samples, texture
/// rows from the reference.
fn mixed_codes(bundle: &GeneratorBundle, reference: &Reference, b: usize, rng: &mut Rng) -> Result<Vec<Tensor>> {
    let split = default_split(bundle.config.n_w());
    (0..b)
        .map(|_| {
            let z = Tensor::randn([bundle.config.style_dim], 1.0, rng);
            let w_c = bundle.broadcast_w(&bundle.map_latent(z.data())?)?;
            style_mix(&w_c, &reference.w_r, split)
        })
        .collect()
}

/// Loss of `factors` on the first step's batch of `run`, without updating.
pub fn one_shot_initial_loss(
    reference: &Reference,
    bundle: &GeneratorBundle,
    factors: &ResidualFactors,
    style_net: &ProxyNet,
    proxies: &crate::proxy::Proxies,
    run: &AdaptRun,
) -> Result<OneShotLoss> {
    let dirs = swd_directions(run.swd.directions, style_feature_dim(bundle, style_net, &run.swd)?, run.swd.seed)?;
    let w_g = mixed_codes(bundle, reference, run.batch, &mut Rng::new(run.seed))?;
    let mut g = Graph::new();
    Ok(one_shot_graph(&mut g, reference, bundle, factors, style_net, proxies, run, &w_g, &dirs)?.2)
}

/// One-shot adaptation of `factors` to `reference`.
pub fn adapt_one_shot(
    reference: &Reference,
    bundle: &GeneratorBundle,
    factors: &ResidualFactors,
    style_net: &ProxyNet,
    proxies: &crate::proxy::Proxies,
    run: &AdaptRun,
) -> Result<(ResidualFactors, AdaptLog)> {
    run.validate()?;
    check_factors(bundle, factors)?;
    let frozen = bundle.checksum();
    let dirs = swd_directions(run.swd.directions, style_feature_dim(bundle, style_net, &run.swd)?, run.swd.seed)?;
    let mut f = factors.clone();
    let mut opt = Optimizer::new(run.optimizer);
    let mut rng = Rng::new(run.seed);
    let mut log = AdaptLog::default();
    for step in 0..run.steps {
        let w_g = mixed_codes(bundle, reference, run.batch, &mut rng)?;
        let mut g = Graph::new();
        let (total, fp, parts) = one_shot_graph(&mut g, reference, bundle, &f, style_net, proxies, run, &w_g, &dirs)?;
        if !parts.total.is_finite() {
            let at = dump(run, step, parts.total, &f)?;
            return Err(Error::numeric("adapt_oneshot", format!("loss diverged at step {step}{at}")));
        }
        if step % run.log_every == 0 || step + 1 == run.steps {
            log.records.push(AdaptRecord { step, loss: parts.total, cosine: None, rec: Some(parts.rec), style: Some(parts.style) });
        }
        let grads = g.backward(total)?;
        let set = f.params.collect_grads(&fp, &grads);
        f.params.accumulate(&set, 1.0)?;
        opt.step(&mut f.params)?;
        f.params.zero_grad();
    }
    ensure!(bundle.checksum() == frozen, "adapt_oneshot", "frozen generator changed");
    Ok((f, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::proxy::{Proxies, EMBED_SEED};
    use crate::refinement::{FactorInit, Scaling};

    fn bundle() -> GeneratorBundle {
        GeneratorBundle::fixture(
            GeneratorConfig { resolutions: vec![4, 8, 16], channels: vec![16, 16, 16], style_dim: 16, mapping_depth: 2, ..GeneratorConfig::default() },
            0,
        )
        .unwrap()
    }

    fn emb(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_f64([rows.len(), 2], &rows.iter().flatten().copied().collect::<Vec<_>>()).unwrap()
    }

    fn dir_loss(src: &Tensor, tar: &Tensor, t: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(src)?, g.constant(tar)?);
        let l = direction_loss_graph(&mut g, a, b, t)?;
        Ok(g.item(l) as f64)
    }

    #[test]
    fn direction_loss_reference_values() {
        // unit offset from (1, 0) to (0, 1) is (-1, 1)/√2, whatever the norms
        let src = emb(&[[1.0, 0.0]]);
        let tar = emb(&[[0.0, 5.0]]);
        assert!(dir_loss(&src, &tar, &[-1.0, 1.0]).unwrap().abs() < 1e-6);
        assert!((dir_loss(&src, &tar, &[1.0, -1.0]).unwrap() - 2.0).abs() < 1e-6);
        assert!((dir_loss(&src, &tar, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!(dir_loss(&src, &emb(&[[3.0, 0.0]]), &[1.0, 0.0]).unwrap_err().is_degenerate());
    }

    #[test]
    fn swd_hand_example() {
        let a = Tensor::<f64>::from_f64([2, 1], &[0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64([2, 1], &[2.0, 3.0]).unwrap();
        let cfg = SwdConfig { directions: 1, ..SwdConfig::default() };
        assert!((swd(&a, &b, &cfg).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(swd(&a, &a, &cfg).unwrap(), 0.0);
        let c = Tensor::<f64>::zeros([3, 1]);
        assert!(swd(&a, &c, &cfg).unwrap_err().is_contract());
    }

    #[test]
    fn swd_directions_are_unit() {
        let d = swd_directions::<f64>(16, 5, 3).unwrap();
        for row in d.data().chunks(5) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(swd_directions::<f64>(0, 5, 3).is_err());
    }

    #[test]
    fn domain_spec_is_unit_and_distinct() {
        let b = bundle();
        let e = ProxyNet::new(EMBED_SEED);
        let s = DomainSpec::from_transform("invert", Transform::Invert, &b, &e, 16, 1).unwrap();
        s.validate().unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DomainSpec>(&json).unwrap(), s);
        assert!(DomainSpec::from_transform("id", Transform::Identity, &b, &e, 4, 1).unwrap_err().is_degenerate());
    }

    #[test]
    fn zero_steps_leave_factors_and_output_unchanged() {
        let b = bundle();
        let e = ProxyNet::new(EMBED_SEED);
        let spec = DomainSpec::from_transform("gray", Transform::Grayscale, &b, &e, 8, 1).unwrap();
        let f = ResidualFactors::new(&b.config, 2, 4, Scaling::PerLayer, &FactorInit::zero_q(), &mut Rng::new(0)).unwrap();
        let run = AdaptRun { steps: 0, ..AdaptRun::default() };
        let (out, log) = adapt_text_driven(&spec, &b, &f, &e, &run).unwrap();
        assert_eq!(out, f);
        assert!(log.records.is_empty());
        let w = b.broadcast_w(&b.mean_w(16, 0).unwrap()).unwrap();
        assert_eq!(b.synthesize(&w, Some(&out.deltas().unwrap())).unwrap(), b.synthesize(&w, None).unwrap());
    }

    #[test]
    fn degenerate_start_is_perturbed_and_generator_stays_frozen() {
        let b = bundle();
        let sum = b.checksum();
        let e = ProxyNet::new(EMBED_SEED);
        let spec = DomainSpec::from_transform("gray", Transform::Grayscale, &b, &e, 8, 1).unwrap();
        let f = ResidualFactors::new(&b.config, 2, 4, Scaling::PerLayer, &FactorInit::zero_q(), &mut Rng::new(0)).unwrap();
        let run = AdaptRun { steps: 3, ..AdaptRun::default() };
        let (out, log) = adapt_text_driven(&spec, &b, &f, &e, &run).unwrap();
        assert!(log.perturbations >= 1);
        assert_ne!(out, f);
        assert_eq!(b.checksum(), sum);
    }

    #[test]
    fn one_shot_zero_start_matches_stage_one_error() {
        let b = bundle();
        let px = Proxies::default();
        let d = crate::domain::make_domain(&b, 1, 1, 1, Transform::Identity).unwrap();
        let img = &d.train[0].image;
        let reference = Reference { image: img.clone(), w_r: b.broadcast_w(&b.mean_w(64, 2).unwrap()).unwrap(), inversion_loss: 0.0 };
        let recon = b.synthesize(&reference.w_r, None).unwrap();
        let expect = crate::inversion::loss_rec_eager(img, &recon, &LossWeights::default(), &px).unwrap().total;
        let f = ResidualFactors::new(&b.config, 2, 4, Scaling::PerLayer, &FactorInit::zero_q(), &mut Rng::new(0)).unwrap();
        let run = AdaptRun { steps: 2, swd: SwdConfig { directions: 8, ..SwdConfig::default() }, ..AdaptRun::default() };
        let l0 = one_shot_initial_loss(&reference, &b, &f, &px.lpips, &px, &run).unwrap();
        assert!((l0.rec - expect).abs() < 1e-6 * expect.max(1.0));
        let (_, log) = adapt_one_shot(&reference, &b, &f, &px.lpips, &px, &run).unwrap();
        assert_eq!(log.records[0].rec, Some(l0.rec));
    }
}
