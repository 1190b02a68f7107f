//! Reconstruction losses, one- and two-stage inverter training, evaluation
//! and latent-direction editing.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Sample;
use crate::encoder::{ForwardOpts, Inverter};
use crate::error::{ensure, Error, Result};
use crate::generator::{bind_frozen, synthesize_graph, GeneratorBundle, SlotDeltas};
use crate::linalg::principal_axes;
use crate::proxy::{ProxyNet, Proxies};
use crate::tensor::{sum_grads, Bound, Graph, Optimizer, OptimizerConfig, ParamStore, Rng, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l2: f64,
    pub lpips: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l2: 1.0, lpips: 0.8, id: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.l2 >= 0.0 && self.lpips >= 0.0 && self.id >= 0.0,
            "loss_weights",
            "weights must be non-negative, got ({}, {}, {})",
            self.l2,
            self.lpips,
            self.id
        );
        Ok(())
    }
}

/// Graph handles of a reconstruction loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l2: Var,
    pub lpips: Var,
    pub id: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l2: f64,
    pub lpips: f64,
    pub id: f64,
}

impl LossParts {
    fn read<T: Scalar>(g: &Graph<T>, v: &LossVars) -> Self {
        LossParts { total: g.item(v.total).as_f64(), l2: g.item(v.l2).as_f64(), lpips: g.item(v.lpips).as_f64(), id: g.item(v.id).as_f64() }
    }

    fn add_scaled(&mut self, o: &LossParts, s: f64) {
        self.total += s * o.total;
        self.l2 += s * o.l2;
        self.lpips += s * o.lpips;
        self.id += s * o.id;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l2.is_finite() && self.lpips.is_finite() && self.id.is_finite()
    }
}

/// Mean over taps of the mean squared feature difference.
pub fn feature_distance<T: Scalar>(g: &mut Graph<T>, net: &ProxyNet, a: Var, b: Var) -> Result<Var> {
    let p = net.bind(g)?;
    let fa = net.features(g, &p, a)?;
    let fb = net.features(g, &p, b)?;
    let mut acc: Option<Var> = None;
    for (&x, &y) in fa.taps.iter().zip(&fb.taps) {
        let d = g.mse(x, y)?;
        acc = Some(match acc {
            Some(s) => g.add(s, d)?,
            None => d,
        });
    }
    g.scale(acc.expect("proxy has taps"), 1.0 / fa.taps.len() as f64)
}

/// `1 − cos` between identity embeddings, averaged over the batch.
pub fn identity_distance<T: Scalar>(g: &mut Graph<T>, net: &ProxyNet, a: Var, b: Var) -> Result<Var> {
    let p = net.bind(g)?;
    let ea = net.features(g, &p, a)?.embedding;
    let eb = net.features(g, &p, b)?.embedding;
    let cos = g.cosine_similarity(ea, eb)?;
    let m = g.mean_all(cos)?;
    let neg = g.scale(m, -1.0)?;
    let one = g.scalar_constant(T::one())?;
    g.add(one, neg)
}

/// Weighted reconstruction loss between `[B, 3, R, R]` batches.
pub fn loss_rec<T: Scalar>(g: &mut Graph<T>, target: Var, pred: Var, w: &LossWeights, proxies: &Proxies) -> Result<LossVars> {
    ensure!(g.shape(target) == g.shape(pred), "loss_rec", "image shapes {:?} and {:?} differ", g.shape(target), g.shape(pred));
    ensure!(g.shape(target).len() == 4 && g.shape(target)[1] == 3, "loss_rec", "images must be [B, 3, R, R], got {:?}", g.shape(target));
    w.validate()?;
    let l2 = g.mse(target, pred)?;
    let lpips = feature_distance(g, &proxies.lpips, target, pred)?;
    let id = identity_distance(g, &proxies.id, target, pred)?;
    let a = g.scale(l2, w.l2)?;
    let b = g.scale(lpips, w.lpips)?;
    let c = g.scale(id, w.id)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars { total, l2, lpips, id })
}

/// Eager loss between two `[3, R, R]` images.
pub fn loss_rec_eager(target: &Tensor, pred: &Tensor, w: &LossWeights, proxies: &Proxies) -> Result<LossParts> {
    ensure!(target.shape() == pred.shape(), "loss_rec", "image shapes {:?} and {:?} differ", target.shape(), pred.shape());
    let mut g = Graph::new();
    let t = g.constant(&batch1(target)?)?;
    let p = g.constant(&batch1(pred)?)?;
    let v = loss_rec(&mut g, t, p, w, proxies)?;
    Ok(LossParts::read(&g, &v))
}

fn batch1<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = vec![1];
    s.extend_from_slice(img.shape());
    img.clone().reshape(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub log_every: usize,
    pub weights: LossWeights,
    /// Where to write the diagnostic dump when the loss diverges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl TrainRun {
    pub fn new(stage: Stage, steps: usize, batch: usize, lr: f64, seed: u64) -> Self {
        TrainRun { stage, steps, batch, optimizer: OptimizerConfig::ranger(lr), seed, log_every: 50, weights: LossWeights::default(), dump_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch > 0, "train", "batch size must be positive");
        ensure!(self.log_every > 0, "train", "log interval must be positive");
        ensure!(self.optimizer.lr > 0.0, "train", "learning rate must be positive, got {}", self.optimizer.lr);
        self.weights.validate()
    }
}

/// One metric-log line: batch-mean training loss at `step`, before that
/// step's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub lpips: f64,
    pub id: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<LogRecord>,
}

impl MetricLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("log record serializes") + "\n").collect()
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(MetricLog { records })
    }

    pub fn first(&self) -> Option<&LogRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    items: &'a [usize],
    loss: LossParts,
    param_norms: BTreeMap<String, f64>,
}

fn write_dump(run: &TrainRun, step: usize, items: &[usize], loss: LossParts, params: &ParamStore) -> Result<Option<PathBuf>> {
    let Some(dir) = &run.dump_dir else { return Ok(None) };
    let param_norms = params
        .iter()
        .map(|(k, t)| (k.to_string(), t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()))
        .collect();
    std::fs::create_dir_all(dir)?;
    let path = dir.join("divergence.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&DivergenceDump { step, items, loss, param_norms })?)?;
    Ok(Some(path))
}

type GradSet = Vec<Option<Vec<f32>>>;

/// Shared optimization loop. `sample` builds the loss of one item on a
/// fresh graph and returns its parameter gradients (already divided by the
/// batch size) with the loss parts. Gradients are reduced in item order, so
/// results do not depend on the thread count.
fn optimize<F>(params: &mut ParamStore, run: &TrainRun, n_items: usize, sample: F) -> Result<MetricLog>
where
    F: Fn(&ParamStore, usize) -> Result<(GradSet, LossParts)> + Sync,
{
    run.validate()?;
    ensure!(n_items > 0, "train", "training set is empty");
    let mut opt = Optimizer::new(run.optimizer);
    let mut rng = Rng::new(run.seed).fork(0x7472_6169);
    let mut log = MetricLog::default();
    for step in 0..run.steps {
        let items: Vec<usize> = (0..run.batch).map(|_| rng.below(n_items)).collect();
        let snapshot = &*params;
        let results: Vec<Result<(GradSet, LossParts)>> = items.par_iter().map(|&i| sample(snapshot, i)).collect();
        let mut sets = Vec::with_capacity(items.len());
        let mut parts = LossParts::default();
        for r in results {
            let (set, lp) = r?;
            parts.add_scaled(&lp, 1.0 / items.len() as f64);
            sets.push(set);
        }
        if !parts.is_finite() {
            let dump = write_dump(run, step, &items, parts, params)?;
            let at = dump.map(|p| format!("; dump written to {}", p.display())).unwrap_or_default();
            return Err(Error::numeric("train", format!("loss diverged at step {step}: {parts:?}{at}")));
        }
        if step % run.log_every == 0 || step + 1 == run.steps {
            log.records.push(LogRecord { step, loss: parts.total, mse: parts.l2, lpips: parts.lpips, id: parts.id });
        }
        params.accumulate(&sum_grads(sets), 1.0)?;
        fill_missing_grads(params)?;
        opt.step(params)?;
        params.zero_grad();
    }
    Ok(log)
}

/// Trainable entries unreachable from the loss get an explicit zero
/// gradient so the optimizer can step them.
fn fill_missing_grads(params: &mut ParamStore) -> Result<()> {
    for (_, t) in params.iter_mut() {
        if t.requires_grad() && t.grad().is_none() {
            let z = vec![0.0; t.numel()];
            t.accumulate_grad(&z)?;
        }
    }
    Ok(())
}

struct OneStagePass {
    recon: Var,
    w_plus: Var,
    deltas: BTreeMap<usize, Var>,
    bound: Bound,
}

/// Forward graph of the one-stage model on one image.
fn one_stage_graph(inv: &Inverter, params: &ParamStore, bundle: &GeneratorBundle, g: &mut Graph, image: &Tensor) -> Result<OneStagePass> {
    ensure!(inv.config.predict_w, "train_one_stage", "inverter has no w⁺ branch");
    let p = params.bind(g)?;
    let gp = bind_frozen(&bundle.params, g)?;
    let x = g.constant(&batch1(image)?)?;
    let out = inv.forward(g, &p, x, ForwardOpts::default())?;
    let w = out.w_plus.expect("w⁺ branch present");
    let recon = synthesize_graph(&bundle.config, g, &gp, w, &out.deltas, 0)?;
    Ok(OneStagePass { recon, w_plus: w, deltas: out.deltas, bound: p })
}

pub fn train_one_stage(run: &TrainRun, bundle: &GeneratorBundle, inverter: &Inverter, proxies: &Proxies, images: &[Tensor]) -> Result<(Inverter, MetricLog)> {
    ensure!(run.stage == Stage::One, "train_one_stage", "run is tagged for stage {:?}", run.stage);
    ensure!(inverter.generator == bundle.config, "train_one_stage", "inverter targets a different generator configuration");
    let frozen = bundle.checksum();
    let mut out = inverter.clone();
    let b = run.batch as f64;
    let log = optimize(&mut out.params, run, images.len(), |params, i| {
        let mut g = Graph::new();
        let pass = one_stage_graph(inverter, params, bundle, &mut g, &images[i])?;
        let target = g.constant(&batch1(&images[i])?)?;
        let lv = loss_rec(&mut g, target, pass.recon, &run.weights, proxies)?;
        let scaled = g.scale(lv.total, 1.0 / b)?;
        let grads = g.backward(scaled)?;
        Ok((params.collect_grads(&pass.bound, &grads), LossParts::read(&g, &lv)))
    })?;
    ensure!(bundle.checksum() == frozen, "train_one_stage", "generator weights changed during training");
    Ok((out, log))
}

/// Stage-1 outputs cached per image: the generator and stage-1 inverter are
/// frozen, so `w₀⁺` and `Î₀` never change during refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOneCache {
    pub w_plus: Vec<Tensor>,
    pub recon: Vec<Tensor>,
}

impl StageOneCache {
    pub fn build(stage1: &Inverter, bundle: &GeneratorBundle, images: &[Tensor]) -> Result<Self> {
        let pairs: Vec<Result<(Tensor, Tensor)>> = images
            .par_iter()
            .map(|img| {
                let w = stage1.invert_w(img)?;
                let r = bundle.synthesize(&w, None)?;
                Ok((w, r))
            })
            .collect();
        let mut cache = StageOneCache { w_plus: Vec::new(), recon: Vec::new() };
        for p in pairs {
            let (w, r) = p?;
            cache.w_plus.push(w);
            cache.recon.push(r);
        }
        Ok(cache)
    }
}

fn two_stage_graph(
    refiner: &Inverter,
    params: &ParamStore,
    bundle: &GeneratorBundle,
    g: &mut Graph,
    image: &Tensor,
    w0: &Tensor,
    recon0: &Tensor,
) -> Result<(Var, Bound)> {
    ensure!(refiner.config.in_channels == 6 && !refiner.config.predict_w, "train_two_stage", "refiner must take [I, Î₀] and predict residuals only");
    let p = params.bind(g)?;
    let gp = bind_frozen(&bundle.params, g)?;
    let x = g.constant(&batch1(image)?)?;
    let x0 = g.constant(&batch1(recon0)?)?;
    let inp = g.concat(&[x, x0], 1)?;
    let out = refiner.forward(g, &p, inp, ForwardOpts::default())?;
    let w = g.constant(&batch1(w0)?)?;
    let recon = synthesize_graph(&bundle.config, g, &gp, w, &out.deltas, 0)?;
    Ok((recon, p))
}

/// Trains a refiner on top of a frozen stage-1 inverter.
pub fn train_two_stage(
    run: &TrainRun,
    bundle: &GeneratorBundle,
    stage1: &Inverter,
    refiner: &Inverter,
    proxies: &Proxies,
    images: &[Tensor],
) -> Result<(Inverter, MetricLog)> {
    ensure!(run.stage == Stage::Two, "train_two_stage", "run is tagged for stage {:?}", run.stage);
    ensure!(stage1.generator == bundle.config && refiner.generator == bundle.config, "train_two_stage", "inverters target a different generator configuration");
    let before = (stage1.checksum(), bundle.checksum());
    let cache = StageOneCache::build(stage1, bundle, images)?;
    let mut out = refiner.clone();
    let b = run.batch as f64;
    let log = optimize(&mut out.params, run, images.len(), |params, i| {
        let mut g = Graph::new();
        let (recon, p) = two_stage_graph(refiner, params, bundle, &mut g, &images[i], &cache.w_plus[i], &cache.recon[i])?;
        let target = g.constant(&batch1(&images[i])?)?;
        let lv = loss_rec(&mut g, target, recon, &run.weights, proxies)?;
        let scaled = g.scale(lv.total, 1.0 / b)?;
        let grads = g.backward(scaled)?;
        Ok((params.collect_grads(&p, &grads), LossParts::read(&g, &lv)))
    })?;
    ensure!((stage1.checksum(), bundle.checksum()) == before, "train_two_stage", "frozen stage-1 or generator weights changed");
    Ok((out, log))
}

/// How images are reconstructed for evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Model<'a> {
    /// w⁺ branch only; residuals ignored.
    WOnly(&'a Inverter),
    OneStage(&'a Inverter),
    TwoStage { stage1: &'a Inverter, refiner: &'a Inverter },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub w_plus: Tensor,
    pub deltas: SlotDeltas,
    pub image: Tensor,
}

impl Model<'_> {
    pub fn reconstruct(&self, bundle: &GeneratorBundle, image: &Tensor) -> Result<Reconstruction> {
        match *self {
            Model::WOnly(inv) => {
                let w_plus = inv.invert_w(image)?;
                let img = bundle.synthesize(&w_plus, None)?;
                Ok(Reconstruction { w_plus, deltas: SlotDeltas::new(), image: img })
            }
            Model::OneStage(inv) => {
                let mut g = Graph::new();
                let pass = one_stage_graph(inv, &inv.params, bundle, &mut g, image)?;
                let w_plus = g.tensor(pass.w_plus).reshape([inv.generator.n_w(), inv.generator.style_dim])?;
                let deltas = unbatch_deltas(&g, &pass.deltas)?;
                let img = g.tensor(pass.recon).reshape(image.shape().to_vec())?;
                Ok(Reconstruction { w_plus, deltas, image: img })
            }
            Model::TwoStage { stage1, refiner } => {
                let w0 = stage1.invert_w(image)?;
                let r0 = bundle.synthesize(&w0, None)?;
                let mut g = Graph::new();
                let p = refiner.params.bind(&mut g)?;
                let x = g.constant(&batch1(image)?)?;
                let x0 = g.constant(&batch1(&r0)?)?;
                let inp = g.concat(&[x, x0], 1)?;
                let out = refiner.forward(&mut g, &p, inp, ForwardOpts::default())?;
                let deltas = unbatch_deltas(&g, &out.deltas)?;
                let img = bundle.synthesize(&w0, Some(&deltas))?;
                Ok(Reconstruction { w_plus: w0, deltas, image: img })
            }
        }
    }
}

fn unbatch_deltas(g: &Graph, d: &BTreeMap<usize, Var>) -> Result<SlotDeltas> {
    d.iter().map(|(&k, &v)| Ok((k, g.tensor(v).reshape(g.shape(v)[1..].to_vec())?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub lpips: f64,
    /// Identity cosine similarity; 1 for identical images.
    pub id: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_image: Vec<ImageMetrics>,
    pub mse: f64,
    pub lpips: f64,
    pub id: f64,
}

/// Metrics of `preds` against `targets`, paired by index.
pub fn score(preds: &[Tensor], targets: &[Tensor], proxies: &Proxies) -> Result<Metrics> {
    ensure!(!targets.is_empty(), "evaluate", "dataset is empty");
    ensure!(preds.len() == targets.len(), "evaluate", "{} predictions for {} targets", preds.len(), targets.len());
    let per: Vec<Result<ImageMetrics>> = preds
        .par_iter()
        .zip(targets)
        .map(|(p, t)| {
            let w = LossWeights { l2: 1.0, lpips: 1.0, id: 1.0 };
            let lp = loss_rec_eager(t, p, &w, proxies)?;
            Ok(ImageMetrics { mse: lp.l2, lpips: lp.lpips, id: 1.0 - lp.id })
        })
        .collect();
    let per_image: Vec<ImageMetrics> = per.into_iter().collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(Metrics { mse: mean(|m| m.mse), lpips: mean(|m| m.lpips), id: mean(|m| m.id), per_image })
}

pub fn reconstruct_all(model: &Model, bundle: &GeneratorBundle, samples: &[Sample]) -> Result<Vec<Reconstruction>> {
    samples.par_iter().map(|s| model.reconstruct(bundle, &s.image)).collect()
}

pub fn evaluate(model: &Model, bundle: &GeneratorBundle, samples: &[Sample], proxies: &Proxies) -> Result<Metrics> {
    ensure!(!samples.is_empty(), "evaluate", "dataset is empty");
    let recs = reconstruct_all(model, bundle, samples)?;
    let preds: Vec<Tensor> = recs.into_iter().map(|r| r.image).collect();
    let targets: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    score(&preds, &targets, proxies)
}

/// Top-`k` principal directions of sampled w vectors with their
/// explained-variance ratios.
pub fn pca_directions(bundle: &GeneratorBundle, n_samples: usize, k: usize, rng: &mut Rng) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = bundle.config.style_dim;
    ensure!(k >= 1 && k <= d, "pca_directions", "k = {} must lie in 1..={}", k, d);
    ensure!(n_samples > d, "pca_directions", "need more than {} samples, got {}", d, n_samples);
    let z = Tensor::randn([n_samples, d], 1.0, rng);
    let w = bundle.map_latent_batch(&z)?;
    pca_of(&w.to_f64_vec(), n_samples, d, k)
}

/// PCA of row-major `[n, d]` samples; ratios are over total variance.
pub fn pca_of(samples: &[f64], n: usize, d: usize, k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (dirs, var) = principal_axes(samples, n, d, d)?;
    let total: f64 = var.iter().sum();
    ensure!(total > 0.0, "pca_directions", "samples have zero variance");
    Ok((dirs.into_iter().take(k).collect(), var.iter().take(k).map(|v| v / total).collect()))
}

/// Shifts rows `layers` of `w⁺` by `strength · direction`.
pub fn edit_code(w_plus: &Tensor, direction: &[f64], strength: f64, layers: Range<usize>) -> Result<Tensor> {
    let s = w_plus.shape();
    ensure!(s.len() == 2, "apply_edit", "w⁺ must be [N_w, D], got {:?}", s);
    ensure!(!layers.is_empty(), "apply_edit", "empty layer range {:?}", layers);
    ensure!(layers.end <= s[0], "apply_edit", "layer range {:?} exceeds N_w = {}", layers, s[0]);
    ensure!(direction.len() == s[1], "apply_edit", "direction has {} entries, style_dim is {}", direction.len(), s[1]);
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!((norm - 1.0).abs() < 1e-4, "apply_edit", "direction must be unit norm, has norm {}", norm);
    let mut out = w_plus.clone();
    let d = s[1];
    for r in layers {
        for (j, dv) in direction.iter().enumerate() {
            let v = &mut out.data_mut()[r * d + j];
            *v = (*v as f64 + strength * dv) as f32;
        }
    }
    Ok(out)
}

/// Edited synthesis; stored residuals are applied unchanged.
pub fn apply_edit(
    bundle: &GeneratorBundle,
    w_plus: &Tensor,
    direction: &[f64],
    strength: f64,
    layers: Range<usize>,
    residuals: Option<&SlotDeltas>,
) -> Result<Tensor> {
    let w = edit_code(w_plus, direction, strength, layers)?;
    bundle.synthesize(&w, residuals)
}

/// MSE over pixels where `mask` (`[R, R]`, true = counted) holds.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "masked_mse", "shapes {:?} and {:?} differ", a.shape(), b.shape());
    let plane = mask.len();
    ensure!(a.numel() % plane.max(1) == 0 && plane > 0, "masked_mse", "mask of {} pixels does not tile {:?}", plane, a.shape());
    let (mut s, mut n) = (0.0, 0usize);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask[i % plane] {
            let d = x as f64 - y as f64;
            s += d * d;
            n += 1;
        }
    }
    ensure!(n > 0, "masked_mse", "mask selects no pixels");
    Ok(s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_domain, Transform};
    use crate::encoder::InverterConfig;
    use crate::generator::GeneratorConfig;
    use crate::refinement::Scaling;

    fn gen_cfg() -> GeneratorConfig {
        GeneratorConfig { resolutions: vec![4, 8, 16], channels: vec![16, 16, 16], style_dim: 16, mapping_depth: 2, ..GeneratorConfig::default() }
    }

    fn inv_cfg(n_r: usize) -> InverterConfig {
        InverterConfig { encoder_channels: vec![8, 16, 16, 16], token_dim: 16, heads: 2, blocks: 3, n_r, rank: 4, ..InverterConfig::default() }
    }

    fn setup() -> (GeneratorBundle, Proxies) {
        (GeneratorBundle::fixture(gen_cfg(), 0).unwrap(), Proxies::default())
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let (b, px) = setup();
        let img = b.synthesize(&b.broadcast_w(&b.mean_w(64, 1).unwrap()).unwrap(), None).unwrap();
        let lp = loss_rec_eager(&img, &img, &LossWeights::default(), &px).unwrap();
        assert_eq!(lp.l2, 0.0);
        assert_eq!(lp.lpips, 0.0);
        assert!(lp.id.abs() < 1e-6);
    }

    #[test]
    fn constant_offset_gives_offset_squared() {
        let (_, px) = setup();
        let img = Tensor::randn([3, 16, 16], 0.3, &mut Rng::new(2));
        let mut off = img.clone();
        off.data_mut().iter_mut().for_each(|v| *v += 0.1);
        let lp = loss_rec_eager(&img, &off, &LossWeights { l2: 1.0, lpips: 0.0, id: 0.0 }, &px).unwrap();
        assert!((lp.total - 0.01).abs() < 1e-6);
        assert!(loss_rec_eager(&img, &Tensor::zeros([3, 8, 8]), &LossWeights::default(), &px).unwrap_err().is_contract());
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights { l2: -1.0, lpips: 0.0, id: 0.0 }.validate().is_err());
    }

    #[test]
    fn zero_steps_leave_inverter_unchanged() {
        let (b, px) = setup();
        let inv = Inverter::new(inv_cfg(2), b.config.clone(), 1, None).unwrap();
        let d = make_domain(&b, 1, 2, 1, Transform::Identity).unwrap();
        let imgs: Vec<Tensor> = d.train.iter().map(|s| s.image.clone()).collect();
        let run = TrainRun::new(Stage::One, 0, 2, 1e-3, 0);
        let (out, log) = train_one_stage(&run, &b, &inv, &px, &imgs).unwrap();
        assert_eq!(out.checksum(), inv.checksum());
        assert!(log.records.is_empty());
    }

    #[test]
    fn zero_heads_match_w_only_reconstruction() {
        let (b, _) = setup();
        let inv = Inverter::new(inv_cfg(3), b.config.clone(), 1, Some(&b.mean_w(256, 3).unwrap())).unwrap();
        let img = make_domain(&b, 2, 1, 1, Transform::Identity).unwrap().train[0].image.clone();
        let full = Model::OneStage(&inv).reconstruct(&b, &img).unwrap();
        let w_only = Model::WOnly(&inv).reconstruct(&b, &img).unwrap();
        assert_eq!(full.image, w_only.image);
    }

    #[test]
    fn stage_mismatch_rejected() {
        let (b, px) = setup();
        let inv = Inverter::new(inv_cfg(0), b.config.clone(), 1, None).unwrap();
        let imgs = vec![Tensor::zeros([3, 16, 16])];
        let run = TrainRun::new(Stage::Two, 1, 1, 1e-3, 0);
        assert!(train_one_stage(&run, &b, &inv, &px, &imgs).unwrap_err().is_contract());
    }

    #[test]
    fn two_stage_step_zero_reproduces_stage_one_and_keeps_it_frozen() {
        let (b, px) = setup();
        let stage1 = Inverter::new(inv_cfg(0), b.config.clone(), 4, Some(&b.mean_w(256, 3).unwrap())).unwrap();
        let refiner = Inverter::refiner_from(&stage1, InverterConfig { scaling: Scaling::PerLayer, ..inv_cfg(3) }, 5).unwrap();
        let d = make_domain(&b, 3, 3, 2, Transform::Contrast { factor: 1.4 }).unwrap();
        for s in &d.test {
            let w0 = Model::WOnly(&stage1).reconstruct(&b, &s.image).unwrap();
            let two = Model::TwoStage { stage1: &stage1, refiner: &refiner }.reconstruct(&b, &s.image).unwrap();
            assert_eq!(two.image, w0.image);
        }
        let imgs: Vec<Tensor> = d.train.iter().map(|s| s.image.clone()).collect();
        let sum = stage1.checksum();
        let run = TrainRun::new(Stage::Two, 3, 2, 1e-3, 0);
        let (trained, log) = train_two_stage(&run, &b, &stage1, &refiner, &px, &imgs).unwrap();
        assert_eq!(stage1.checksum(), sum);
        assert_ne!(trained.checksum(), refiner.checksum());
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn frozen_entries_reject_gradients() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros([2]));
        store.freeze();
        assert!(store.accumulate(&[Some(vec![1.0, 1.0])], 1.0).unwrap_err().is_contract());
    }

    #[test]
    fn oracle_inverter_is_exact_in_domain() {
        let (b, px) = setup();
        let d = make_domain(&b, 7, 1, 4, Transform::Identity).unwrap();
        let preds: Vec<Tensor> = d.test.iter().map(|s| b.synthesize(&s.w_plus, None).unwrap()).collect();
        let targets: Vec<Tensor> = d.test.iter().map(|s| s.image.clone()).collect();
        let m = score(&preds, &targets, &px).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!((m.id - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_prediction_scores_dataset_variance() {
        let (b, px) = setup();
        let d = make_domain(&b, 8, 1, 6, Transform::Identity).unwrap();
        let targets: Vec<Tensor> = d.test.iter().map(|s| s.image.clone()).collect();
        let all: Vec<f64> = targets.iter().flat_map(|t| t.to_f64_vec()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
        let preds = vec![Tensor::full([3, 16, 16], mean as f32); targets.len()];
        let m = score(&preds, &targets, &px).unwrap();
        assert!((m.mse - var).abs() < 1e-6 * var.max(1.0));
        assert!(score(&[], &[], &px).is_err());
    }

    #[test]
    fn pca_components_are_orthonormal() {
        let (b, _) = setup();
        let (dirs, ratios) = pca_directions(&b, 400, 4, &mut Rng::new(3)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, c)| a * c).sum();
                assert!((dot - (i == j) as u8 as f64).abs() < 1e-6);
            }
        }
        assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca_directions(&b, 400, 17, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn isotropic_samples_give_uniform_ratios() {
        let (n, d) = (20_000, 4);
        let mut rng = Rng::new(11);
        let x = rng.normal_vec(n * d, 1.0);
        let (_, ratios) = pca_of(&x, n, d, d).unwrap();
        assert!(ratios.iter().all(|r| (r - 0.25).abs() < 0.02), "{ratios:?}");
    }

    #[test]
    fn edits_are_affine_in_strength() {
        let (b, _) = setup();
        let w = b.broadcast_w(&b.mean_w(32, 0).unwrap()).unwrap();
        let mut dir = vec![0.0; 16];
        dir[3] = 1.0;
        assert_eq!(edit_code(&w, &dir, 0.0, 0..4).unwrap(), w);
        let up = edit_code(&w, &dir, 0.5, 2..5).unwrap();
        let down = edit_code(&w, &dir, -0.5, 2..5).unwrap();
        let avg: Vec<f32> = up.data().iter().zip(down.data()).map(|(a, c)| (a + c) / 2.0).collect();
        assert!(avg.iter().zip(w.data()).all(|(a, c)| (a - c).abs() < 1e-6));
        assert!(edit_code(&w, &dir, 1.0, 3..3).unwrap_err().is_contract());
        assert!(edit_code(&w, &[1.0, 1.0], 1.0, 0..1).is_err());
    }

    #[test]
    fn metric_log_round_trips() {
        let log = MetricLog { records: vec![LogRecord { step: 0, loss: 1.5, mse: 0.25, lpips: 0.5, id: 0.1 }] };
        assert_eq!(MetricLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}
