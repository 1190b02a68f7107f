//! Invariant suite behind the `verify` command and the acceptance run.
//! Each check returns a pass flag and a one-line measurement.

use std::collections::BTreeMap;

use crate::adaptation::{swd, swd_graph, swd_directions, SwdConfig};
use crate::encoder::{block_graph, grouped_self_attention, standard_self_attention, ForwardOpts, Inverter, InverterConfig};
use crate::error::Result;
use crate::generator::{modulate_graph, DemodOrder, GeneratorBundle, GeneratorConfig, SlotDeltas};
use crate::gradcheck::{check_fn, check_op, op_cases};
use crate::inversion::{loss_rec_eager, LossWeights};
use crate::io::checkpoint::{Checkpoint, Provenance};
use crate::io::config::desk_generator;
use crate::io::image::{decode_png, encode_png};
use crate::linalg;
use crate::proxy::Proxies;
use crate::refinement::{count_trainables, kernel_spectrum, FactorInit, ResidualFactors, Scaling};
use crate::tensor::{Graph, ParamStore, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

/// Frozen fixture generator shared by the checks.
pub fn fixture() -> Result<GeneratorBundle> {
    GeneratorBundle::fixture(desk_generator(), 0)
}

/// Every primitive op, plus the modulate→residual→demodulate→conv chain and
/// the SWD path, against central differences in f64.
pub fn gradients(seeds: std::ops::Range<u64>, h: f64, tol: f64) -> Result<Check> {
    let mut worst = (String::new(), 0.0f64);
    let mut cases = 0;
    let mut note = |name: &str, err: f64| {
        cases += 1;
        if err > worst.1 || worst.0.is_empty() {
            worst = (name.to_string(), err);
        }
    };
    for seed in seeds.clone() {
        for (spec, inputs) in op_cases(seed) {
            let r = check_op(&spec, &inputs, seed, h)?;
            note(&r.name, r.rel_err);
        }
        for order in [DemodOrder::After, DemodOrder::Before] {
            let r = modulation_chain(seed, order, h)?;
            note(&r.0, r.1);
        }
        let r = swd_path(seed, h)?;
        note("swd", r);
    }
    let detail = format!("{cases} cases over seeds {:?}; worst {} rel err {:.2e}", seeds, worst.0, worst.1);
    Ok(Check::new("gradients", worst.1 < tol, detail))
}

fn modulation_chain(seed: u64, order: DemodOrder, h: f64) -> Result<(String, f64)> {
    let mut rng = Rng::new(seed).fork(0x6d6f64);
    let (b, ci, co, r) = (2, 3, 4, 5);
    let s = Tensor::<f64>::randn([b, ci], 0.5, &mut rng).cast::<f64>();
    let s = Tensor::from_f64([b, ci], &s.data().iter().map(|v| v + 1.0).collect::<Vec<_>>())?;
    let w0 = Tensor::<f64>::randn([co, ci, 3, 3], 1.0, &mut rng);
    let delta = Tensor::<f64>::randn([co, ci], 0.3, &mut rng);
    let x = Tensor::<f64>::randn([b, ci, r, r], 1.0, &mut rng);
    let weights = Tensor::<f64>::randn([b, co, r, r], 1.0, &mut rng);
    let name = format!("modulate-residual-demod-conv ({order:?})");
    let c = check_fn(&name, &[s, w0, delta, x], h, |g, v| {
        let w = modulate_graph(g, v[0], v[1], Some(v[2]), true, order)?;
        let y = g.conv2d(v[3], w, 1)?;
        let wt = g.constant(&weights)?;
        let p = g.mul(y, wt)?;
        g.sum_all(p)
    })?;
    Ok((name, c.rel_err))
}

fn swd_path(seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(0x737764);
    let (n, d, k) = (6, 3, 4);
    let dirs = swd_directions::<f64>(k, d, seed)?;
    // resample until no projection gap is small enough for a step to reorder
    let (a, bpts) = loop {
        let a = Tensor::<f64>::randn([n, d], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([n, d], 1.0, &mut rng);
        let min_gap = |t: &Tensor<f64>| -> f64 {
            let mut m = f64::INFINITY;
            for dir in dirs.data().chunks(d) {
                let mut p: Vec<f64> = t.data().chunks(d).map(|x| x.iter().zip(dir).map(|(u, v)| u * v).sum()).collect();
                p.sort_by(f64::total_cmp);
                m = p.windows(2).map(|w| w[1] - w[0]).fold(m, f64::min);
            }
            m
        };
        if min_gap(&a) > 20.0 * h && min_gap(&b) > 20.0 * h {
            break (a, b);
        }
    };
    Ok(check_fn("swd", &[a, bpts], h, |g, v| swd_graph(g, v[0], v[1], &dirs))?.rel_err)
}

/// Composed residuals have no singular value above `rel·σ₁` past index L.
pub fn low_rank_law(draws: usize, ranks: &[usize], rel: f64) -> Result<Check> {
    let cfg = desk_generator();
    let n_conv = cfg.n_conv();
    let mut rng = Rng::new(0x4c4157);
    let mut worst = 0.0f64;
    let mut layers = 0;
    for i in 0..draws {
        let rank = ranks[i % ranks.len()];
        let n_r = 1 + rng.below(n_conv);
        let scaling = [Scaling::PerLayer, Scaling::Shared, Scaling::Off][i % 3];
        let init = FactorInit { p_std: 1.0, q_std: 1.0, alpha: 0.5 + rng.uniform(), beta: 0.5 + rng.uniform() };
        let mut f = ResidualFactors::<f64>::new(&cfg, n_r, rank, scaling, &init, &mut rng)?;
        for (name, t) in f.params.iter_mut() {
            if name.ends_with('a') || name.ends_with('b') {
                t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
            }
        }
        for (slot, d) in f.deltas()? {
            let s = d.shape().to_vec();
            let sigma = linalg::singular_values(d.data(), s[0], s[1])?;
            let beyond = sigma.get(rank..).map(|t| t.iter().cloned().fold(0.0, f64::max)).unwrap_or(0.0);
            worst = worst.max(beyond / sigma[0].max(f64::MIN_POSITIVE));
            let _ = slot;
            layers += 1;
        }
    }
    let detail = format!("{draws} draws, {layers} layers, L in {ranks:?}; max σ_(L+1)/σ₁ = {worst:.2e}");
    Ok(Check::new("low-rank", worst <= rel, detail))
}

/// ΔW = 0, absent residuals and zero scaling all reproduce the baseline
/// bit for bit.
pub fn zero_identity(bundle: &GeneratorBundle, codes: usize) -> Result<Check> {
    let w = bundle.sample_codes(codes, &mut Rng::new(0x5a45))?;
    let base = bundle.synthesize(&w, None)?;
    let cfg = &bundle.config;
    let mut zero = SlotDeltas::new();
    for s in cfg.conv_slots() {
        zero.insert(s.index, Tensor::zeros([s.c_out, s.c_in]));
    }
    let with_zero = bundle.synthesize(&w, Some(&zero))?;
    let absent = bundle.synthesize(&w, Some(&SlotDeltas::new()))?;
    let mut f = ResidualFactors::<f32>::new(cfg, cfg.n_conv(), 8, Scaling::PerLayer, &FactorInit::default(), &mut Rng::new(3))?;
    f.set_all(".a", 0.0);
    f.set_all(".b", 0.0);
    let scaled = bundle.synthesize(&w, Some(&f.deltas()?))?;
    let same = |t: &Tensor| t.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let res = [("ΔW = 0", same(&with_zero)), ("absent", same(&absent)), ("A = B = 0", same(&scaled))];
    let passed = res.iter().all(|r| r.1);
    let detail = res.iter().map(|(n, ok)| format!("{n}: {}", if *ok { "identical" } else { "DIFFERS" })).collect::<Vec<_>>().join(", ");
    Ok(Check::new("zero-identity", passed, format!("{codes} codes; {detail}")))
}

fn block_params(seed: u64) -> Result<(Inverter, ParamStore<f64>)> {
    let g = desk_generator();
    let cfg = InverterConfig { encoder_channels: vec![8, 16, 16, 16], token_dim: 16, heads: 4, n_r: 4, rank: 3, predict_w: false, in_channels: 6, ..InverterConfig::default() };
    let mut inv = Inverter::new(cfg, g, seed, None)?;
    // nonzero output projections so every path is exercised
    let mut rng = Rng::new(seed).fork(9);
    for (name, t) in inv.params.iter_mut() {
        if name.starts_with("rblk.0.") && name.ends_with(".weight") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.normal() as f32);
        }
    }
    let p = inv.params.cast::<f64>();
    Ok((inv, p))
}

/// Perturbing one token group leaves every other group bit-identical when
/// cross-attention is off; a single group equals standard attention.
pub fn grouped_attention(seeds: std::ops::Range<u64>, tol: f64) -> Result<Check> {
    let mut isolated = true;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in seeds {
        let (inv, params) = block_params(seed)?;
        let c = inv.config.token_dim;
        let (groups, l) = (2 * inv.config.n_r, inv.config.rank);
        let mut rng = Rng::new(seed).fork(1);
        let x = Tensor::<f64>::randn([2, groups, l, c], 1.0, &mut rng);
        let run = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut g = Graph::<f64>::new();
            let p = params.bind(&mut g)?;
            let xv = g.constant(x)?;
            let f = g.constant(&Tensor::zeros([2, 16, 2, 2]))?;
            let pos = g.constant(&Tensor::zeros([4, 16]))?;
            let y = block_graph(&mut g, &p, "rblk.0", xv, f, pos, inv.config.heads, ForwardOpts { cross_attention: false })?;
            Ok(g.tensor(y))
        };
        let base = run(&x)?;
        let stride = l * c;
        for j in 0..groups {
            let mut x2 = x.clone();
            let b = rng.below(2);
            for v in &mut x2.data_mut()[(b * groups + j) * stride..(b * groups + j + 1) * stride] {
                *v += rng.normal();
            }
            let y = run(&x2)?;
            for bb in 0..2 {
                for i in 0..groups {
                    let off = (bb * groups + i) * stride;
                    let same = base.data()[off..off + stride] == y.data()[off..off + stride];
                    if same == ((bb, i) == (b, j)) {
                        isolated = false;
                    }
                }
            }
            cases += 1;
        }
        let x1 = Tensor::<f64>::randn([2, 1, 2 * l, c], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let p = params.bind(&mut g)?;
        let xv = g.constant(&x1)?;
        let grouped = grouped_self_attention(&mut g, &p, "rblk.0.self", xv, inv.config.heads)?;
        let flat = g.reshape(xv, &[2, 2 * l, c])?;
        let standard = standard_self_attention(&mut g, &p, "rblk.0.self", flat, inv.config.heads)?;
        let (a, s) = (g.tensor(grouped), g.tensor(standard));
        let num: f64 = a.data().iter().zip(s.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = s.data().iter().map(|y| y * y).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        worst = worst.max(num / den);
    }
    let detail = format!(
        "{cases} group perturbations {}; single group vs standard rel err {worst:.2e}",
        if isolated { "isolated" } else { "LEAKED" }
    );
    Ok(Check::new("grouped-attention", isolated && worst < tol, detail))
}

/// 1-D SWD against sorted squared 2-Wasserstein, identity and symmetry.
pub fn swd_oracle(sets: usize, tol: f64, sym_tol: f64) -> Result<Check> {
    let mut rng = Rng::new(0x5357);
    let (mut err, mut self_d, mut asym) = (0.0f64, 0.0f64, 0.0f64);
    let cfg = SwdConfig { directions: 16, ..SwdConfig::default() };
    for _ in 0..sets {
        let n = 2 + rng.below(30);
        let a = Tensor::<f64>::randn([n, 1], 1.0 + rng.uniform(), &mut rng);
        let b = Tensor::<f64>::randn([n, 1], 1.0 + rng.uniform(), &mut rng);
        let (mut sa, mut sb) = (a.data().to_vec(), b.data().to_vec());
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let w2: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        let d = swd(&a, &b, &cfg)?;
        err = err.max((d - w2).abs() / w2.max(1.0));
        self_d = self_d.max(swd(&a, &a, &cfg)?.abs());
        asym = asym.max((d - swd(&b, &a, &cfg)?).abs());
    }
    let passed = err <= tol && self_d == 0.0 && asym <= sym_tol;
    Ok(Check::new("swd-oracle", passed, format!("{sets} sets; max err {err:.2e}, max swd(a,a) {self_d:.1e}, max asymmetry {asym:.1e}")))
}

/// Averaged modulated-kernel spectra are monotone and top-heavy.
pub fn spectrum(bundle: &GeneratorBundle, samples: usize, fraction: f64, share: f64) -> Result<Check> {
    let r = kernel_spectrum(bundle, samples, &mut Rng::new(0x5350))?;
    let monotone = r.layers.iter().all(|l| l.sigma.windows(2).all(|w| w[0] >= w[1]));
    let csv_ok = {
        let csv = r.to_csv();
        let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            rows.entry(f[0].parse().unwrap_or(0)).or_default().push(f[2].parse().unwrap_or(f64::NAN));
        }
        rows.values().all(|v| v.windows(2).all(|w| w[0] >= w[1]))
    };
    let min = r.layers.iter().map(|l| l.top_share(fraction)).fold(f64::INFINITY, f64::min);
    let detail = format!("{} conv layers, {samples} samples; min top-{:.1}% share {:.3}; monotone {monotone}, csv monotone {csv_ok}", r.layers.len(), 100.0 * fraction, min);
    Ok(Check::new("spectrum", monotone && csv_ok && min > share, detail))
}

fn accounting() -> Result<Check> {
    let cfg = desk_generator();
    let mut ok = true;
    for (n_r, rank) in [(1, 1), (3, 4), (5, 8), (5, 32)] {
        let f = ResidualFactors::<f32>::zeros(&cfg, n_r, rank, Scaling::PerLayer)?;
        ok &= count_trainables(&f.channel_table(), rank, true)? as usize == f.numel();
    }
    let full = crate::io::costs::report_costs(&crate::io::load_profile("paper-fullscale-adapt")?)?.adaptation_trainables;
    ok &= full == 2_982_400;
    Ok(Check::new("accounting", ok, format!("enumeration matches formula; full-scale adaptation {full}")))
}

fn losses() -> Result<Check> {
    let px = Proxies::default();
    let w = LossWeights::default();
    let img = Tensor::randn([3, 16, 16], 0.4, &mut Rng::new(1));
    let same = loss_rec_eager(&img, &img, &w, &px)?;
    let shifted = Tensor::from_f64([3, 16, 16], &img.to_f64_vec().iter().map(|v| v + 0.1).collect::<Vec<_>>())?;
    let l2_only = LossWeights { l2: 1.0, lpips: 0.0, id: 0.0 };
    let off = loss_rec_eager(&img, &shifted, &l2_only, &px)?;
    let ok = same.total.abs() < 1e-6 && (off.total - 0.01).abs() < 1e-6;
    Ok(Check::new("losses", ok, format!("identical images {:.1e}, constant 0.1 offset MSE {:.6}", same.total, off.total)))
}

fn formats() -> Result<Check> {
    let mut p = ParamStore::new();
    p.insert("x", Tensor::randn([5, 7], 1.0, &mut Rng::new(4)));
    let c = Checkpoint { kind: "factors".into(), config: serde_json::json!({}), provenance: Provenance::fixed(1), params: p };
    let bytes = c.to_bytes()?;
    let ckpt_ok = Checkpoint::from_bytes(&bytes)?.to_bytes()? == bytes;
    let img = decode_png(&encode_png(&Tensor::randn([3, 8, 8], 0.5, &mut Rng::new(5)))?)?;
    let png_ok = decode_png(&encode_png(&img)?)? == img;
    Ok(Check::new("formats", ckpt_ok && png_ok, format!("checkpoint bit-identical {ckpt_ok}, png fixed point {png_ok}")))
}

fn generator_identities() -> Result<Check> {
    let cfg = GeneratorConfig { resolutions: vec![4, 8], channels: vec![8, 8], style_dim: 8, mapping_depth: 1, ..GeneratorConfig::default() };
    let b = GeneratorBundle::fixture(cfg, 2)?;
    let code = b.style_code(&[0.3; 8])?;
    let mut worst = 0.0f64;
    for s in b.config.conv_slots() {
        let st = Tensor::new([s.c_in], code.s[s.index].clone())?;
        let w = crate::generator::modulate_kernel(&st, b.params.get(&format!("slot.{}.kernel", s.index))?, true)?;
        for row in w.data().chunks(s.c_in * 9) {
            worst = worst.max((row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs());
        }
    }
    Ok(Check::new("demodulation", worst < 1e-5, format!("max |‖row‖ − 1| = {worst:.1e}")))
}

/// The full suite at the strength used by the `verify` command.
pub fn run_all() -> Result<Vec<Check>> {
    let bundle = fixture()?;
    Ok(vec![
        gradients(0..20, 1e-3, 1e-4)?,
        low_rank_law(100, &[1, 4, 8, 32], 1e-6)?,
        zero_identity(&bundle, 32)?,
        grouped_attention(0..3, 1e-6)?,
        swd_oracle(50, 1e-6, 1e-9)?,
        spectrum(&bundle, 64, 0.125, 0.5)?,
        accounting()?,
        losses()?,
        generator_identities()?,
        formats()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_all().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
