use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use serde::Serialize;

use refinestyle::adaptation::{
    adapt_one_shot, adapt_text_driven, direction_cosines, factors_from_refiner, one_shot_initial_loss, text_start, AdaptLog, AdaptRun, DomainSpec,
    OneShotLoss, Reference,
};
use refinestyle::domain::render_sample;
use refinestyle::encoder::Inverter;
use refinestyle::generator::GeneratorBundle;
use refinestyle::inversion::{apply_edit, pca_directions, Model};
use refinestyle::io::config::Mode;
use refinestyle::io::costs::{group_digits, report_costs, CostReport};
use refinestyle::io::image::{read_png, write_png};
use refinestyle::io::{factors_checkpoint, Provenance, RunConfig};
use refinestyle::proxy::{ProxyNet, EMBED_SEED};
use refinestyle::refinement::{kernel_spectrum, ResidualFactors, SpectrumReport};
use refinestyle::{verify, Error, Result, Rng, Tensor};

use crate::pipeline::{compare, Comparison, Models, RunDir};
use crate::{Cli, Command};

macro_rules! say {
    ($out:expr, $($fmt:tt)*) => {
        writeln!($out, $($fmt)*).map_err(Error::from)?
    };
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = cli.common.resolve()?;
    if let Command::Account(a) = &cli.command {
        return account(&cfg, a.timing, cli.common.samples.unwrap_or(4), &cli.common.out, out);
    }
    if let Command::Verify = &cli.command {
        return run_verify(out);
    }
    cfg.validate()?;
    let rd = RunDir::new(&cli.common.out, cfg);
    match &cli.command {
        Command::MakeGenerator => {
            let b = rd.make_generator()?;
            say!(out, "generator {} ({} params, checksum {})", rd.path(crate::pipeline::GENERATOR).display(), b.params.numel(), b.checksum());
        }
        Command::MakeDomain => make_domain(&rd, out)?,
        Command::TrainInvert => train_invert(&rd, out)?,
        Command::Evaluate => {
            let b = rd.generator()?;
            let c = evaluate(&rd, &b)?;
            say!(out, "baseline mse {:.5} lpips {:.5} id {:.4}", c.baseline.mse, c.baseline.lpips, c.baseline.id);
            say!(out, "refined  mse {:.5} lpips {:.5} id {:.4}", c.refined.mse, c.refined.lpips, c.refined.id);
            say!(out, "improved {}/{} images, mean mse reduction {:.1}%", c.improved, c.images, 100.0 * c.mean_reduction);
        }
        Command::Edit(a) => edit(&rd, a, out)?,
        Command::AdaptText => {
            let b = rd.generator()?;
            let t = adapt_text(&rd, &b)?;
            say!(out, "start: {} perturbations, mean cosine {:.3}", t.perturbations, t.cosine_start);
            say!(out, "final: mean cosine {:.3} over {} held-out samples", t.cosine_final, t.samples);
        }
        Command::AdaptOneshot(a) => {
            let b = rd.generator()?;
            let image = a.image.as_deref().map(read_png).transpose()?;
            let o = adapt_oneshot(&rd, &b, image)?;
            say!(out, "initial loss: inversion init {:.5}, zero init {:.5}", o.init_inverted.total, o.init_zero.total);
            say!(out, "rec {:.5} -> {:.5} ({:.1}% drop), style {:.5} -> {:.5}", o.rec_start, o.rec_final, 100.0 * o.rec_drop(), o.style_start, o.style_final);
        }
        Command::Spectrum => {
            let b = rd.generator()?;
            let r = spectrum(&rd, &b, cli.common.samples.unwrap_or(64))?;
            for l in &r.layers {
                say!(out, "slot {:>2}: sigma_1 {:.4}, top 12.5% share {:.3}", l.slot, l.sigma[0], l.top_share(0.125));
            }
            say!(out, "wrote {}", rd.path("spectrum.csv").display());
        }
        Command::Account(_) | Command::Verify => unreachable!(),
    }
    Ok(0)
}

fn make_domain(rd: &RunDir, out: &mut dyn Write) -> Result<()> {
    let b = rd.generator()?;
    for (name, dc) in [("domain", &rd.config.domain), ("ood", &rd.config.ood)] {
        let d = rd.domain(&b, dc)?;
        for (split, samples) in [("train", &d.train), ("test", &d.test)] {
            for (i, s) in samples.iter().enumerate() {
                write_png(&rd.path(&format!("{name}/{split}/{i:04}.png")), &s.image)?;
            }
        }
        rd.write(&format!("{name}/manifest.json"), serde_json::to_string_pretty(&d.manifest)?.as_bytes())?;
        say!(out, "{name}: {} train, {} test images ({:?})", d.train.len(), d.test.len(), dc.transform);
    }
    Ok(())
}

fn train_invert(rd: &RunDir, out: &mut dyn Write) -> Result<()> {
    let b = rd.generator()?;
    let t = Instant::now();
    match rd.config.mode {
        Mode::OneStage => {
            let (inv, log) = rd.train_one_stage_model(&b)?;
            if let Some(r) = log.last() {
                say!(out, "one-stage: {} steps, final batch mse {:.5}", r.step + 1, r.mse);
            }
            say!(out, "checksum {}", inv.checksum());
        }
        Mode::TwoStage => {
            let (stage1, log) = rd.stage1(&b)?;
            match log.as_ref().and_then(|l| l.last()) {
                Some(r) => say!(out, "stage-1: {} steps, final batch mse {:.5}", r.step + 1, r.mse),
                None => say!(out, "stage-1: reusing {}", rd.path(crate::pipeline::STAGE1).display()),
            }
            let checksum = stage1.checksum();
            let (refiner, log) = rd.train_refiner(&b, &stage1)?;
            if let Some(r) = log.last() {
                say!(out, "refiner: {} steps, final batch mse {:.5}", r.step + 1, r.mse);
            }
            say!(out, "stage-1 checksum {checksum}, refiner checksum {}", refiner.checksum());
        }
    }
    say!(out, "trained in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

/// Writes `evaluation.json` for the trained models of the run.
pub fn evaluate(rd: &RunDir, b: &GeneratorBundle) -> Result<Comparison> {
    let models = rd.models()?;
    let ood = rd.domain(b, &rd.config.ood)?;
    let c = compare(&models, b, &ood, &rd.proxies)?;
    rd.write("evaluation.json", serde_json::to_string_pretty(&c)?.as_bytes())?;
    Ok(c)
}

fn parse_layers(s: &str, n_w: usize) -> Result<Range<usize>> {
    let bad = || Error::contract("edit", format!("layers `{s}` is not start..end"));
    let (a, z) = s.split_once("..").ok_or_else(bad)?;
    let r = a.trim().parse().map_err(|_| bad())?..z.trim().parse().map_err(|_| bad())?;
    if r.is_empty() || r.end > n_w {
        return Err(Error::contract("edit", format!("layer range {r:?} must be non-empty and within 0..{n_w}")));
    }
    Ok(r)
}

fn edit(rd: &RunDir, a: &crate::EditArgs, out: &mut dyn Write) -> Result<()> {
    let b = rd.generator()?;
    let models = rd.models()?;
    let image = match &a.image {
        Some(p) => read_png(p)?,
        None => {
            let d = rd.domain(&b, &rd.config.ood)?;
            let n = d.test.len();
            d.test.into_iter().nth(a.index).ok_or_else(|| Error::contract("edit", format!("index {} outside the {n} test images", a.index)))?.image
        }
    };
    let r = b.config.resolution();
    if image.shape() != [3, r, r] {
        return Err(Error::contract("edit", format!("image is {:?}, the generator renders [3, {r}, {r}]", image.shape())));
    }
    let n_w = b.config.n_w();
    let layers = match &a.layers {
        Some(s) => parse_layers(s, n_w)?,
        None => 0..n_w,
    };
    let rec = models.model().reconstruct(&b, &image)?;
    let (dirs, var) = pca_directions(&b, 2000, a.direction + 1, &mut Rng::new(rd.config.seeds.run))?;
    let dir = &dirs[a.direction];
    let edited = apply_edit(&b, &rec.w_plus, dir, a.strength, layers.clone(), Some(&rec.deltas))?;
    let plain = apply_edit(&b, &rec.w_plus, dir, a.strength, layers.clone(), None)?;
    write_png(&rd.path("edit/input.png"), &image)?;
    write_png(&rd.path("edit/reconstruction.png"), &rec.image)?;
    write_png(&rd.path("edit/edited.png"), &edited)?;
    write_png(&rd.path("edit/edited-w-only.png"), &plain)?;
    say!(
        out,
        "direction {} ({:.1}% of w variance), strength {}, layers {:?}; wrote {}",
        a.direction,
        100.0 * var[a.direction],
        a.strength,
        layers,
        rd.path("edit").display()
    );
    Ok(())
}

fn adapt_run(cfg: &RunConfig) -> AdaptRun {
    AdaptRun { seed: cfg.seeds.run, ..cfg.adapt.clone() }
}

fn save_factors(rd: &RunDir, name: &str, f: &ResidualFactors, log: &AdaptLog) -> Result<()> {
    let prov = if rd.reproducible { Provenance::fixed(rd.config.seeds.run) } else { Provenance::now(rd.config.seeds.run) };
    factors_checkpoint(f, prov)?.save(&rd.path(&format!("{name}.rfsk")))?;
    rd.write(&format!("{name}.log.jsonl"), log.to_jsonl().as_bytes())?;
    Ok(())
}

fn save_samples(rd: &RunDir, b: &GeneratorBundle, dir: &str, f: &ResidualFactors) -> Result<()> {
    let codes = b.sample_codes(4, &mut Rng::new(rd.config.seeds.run ^ 0x696d67))?;
    let (src, adapted) = (b.synthesize(&codes, None)?, b.synthesize(&codes, Some(&f.deltas()?))?);
    let r = b.config.resolution();
    let plane = 3 * r * r;
    for i in 0..4 {
        let at = |t: &Tensor| Tensor::new([3, r, r], t.data()[i * plane..(i + 1) * plane].to_vec());
        write_png(&rd.path(&format!("{dir}/source-{i}.png")), &at(&src)?)?;
        write_png(&rd.path(&format!("{dir}/adapted-{i}.png")), &at(&adapted)?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TextOutcome {
    pub perturbations: usize,
    /// Held-out mean cosine at the perturbed start.
    pub cosine_start: f64,
    pub cosine_final: f64,
    pub samples: usize,
    pub generator_unchanged: bool,
    pub seconds: f64,
    #[serde(skip)]
    pub log: AdaptLog,
}

/// Text-proxy adaptation from zero factors of the configured factor model.
pub fn adapt_text(rd: &RunDir, b: &GeneratorBundle) -> Result<TextOutcome> {
    let c = &rd.config;
    let t0 = Instant::now();
    let checksum = b.checksum();
    let embedder = ProxyNet::new(EMBED_SEED);
    let spec = DomainSpec::from_transform(&c.text.name, c.text.target.clone(), b, &embedder, c.text.spec_samples, c.text.spec_seed)?;
    rd.write("text-spec.json", serde_json::to_string_pretty(&spec)?.as_bytes())?;
    let fm = c.factor_model();
    let zero = ResidualFactors::zeros(&b.config, fm.n_r, fm.rank, fm.scaling)?;
    let run = adapt_run(c);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let (start, _) = text_start(&spec, b, &zero, &embedder, &run)?;
    let cosine_start = mean(direction_cosines(&spec, b, &start, &embedder, c.text.eval_samples, c.text.eval_seed)?);
    let (f, log) = adapt_text_driven(&spec, b, &zero, &embedder, &run)?;
    let cosine_final = mean(direction_cosines(&spec, b, &f, &embedder, c.text.eval_samples, c.text.eval_seed)?);
    save_factors(rd, "adapt-text", &f, &log)?;
    save_samples(rd, b, "adapt-text", &f)?;
    let o = TextOutcome {
        perturbations: log.perturbations,
        cosine_start,
        cosine_final,
        samples: c.text.eval_samples,
        generator_unchanged: b.checksum() == checksum,
        seconds: t0.elapsed().as_secs_f64(),
        log,
    };
    rd.write("adapt-text.json", serde_json::to_string_pretty(&o)?.as_bytes())?;
    Ok(o)
}

#[derive(Clone, Debug, Serialize)]
pub struct OneShotOutcome {
    /// Loss at the inversion-based start.
    pub init_inverted: OneShotLoss,
    pub init_zero: OneShotLoss,
    pub rec_start: f64,
    pub rec_final: f64,
    pub style_start: f64,
    pub style_final: f64,
    pub generator_unchanged: bool,
    pub seconds: f64,
}

impl OneShotOutcome {
    pub fn rec_drop(&self) -> f64 {
        1.0 - self.rec_final / self.rec_start
    }
}

/// Reference rendered from the configured seed, offset by the run seed.
pub fn oneshot_reference(cfg: &RunConfig, b: &GeneratorBundle) -> Result<Tensor> {
    let z_seed = cfg.oneshot.reference_seed.wrapping_add(cfg.seeds.run);
    Ok(render_sample(b, z_seed, &cfg.oneshot.reference_transform)?.image)
}

/// One-shot adaptation initialized from the two-stage refiner.
pub fn adapt_oneshot(rd: &RunDir, b: &GeneratorBundle, image: Option<Tensor>) -> Result<OneShotOutcome> {
    let (stage1, refiner) = match rd.models()? {
        Models::TwoStage { stage1, refiner } => (stage1, refiner),
        Models::OneStage(_) => return Err(Error::contract("adapt_oneshot", "needs a two-stage run for the inversion-based initialization")),
    };
    oneshot_with(rd, b, &stage1, &refiner, image)
}

pub fn oneshot_with(rd: &RunDir, b: &GeneratorBundle, stage1: &Inverter, refiner: &Inverter, image: Option<Tensor>) -> Result<OneShotOutcome> {
    let c = &rd.config;
    let t0 = Instant::now();
    let checksum = b.checksum();
    let image = match image {
        Some(i) => i,
        None => oneshot_reference(c, b)?,
    };
    let reference = Reference::invert(&image, stage1, b, &c.weights, &rd.proxies)?;
    let inverted = factors_from_refiner(&reference, refiner, b)?;
    let zero = ResidualFactors::zeros(&b.config, refiner.config.n_r, refiner.config.rank, refiner.config.scaling)?;
    let run = adapt_run(c);
    let style = &rd.proxies.lpips;
    let init_inverted = one_shot_initial_loss(&reference, b, &inverted, style, &rd.proxies, &run)?;
    let init_zero = one_shot_initial_loss(&reference, b, &zero, style, &rd.proxies, &run)?;
    let (f, log) = adapt_one_shot(&reference, b, &inverted, style, &rd.proxies, &run)?;
    write_png(&rd.path("adapt-oneshot/reference.png"), &image)?;
    save_factors(rd, "adapt-oneshot", &f, &log)?;
    save_samples(rd, b, "adapt-oneshot", &f)?;
    // both ends on the first step's batch, the final one after the last update
    let end = one_shot_initial_loss(&reference, b, &f, style, &rd.proxies, &run)?;
    let o = OneShotOutcome {
        init_inverted,
        init_zero,
        rec_start: init_inverted.rec,
        rec_final: end.rec,
        style_start: init_inverted.style,
        style_final: end.style,
        generator_unchanged: b.checksum() == checksum,
        seconds: t0.elapsed().as_secs_f64(),
    };
    rd.write("adapt-oneshot.json", serde_json::to_string_pretty(&o)?.as_bytes())?;
    Ok(o)
}

pub fn spectrum(rd: &RunDir, b: &GeneratorBundle, samples: usize) -> Result<SpectrumReport> {
    let r = kernel_spectrum(b, samples, &mut Rng::new(rd.config.seeds.run))?;
    rd.write("spectrum.csv", r.to_csv().as_bytes())?;
    Ok(r)
}

fn time_inversions(cfg: &RunConfig, samples: usize) -> Result<f64> {
    let b = GeneratorBundle::fresh(cfg.generator.clone(), 0)?;
    let stage1 = Inverter::new(cfg.stage1.clone(), cfg.generator.clone(), 0, None)?;
    let refiner = Inverter::new(cfg.refiner.clone(), cfg.generator.clone(), 0, None)?;
    let model = match cfg.mode {
        Mode::OneStage => Model::OneStage(&stage1),
        Mode::TwoStage => Model::TwoStage { stage1: &stage1, refiner: &refiner },
    };
    let r = cfg.generator.resolution();
    let mut rng = Rng::new(0);
    let mut total = 0.0;
    for _ in 0..samples.max(1) {
        let img = Tensor::randn([3, r, r], 0.5, &mut rng);
        let t = Instant::now();
        model.reconstruct(&b, &img)?;
        total += t.elapsed().as_secs_f64();
    }
    Ok(1e3 * total / samples.max(1) as f64)
}

fn account(cfg: &RunConfig, timing: bool, samples: usize, dir: &std::path::Path, out: &mut dyn Write) -> Result<i32> {
    let mut report: CostReport = report_costs(cfg)?;
    if timing {
        cfg.validate()?;
        report.inversion_ms = Some(time_inversions(cfg, samples)?);
    }
    let fm = cfg.factor_model();
    say!(out, "profile {}: N_r = {}, L = {}", cfg.profile, fm.n_r, fm.rank);
    say!(out, "adaptation trainable scalars: {}", group_digits(report.adaptation_trainables));
    say!(out, "generator: {} params, {} MACs", group_digits(report.generator.params), group_digits(report.generator.macs));
    say!(out, "stage-1: {} params ({} trainable), {} MACs", group_digits(report.stage1.params), group_digits(report.stage1.trainable), group_digits(report.stage1.macs));
    if let Some(r) = &report.refiner {
        say!(out, "refiner: {} params ({} trainable), {} MACs", group_digits(r.params), group_digits(r.trainable), group_digits(r.macs));
    }
    if let Some(ms) = report.inversion_ms {
        say!(out, "inversion: {ms:.2} ms per image");
    }
    let path = dir.join("costs.json");
    refinestyle::io::checkpoint::write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    say!(out, "wrote {}", path.display());
    Ok(0)
}

fn run_verify(out: &mut dyn Write) -> Result<i32> {
    let checks = verify::run_all()?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        say!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    say!(out, "{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
