//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Training criteria start from an empty run directory under the cargo
//! target tmpdir, so the reported runtimes include every training step.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use refinestyle::encoder::Inverter;
use refinestyle::generator::GeneratorBundle;
use refinestyle::io::{load_profile, Checkpoint, RunConfig};
use refinestyle::verify;
use refinestyle::Result;
use refinestyle_cli::commands::{adapt_text, oneshot_with};
use refinestyle_cli::pipeline::{compare, Models, RunDir};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

struct Suite {
    root: PathBuf,
    results: Vec<bool>,
}

impl Suite {
    fn check(&mut self, n: usize, name: &str, f: impl FnOnce(&Path) -> Result<Outcome>) {
        let t = Instant::now();
        let r = f(&self.root);
        let secs = t.elapsed().as_secs_f64();
        let (passed, detail) = match r {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} [{n:>2}] {name}: {detail} ({secs:.1}s)", if passed { "PASS" } else { "FAIL" });
        self.results.push(passed);
    }
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = refinestyle_cli::run(std::iter::once("refinestyle").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8_lossy(&out).into_owned())
}

fn from_check(c: verify::Check, limit: Option<Duration>, elapsed: Duration) -> Outcome {
    let in_time = limit.is_none_or(|l| elapsed < l);
    let mut detail = c.detail;
    if let Some(l) = limit {
        detail.push_str(&format!("; runtime {:.1}s (limit {}s)", elapsed.as_secs_f64(), l.as_secs()));
    }
    outcome(c.passed && in_time, detail)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

/// Stage-1 plus refiner of the desk benchmark, shared by several criteria.
struct Benchmark {
    bundle: GeneratorBundle,
    stage1: Inverter,
    refiner: Inverter,
    stage1_checksum: String,
    elapsed: Duration,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

const ABLATION_SEEDS: [u64; 3] = [7, 8, 9];

fn run_dir(root: &Path, name: &str, cfg: RunConfig) -> RunDir {
    let mut rd = RunDir::new(root.join(name), cfg);
    rd.reproducible = true;
    rd
}

fn seeded(profile: &str, seed: u64) -> Result<RunConfig> {
    let mut c = load_profile(profile)?;
    c.seeds.run = seed;
    Ok(c)
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).expect("create acceptance dir");
    let mut s = Suite { root, results: Vec::new() };

    s.check(1, "parameter accounting", |root| {
        let out = root.join("account");
        let (r, dt) = timed(|| cli(&["account", "--profile", "paper-fullscale-adapt", "--out", out.to_str().unwrap()]));
        let (code, text) = r;
        let line = text.lines().find(|l| l.contains("adaptation trainable")).unwrap_or("").to_string();
        let n: u64 = line.rsplit(' ').next().unwrap_or("").replace(',', "").parse().unwrap_or(0);
        let rel = (n as f64 - 2.98e6).abs() / 2.98e6;
        let ok = code == 0 && n == 2_982_400 && rel <= 0.002 && dt < Duration::from_secs(1);
        Ok(outcome(ok, format!("`{line}`, {:.3}% from 2.98M, exit {code}, runtime {:.3}s", 100.0 * rel, dt.as_secs_f64())))
    });

    s.check(2, "low-rank law", |_| {
        let (c, dt) = timed(|| verify::low_rank_law(100, &[1, 4, 8, 32], 1e-6));
        Ok(from_check(c?, Some(Duration::from_secs(30)), dt))
    });

    s.check(3, "zero-residual identity", |_| {
        let b = verify::fixture()?;
        let (c, dt) = timed(|| verify::zero_identity(&b, 32));
        Ok(from_check(c?, Some(Duration::from_secs(10)), dt))
    });

    s.check(4, "gradient correctness", |_| {
        let (c, dt) = timed(|| verify::gradients(0..20, 1e-3, 1e-4));
        Ok(from_check(c?, Some(Duration::from_secs(120)), dt))
    });

    s.check(5, "grouped attention", |_| Ok(from_check(verify::grouped_attention(0..3, 1e-6)?, None, Duration::ZERO)));

    s.check(6, "swd oracle", |_| Ok(from_check(verify::swd_oracle(50, 1e-6, 1e-9)?, None, Duration::ZERO)));

    s.check(11, "kernel spectrum", |_| {
        let b = verify::fixture()?;
        Ok(from_check(verify::spectrum(&b, 64, 0.125, 0.5)?, None, Duration::ZERO))
    });

    s.check(12, "reproducibility", |root| {
        let tiny = [
            "budgets.stage1_steps=30",
            "budgets.stage2_steps=30",
            "budgets.log_every=5",
            "budgets.mean_w_samples=500",
            "domain.n_train=32",
            "ood.n_train=32",
            "ood.n_test=4",
            "adapt.steps=20",
        ];
        let mut logs = Vec::new();
        for rep in ["a", "b"] {
            let dir = root.join(format!("repro-{rep}"));
            let mut args = vec!["--profile", "desk-default", "--threads", "1", "--seed", "3", "--out", dir.to_str().unwrap()];
            for t in &tiny {
                args.extend(["--set", t]);
            }
            for cmd in ["train-invert", "adapt-text"] {
                let mut a = vec![cmd];
                a.extend(args.iter().copied());
                let (code, _) = cli(&a);
                if code != 0 {
                    return Ok(outcome(false, format!("{cmd} exited {code}")));
                }
            }
            let read = |n: &str| std::fs::read_to_string(dir.join(n)).unwrap_or_default();
            logs.push([read("stage1.log.jsonl"), read("refiner.log.jsonl"), read("adapt-text.log.jsonl")]);
        }
        let same_logs = logs[0] == logs[1] && logs[0].iter().all(|l| !l.is_empty());
        let mut round_trips = 0;
        for n in ["generator.rfsk", "stage1.rfsk", "refiner.rfsk", "adapt-text.rfsk"] {
            let bytes = std::fs::read(root.join("repro-a").join(n))?;
            if Checkpoint::from_bytes(&bytes)?.to_bytes()? == bytes {
                round_trips += 1;
            }
        }
        Ok(outcome(
            same_logs && round_trips == 4,
            format!("single-threaded logs identical: {same_logs}; {round_trips}/4 checkpoints bit-identical after load and save"),
        ))
    });

    s.check(9, "text-proxy adaptation", |root| {
        let rd = run_dir(root, "text", load_profile("desk-default")?);
        let b = rd.generator()?;
        let o = adapt_text(&rd, &b)?;
        let ok = o.cosine_start.abs() <= 0.1 && o.cosine_final >= 0.5 && o.generator_unchanged && o.seconds < 600.0;
        Ok(outcome(
            ok,
            format!(
                "seed {}: mean cosine {:.3} at start ({} perturbations) -> {:.3} after {} steps on {} held-out samples; generator unchanged {}; runtime {:.1}s",
                rd.config.seeds.run,
                o.cosine_start,
                o.perturbations,
                o.cosine_final,
                rd.config.adapt.steps,
                o.samples,
                o.generator_unchanged,
                o.seconds
            ),
        ))
    });

    let mut bench: Option<Benchmark> = None;
    s.check(7, "inversion improvement", |root| {
        let t = Instant::now();
        let rd = run_dir(root, "desk-full-7", seeded("desk-full", 7)?);
        let bundle = rd.generator()?;
        let (stage1, _) = rd.stage1(&bundle)?;
        let stage1_checksum = stage1.checksum();
        let (refiner, _) = rd.train_refiner(&bundle, &stage1)?;
        let elapsed = t.elapsed();
        let models = Models::TwoStage { stage1, refiner };
        let c = compare(&models, &bundle, &rd.domain(&bundle, &rd.config.ood)?, &rd.proxies)?;
        let Models::TwoStage { stage1, refiner } = models else { unreachable!() };
        let unchanged = stage1.checksum() == stage1_checksum;
        let share = c.improved as f64 / c.images as f64;
        let ok = share >= 0.9 && c.mean_reduction >= 0.2 && unchanged && elapsed < Duration::from_secs(1800);
        let detail = format!(
            "seed 7: mse {:.5} -> {:.5} ({:.1}% reduction), better on {}/{}; stage-1 unchanged {unchanged}; training {:.1}s on {} threads",
            c.baseline.mse,
            c.refined.mse,
            100.0 * c.mean_reduction,
            c.improved,
            c.images,
            elapsed.as_secs_f64(),
            rayon::current_num_threads()
        );
        bench = Some(Benchmark { bundle, stage1, refiner, stage1_checksum, elapsed });
        Ok(outcome(ok, detail))
    });

    s.check(10, "one-shot adaptation", |root| {
        let Some(bm) = &bench else { return Ok(outcome(false, "needs the trained benchmark models")) };
        let mut parts = Vec::new();
        let mut ok = true;
        for seed in ABLATION_SEEDS {
            let rd = run_dir(root, &format!("oneshot-{seed}"), seeded("desk-full", seed)?);
            let o = oneshot_with(&rd, &bm.bundle, &bm.stage1, &bm.refiner, None)?;
            let good = o.rec_drop() >= 0.8 && o.style_final < o.style_start && o.init_inverted.total < o.init_zero.total && o.generator_unchanged;
            ok &= good;
            parts.push(format!(
                "seed {seed}: rec -{:.1}%, style {:.4}->{:.4}, init {:.4} vs zero {:.4}",
                100.0 * o.rec_drop(),
                o.style_start,
                o.style_final,
                o.init_inverted.total,
                o.init_zero.total
            ));
        }
        Ok(outcome(ok, parts.join("; ")))
    });

    s.check(8, "ablation ordering", |root| {
        let Some(bm) = &bench else { return Ok(outcome(false, "needs the trained benchmark models")) };
        let variants = ["desk-full", "desk-no-factor", "desk-no-group-no-factor", "desk-L8"];
        let mut means = Vec::new();
        for v in variants {
            let mut mses = Vec::new();
            for seed in ABLATION_SEEDS {
                let rd = run_dir(root, &format!("{v}-{seed}"), seeded(v, seed)?);
                let refiner = if v == "desk-full" && seed == 7 {
                    bm.refiner.clone()
                } else {
                    rd.train_refiner(&bm.bundle, &bm.stage1)?.0
                };
                let models = Models::TwoStage { stage1: bm.stage1.clone(), refiner };
                mses.push(compare(&models, &bm.bundle, &rd.domain(&bm.bundle, &rd.config.ood)?, &rd.proxies)?.refined.mse);
            }
            means.push(mean(&mses));
        }
        // a pair holds only when the larger mean exceeds the smaller by more than 5%
        let pairs = [(0, 1), (1, 2), (2, 3)];
        let labels = ["full < no-factor", "no-factor < no-group-no-factor", "L=32 < L=8"];
        let mut ok = bm.stage1.checksum() == bm.stage1_checksum;
        let mut parts: Vec<String> = variants.iter().zip(&means).map(|(v, m)| format!("{v} {m:.5}")).collect();
        for ((a, b), label) in pairs.iter().zip(labels) {
            let gap = means[*b] / means[*a] - 1.0;
            let holds = gap > 0.05;
            ok &= holds;
            parts.push(format!("{label}: gap {:+.1}% {}", 100.0 * gap, if holds { "ok" } else { "VIOLATED" }));
        }
        parts.push(format!("seeds {ABLATION_SEEDS:?}, benchmark training {:.0}s", bm.elapsed.as_secs_f64()));
        Ok(outcome(ok, parts.join("; ")))
    });

    let passed = s.results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", s.results.len());
    if passed != s.results.len() {
        std::process::exit(1);
    }
}
