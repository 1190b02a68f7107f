use std::path::Path;

use refinestyle::io::Checkpoint;
use refinestyle_cli::run;

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("refinestyle").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

const TINY: [&str; 16] = [
    "--set",
    "budgets.stage1_steps=4",
    "--set",
    "budgets.stage2_steps=4",
    "--set",
    "budgets.mean_w_samples=64",
    "--set",
    "domain.n_train=8",
    "--set",
    "ood.n_train=8",
    "--set",
    "ood.n_test=3",
    "--set",
    "adapt.steps=3",
    "--set",
    "budgets.log_every=2",
];

fn tiny(cmd: &str, dir: &Path) -> (i32, String) {
    let mut args = vec![cmd, "--threads", "1", "--out", dir.to_str().unwrap()];
    args.extend(TINY);
    cli(&args)
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(cli(&["no-such-command"]).0, 64);
    assert_eq!(cli(&["account", "--no-such-flag"]).0, 64);
    assert_eq!(cli(&[]).0, 64);
    let (code, text) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(text.contains("train-invert") && text.contains("adapt-oneshot"));
}

#[test]
fn contract_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["account", "--profile", "no-such-profile", "--out", out]).0, 1);
    assert_eq!(cli(&["account", "--set", "refiner.no_such_key=1", "--out", out]).0, 1);
    assert_eq!(cli(&["spectrum", "--set", "refiner.rank=64", "--out", out]).0, 1);
    assert_eq!(cli(&["spectrum", "--set", "refiner.n_r=9", "--out", out]).0, 1);
    assert_eq!(cli(&["evaluate", "--out", out]).0, 1);
}

#[test]
fn account_reports_the_full_scale_count() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = cli(&["account", "--profile", "paper-fullscale-adapt", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(text.contains("adaptation trainable scalars: 2,982,400"), "{text}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("costs.json")).unwrap()).unwrap();
    assert_eq!(report["adaptation_trainables"], 2_982_400);
}

#[test]
fn config_file_with_profile_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{ "profile": "paper-two-stage", "refiner": { "rank": 8 } }"#).unwrap();
    let (code, text) = cli(&["account", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(text.contains("N_r = 17, L = 8"), "{text}");
    assert_eq!(cli(&["account", "--config", cfg.to_str().unwrap(), "--profile", "desk-default"]).0, 1);
}

#[test]
fn spectrum_csv_is_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = cli(&["spectrum", "--samples", "8", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    let mut last: Option<(String, f64)> = None;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let sigma: f64 = f[2].parse().unwrap();
        if let Some((layer, prev)) = &last {
            if layer == f[0] {
                assert!(sigma <= *prev);
            }
        }
        last = Some((f[0].to_string(), sigma));
    }
}

#[test]
fn two_stage_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(tiny("make-generator", d).0, 0);
    assert_eq!(tiny("make-domain", d).0, 0);
    assert!(d.join("ood/test/0002.png").is_file() && d.join("domain/manifest.json").is_file());
    let (code, text) = tiny("train-invert", d);
    assert_eq!(code, 0, "{text}");
    for f in ["stage1.rfsk", "refiner.rfsk", "stage1.log.jsonl", "refiner.log.jsonl"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let (code, text) = tiny("evaluate", d);
    assert_eq!(code, 0);
    assert!(text.contains("improved"), "{text}");
    let (code, text) = tiny("edit", d);
    assert_eq!(code, 0, "{text}");
    assert!(d.join("edit/edited.png").is_file());
    assert_eq!(tiny("adapt-oneshot", d).0, 0);
    assert_eq!(tiny("adapt-text", d).0, 0);
    let f = Checkpoint::load(&d.join("adapt-text.rfsk")).unwrap();
    assert_eq!(f.kind, "factors");
    // a second train-invert reuses the stage-1 checkpoint
    let (_, text) = tiny("train-invert", d);
    assert!(text.contains("reusing"), "{text}");
}

#[test]
fn seed_flag_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(a.path(), "1"), (b.path(), "2")] {
        let mut args = vec!["adapt-text", "--seed", seed, "--threads", "1", "--out", dir.to_str().unwrap()];
        args.extend(TINY);
        assert_eq!(cli(&args).0, 0);
    }
    let log = |d: &Path| std::fs::read_to_string(d.join("adapt-text.log.jsonl")).unwrap();
    assert_ne!(log(a.path()), log(b.path()));
}
