//! Runs every verb of the binary on a small scene.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
scene.height = 64
scene.width = 64
scene.sources = 6
mcmc.temperatures = 5
mcmc.chains = 2
mcmc.post_steps = 5
mcmc.sweeps = 1
";

fn skyfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = skyfit(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.conf");
    fs::write(&config, SMALL).unwrap();
    let run = dir.path().join("run");
    let (cfg, run_s) = (path(&config), path(&run));

    ok(&["--seed", "3", "--config", cfg, "simulate", "--run", run_s]);
    ok(&["fit-vi", "--run", run_s, "--threads", "2"]);
    ok(&["fit-mcmc", "--run", run_s]);
    ok(&["score", "--run", run_s]);
    ok(&["calibrate", "--run", run_s]);
    let summary = ok(&["report", "--run", run_s]);
    assert!(!summary.trim().is_empty());

    for f in [
        "scene",
        "prior.txt",
        "detections.csv",
        "posterior_vi.jsonl",
        "posterior_mcmc.jsonl",
        "fit_report.json",
        "sample_report.json",
        "scores.csv",
        "scores.json",
        "roc.csv",
        "calibration.csv",
        "timing.json",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let scores = fs::read_to_string(run.join("scores.csv")).unwrap();
    assert!(scores
        .starts_with("field,unit,vi_mae,vi_count,mcmc_mae,mcmc_count,vi_minus_mcmc,vi_minus_mcmc_se,paired_count"));
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    for verb in ["simulate", "fit-vi", "fit-mcmc", "score", "calibrate"] {
        assert!(manifest.contains(&format!("\"{verb}\"")), "manifest lacks {verb}");
    }
    assert!(manifest.contains("\"seed\": 3"));
}

#[test]
fn same_seed_gives_the_same_scene() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.conf");
    fs::write(&config, SMALL).unwrap();
    let catalog = |name: &str| {
        let run = dir.path().join(name);
        ok(&[
            "--seed",
            "5",
            "--config",
            path(&config),
            "simulate",
            "--run",
            path(&run),
        ]);
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(run.join("scene"))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        assert!(!files.is_empty());
        files
    };
    assert_eq!(catalog("a"), catalog("b"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    fs::write(&config, "scene.sorces = 3\n").unwrap();
    let out = skyfit(&[
        "--config",
        path(&config),
        "simulate",
        "--run",
        path(&dir.path().join("run")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene.sorces"));
}
