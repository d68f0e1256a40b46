use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stenosis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stenosis")).args(args).output().expect("binary runs")
}

fn gen(dir: &Path, n: &str, seed: &str) -> Output {
    stenosis(&["gen", "--n", n, "--seed", seed, "--out", dir.to_str().unwrap()])
}

#[test]
fn gen_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(gen(a.path(), "6", "3").status.success());
    assert!(gen(b.path(), "6", "3").status.success());
    let manifest = |d: &Path| fs::read(d.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
    assert_eq!(fs::read(a.path().join("images/s00000004.png")).unwrap(), fs::read(b.path().join("images/s00000004.png")).unwrap());
}

#[test]
fn gradcheck_all_passes() {
    let out = stenosis(&["gradcheck", "--all", "--instances", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_then_eval_reports_mean_and_std() {
    let data = tempfile::tempdir().unwrap();
    assert!(gen(data.path(), "20", "1").status.success());
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("config.json");
    fs::write(&config, r#"{"classifier": {"max_epochs": 1}}"#).unwrap();
    let ckpt = work.path().join("cls");
    for seed in ["0", "1"] {
        let dir = ckpt.join(format!("seed{seed}"));
        let out = stenosis(&[
            "train", "--task", "cls", "--config", config.to_str().unwrap(), "--data", data.path().to_str().unwrap(),
            "--out", dir.to_str().unwrap(), "--seed", seed,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.join("classifier.ckpt").exists());
        let log = fs::read_to_string(dir.join("cls.log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 1);
    }
    let report = work.path().join("report.json");
    let out = stenosis(&[
        "eval", "--task", "cls", "--ckpt", ckpt.to_str().unwrap(), "--data", data.path().to_str().unwrap(), "--seeds", "2",
        "--config", config.to_str().unwrap(), "--out", report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["per_seed"].as_array().unwrap().len(), 2);
    assert!(json["aggregate"]["fdr"]["mean"].is_number() && json["aggregate"]["fdr"]["std"].is_number());
    assert_eq!(json["physician_visual_assessment"]["source"], "reported by the paper");
    assert!(String::from_utf8_lossy(&out.stdout).contains(" ± "));
}

#[test]
fn bad_invocations_fail() {
    assert!(!stenosis(&["gen", "--n", "0", "--out", "/nonexistent/x"]).status.success());
    assert!(!stenosis(&["train", "--task", "nope", "--data", ".", "--out", "."]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = stenosis(&["eval", "--task", "e2e", "--ckpt", dir.path().to_str().unwrap(), "--data", dir.path().to_str().unwrap(), "--seeds", "1", "--out", dir.path().join("r.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
