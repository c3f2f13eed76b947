use std::path::Path;
use std::process::{Command, Output};

fn moon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "synth.dims={\"esophagus\":[8,8,12],\"liver\":[16,16,6],\"spleen\":[16,16,4]}",
    "--set",
    "model.input_dims={\"esophagus\":[8,8,12],\"liver\":[16,16,6],\"spleen\":[16,16,4]}",
    "--set",
    "model.encoder.channels=[4,8,8,8]",
    "--set",
    "model.encoder.heads=2",
    "--set",
    "model.ori_grid=[2,2,2]",
    "--set",
    "train.epochs=1",
    "--set",
    "train.lr=0.001",
];

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    args.extend_from_slice(TINY);
    args
}

#[test]
fn synthesize_default_writes_24_cases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = moon(&["synthesize", "--config", "default", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["cases"].as_array().unwrap().len(), 24);
    let resolved = read_json(&dir.path().join("resolved_config.json"));
    assert_eq!(resolved["train"]["lr"], 1e-5);
    assert_eq!(resolved["synth"]["counts"], serde_json::json!([8, 8, 8]));
}

#[test]
fn unknown_key_exits_2_with_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = moon(&["synthesize", "--out", dir.path().to_str().unwrap(), "--set", "synth.colour=3"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.split(|&b| b == b'\n').rev().find(|l| !l.is_empty()).unwrap()).unwrap();
    assert_eq!(err["error"], "unknown_key");
    assert_eq!(err["detail"], "synth.colour");

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"fuson": "Concat"}}"#).unwrap();
    let o = moon(&["synthesize", "--out", dir.path().to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = moon(&["crossval", "--out", out, "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(o.status.code(), Some(3));
    let o = moon(&["synthesize", "--out", out, "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn pipeline_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let test = root.join("test");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data_s, test_s) = (s(&data), s(&test));
    let o = moon(&with_tiny(vec!["synthesize", "--out", &data_s, "--set", "synth.counts=[3,3,3]"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = moon(&with_tiny(vec!["synthesize", "--out", &test_s, "--seed", "5", "--set", "synth.counts=[2,2,2]"]));
    assert!(o.status.success());
    let manifest = s(&data.join("manifest.json"));
    let test_manifest = s(&test.join("manifest.json"));

    // Fusion grid on the held-out set.
    let fusion = s(&root.join("fusion"));
    let o = moon(&with_tiny(vec![
        "compare-fusion", "--out", &fusion, "--manifest", &manifest, "--test-manifest", &test_manifest,
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&root.join("fusion/metrics.json"));
    let labels: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels.len(), 8);
    for strategy in ["Concat", "PredSum", "LowRank", "FiLM"] {
        assert!(labels.contains(&format!("MOON ({strategy})").as_str()));
        assert!(labels.contains(&format!("MOON‡ ({strategy})").as_str()));
    }
    assert!(root.join("fusion/metrics.txt").is_file());
    assert!(root.join("fusion/resolved_config.json").is_file());

    // Single-organ baseline row.
    let eval = s(&root.join("eval"));
    let o = moon(&with_tiny(vec![
        "evaluate", "--out", &eval, "--manifest", &manifest, "--test-manifest", &test_manifest,
        "--set", "model.single_organ=esophagus",
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&root.join("eval/metrics.json"));
    assert_eq!(report["rows"][0]["label"], "Single-organ (esophagus)");

    // Train, then evaluate and explain the checkpoint.
    let run = s(&root.join("run"));
    let o = moon(&with_tiny(vec!["train", "--out", &run, "--manifest", &manifest, "--test-manifest", &test_manifest]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train_log.jsonl", "final.ckpt", "best.ckpt", "metrics.json", "resolved_config.json"] {
        assert!(root.join("run").join(f).is_file(), "{f}");
    }
    let ckpt = s(&root.join("run/final.ckpt"));
    let o = moon(&["evaluate", "--out", &s(&root.join("ev2")), "--checkpoint", &ckpt, "--test-manifest", &test_manifest]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cam = s(&root.join("cam"));
    let o = moon(&[
        "gradcam", "--out", &cam, "--checkpoint", &ckpt, "--manifest", &test_manifest, "--set",
        "eval.gradcam.write_pgm=true",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&root.join("cam/metrics.json"));
    assert_eq!(report["cases"].as_array().unwrap().len(), 2);
    assert!(report["mean_localization"].is_number());
    assert!(root.join("cam/case-0004_esophagus_heat.vol").is_file());
    assert!(root.join("cam/pgm").is_dir());

    // Re-running from the resolved dump reproduces the report.
    let dump = s(&root.join("eval/resolved_config.json"));
    let again = s(&root.join("eval2"));
    let o = moon(&["evaluate", "--out", &again, "--config", &dump]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(root.join("eval/metrics.json")).unwrap(),
        std::fs::read(root.join("eval2/metrics.json")).unwrap()
    );
}

#[test]
fn crossval_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = s(&root.join("data"));
    let o = moon(&with_tiny(vec!["synthesize", "--out", &data, "--set", "synth.counts=[2,2,2]"]));
    assert!(o.status.success());
    let manifest = s(&root.join("data/manifest.json"));
    for run in ["a", "b"] {
        let out = s(&root.join(run));
        let o = moon(&with_tiny(vec!["crossval", "--out", &out, "--manifest", &manifest, "--set", "eval.k_folds=2"]));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(root.join("a/metrics.json")).unwrap();
    assert_eq!(a, std::fs::read(root.join("b/metrics.json")).unwrap());
    assert_eq!(read_json(&root.join("a/metrics.json"))["rows"][0]["runs"].as_array().unwrap().len(), 2);
}
