//! Drives the `mmt` binary end to end on a shortened schedule.

use std::path::Path;
use std::process::{Command, Output};

const QUICK: [&str; 6] = [
    "--set",
    "pretrain.epochs=3",
    "--set",
    "adapt.epochs=2",
    "--set",
    "adapt.iters_per_epoch=5",
];

fn mmt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmt"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(QUICK)
        .env("MMT_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = mmt(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    for cmd in ["gen-data", "pretrain", "adapt"] {
        ok(&[cmd], out);
    }
    let o = ok(&["evaluate"], out);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP"));
    for f in [
        "resolved_config.json",
        "data/source_train.jsonl",
        "data/target_test.jsonl",
        "pretrained.json",
        "adapted.json",
        "adapt_steps.csv",
        "adapt_epochs.csv",
        "pseudo_labels.csv",
        "metrics.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let map = metrics["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    // 2 epochs of 5 iterations plus a header
    assert_eq!(csv_rows(&out.join("adapt_steps.csv")).len(), 11);
    assert_eq!(csv_rows(&out.join("adapt_epochs.csv")).len(), 3);

    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["adapt.epochs"], 2);

    // scoring the pretrained checkpoint explicitly
    let pre = out.join("pretrained.json");
    ok(&["evaluate", "--checkpoint", pre.to_str().unwrap()], out);
}

#[test]
fn missing_inputs_are_user_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mmt(&["pretrain"], tmp.path()).status.code(), Some(1));
    ok(&["gen-data"], tmp.path());
    let o = mmt(&["adapt"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrained.json"));
    assert_eq!(mmt(&["evaluate"], tmp.path()).status.code(), Some(1));
}

#[test]
fn bad_invocations_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mmt(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(mmt(&["gen-data", "--set", "no.such.key=3"], tmp.path()).status.code(), Some(1));
    assert_eq!(mmt(&["gen-data", "--set", "alpha=1.5"], tmp.path()).status.code(), Some(1));
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(mmt(&["gen-data", "--config", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(1));
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"data": {"samples_per_identity": 6}, "alpha": 0.99}"#).unwrap();
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--set", "alpha=0.9"], tmp.path());
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["data.samples_per_identity"], 6);
    assert_eq!(resolved["alpha"], 0.9);
    let lines = std::fs::read_to_string(tmp.path().join("data/target_train.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 25 * 6);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["sweep-lambda"], tmp.path());
    let rows = csv_rows(&tmp.path().join("sweep.csv"));
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][0], "weights.lambda_tri");
    let values: Vec<f64> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(values, vec![0.0, 0.3, 0.5, 0.8, 1.0]);
    assert!(rows[1..].iter().all(|r| r.last().unwrap() == "ok"));

    let o = mmt(&["sweep-lambda", "--param", "weights.nope"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_reports_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["ablate"], tmp.path());
    let rows = csv_rows(&tmp.path().join("ablation.csv"));
    assert_eq!(rows.len(), 1 + mmt::trainer::AblationRow::ALL.len());
    assert!(rows[1..].iter().all(|r| r.last().unwrap() == "ok"));
}
