//! End-to-end tests of the `deen` binary: artifact layout, determinism,
//! and exit-code mapping.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn deen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deen"))
        .args(args)
        .output()
        .expect("spawn deen")
}

fn ok(args: &[&str]) -> Output {
    let out = deen(args);
    assert!(
        out.status.success(),
        "deen {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small fast dataset: 6 identities, 4 samples per id per modality, 16x8.
fn generate_small(dir: &Path, seed: u64) {
    let seed_arg = format!("data.seed={seed}");
    ok(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--set",
        "data.identities=6",
        "--set",
        "data.samples_per_id=4",
        "--set",
        "data.height=16",
        "--set",
        "data.width=8",
        "--set",
        &seed_arg,
    ]);
}

const SMALL_MODEL: &[&str] = &[
    "--set",
    "model.channels=4,4,8,8,8",
    "--set",
    "model.reduction=2",
    "--set",
    "train.ids_per_batch=2",
    "--set",
    "train.vis_per_id=2",
    "--set",
    "train.ir_per_id=2",
];

fn train_small(data: &Path, run: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--set",
        "train.epochs=1",
    ];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn generate_layout_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    generate_small(&a, 7);
    generate_small(&b, 7);

    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    // 6 ids x 4 samples x 2 modalities
    assert_eq!(manifest.lines().count(), 48);
    for line in manifest.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 5);
        assert!(cols[0] == "train" || cols[0] == "test");
        assert!(cols[2] == "VIS" || cols[2] == "IR");
    }
    assert!(a.join("config.resolved").is_file());
    assert!(a.join("stats.json").is_file());

    assert_eq!(
        fs::read(a.join("manifest.tsv")).unwrap(),
        fs::read(b.join("manifest.tsv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("images/000000.dtsn")).unwrap(),
        fs::read(b.join("images/000000.dtsn")).unwrap()
    );
}

#[test]
fn bad_config_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = deen(&[
        "generate",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--set",
        "data.height=0",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = deen(&[
        "generate",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--set",
        "data.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let tmp = TempDir::new().unwrap();
    let out = deen(&[
        "train",
        "--data",
        tmp.path().join("nowhere").to_str().unwrap(),
        "--run-dir",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_eval_analyze_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, 3);

    let run = tmp.path().join("run");
    train_small(&data, &run, &[]);
    for f in ["config.resolved", "inputs.sha256", "loss.csv", "checkpoint.dckp"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,step,lr,ce,triplet,cpm,orthogonal,total"));
    assert!(loss.lines().count() > 1);

    let eval_run = tmp.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.dckp").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--run-dir",
        eval_run.to_str().unwrap(),
        "--set",
        "eval.trials=3",
    ]);
    for f in ["metrics.json", "metrics.csv", "features.dtsn", "labels.tsv"] {
        assert!(eval_run.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(eval_run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("direction,trial,rank1,rank10,rank20,map"));
    // both directions, 3 trials + mean each, plus header
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_run.join("metrics.json")).unwrap()).unwrap();
    for dir in ["vis-to-ir", "ir-to-vis"] {
        let map = metrics[dir]["mean"]["map"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&map));
    }

    let an_run = tmp.path().join("analyze");
    ok(&[
        "analyze",
        "--checkpoint",
        run.join("checkpoint.dckp").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--run-dir",
        an_run.to_str().unwrap(),
    ]);
    let distances = fs::read_to_string(an_run.join("distances.csv")).unwrap();
    assert!(distances.starts_with("kind,distance"));
    assert!(distances.lines().any(|l| l.starts_with("intra,")));
    assert!(distances.lines().any(|l| l.starts_with("inter,")));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(an_run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["gap"].is_number());
}

#[test]
fn zero_epochs_checkpoint_is_deterministic_init() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, 1);

    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    for r in [&r1, &r2] {
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--run-dir",
            r.to_str().unwrap(),
            "--set",
            "train.epochs=0",
        ];
        args.extend_from_slice(SMALL_MODEL);
        ok(&args);
    }
    let c1 = fs::read(r1.join("checkpoint.dckp")).unwrap();
    let c2 = fs::read(r2.join("checkpoint.dckp")).unwrap();
    assert_eq!(c1, c2);
    // no optimizer steps: loss log is just the header
    let loss = fs::read_to_string(r1.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1);
}

#[test]
fn ablation_presets_shrink_the_model() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, 2);

    let full = tmp.path().join("full");
    let base = tmp.path().join("base");
    train_small(&data, &full, &["--ablate", "full"]);
    train_small(&data, &base, &["--ablate", "baseline"]);
    let cfg = fs::read_to_string(base.join("config.resolved")).unwrap();
    assert!(cfg.contains("model.dee_stage = none"));
    assert!(cfg.contains("model.mfa_stages = none"));
    assert!(cfg.contains("train.lambda1 = 0"));
    // fewer parameters -> strictly smaller checkpoint
    let full_len = fs::metadata(full.join("checkpoint.dckp")).unwrap().len();
    let base_len = fs::metadata(base.join("checkpoint.dckp")).unwrap().len();
    assert!(base_len < full_len);

    let out = deen(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--run-dir",
        tmp.path().join("x").to_str().unwrap(),
        "--ablate",
        "no-such-preset",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_rejects_single_modality_pool() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, 4);
    let run = tmp.path().join("run");
    train_small(&data, &run, &[]);

    // strip every IR row from the test split only; train rows stay intact
    let manifest = fs::read_to_string(data.join("manifest.tsv")).unwrap();
    let filtered: String = manifest
        .lines()
        .filter(|l| !(l.starts_with("test\t") && l.split('\t').nth(2) == Some("IR")))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(data.join("manifest.tsv"), filtered).unwrap();

    let out = deen(&[
        "analyze",
        "--checkpoint",
        run.join("checkpoint.dckp").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--run-dir",
        tmp.path().join("an").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
