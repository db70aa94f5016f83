use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn stgnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgnf"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = stgnf(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small dataset plus a briefly trained model.
struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    ok(&[
        "gen",
        "--seed",
        "3",
        "--videos",
        "4",
        "--frames",
        "120",
        "--out",
        s(&data),
    ]);
    let ckpt = root.join("model.json");
    ok(&[
        "train",
        "--tracks",
        s(&data.join("tracks.jsonl")),
        "--labels",
        s(&data.join("labels.csv")),
        "--split",
        "normal",
        "--epochs",
        "1",
        "--batch-size",
        "64",
        "--flow-steps",
        "2",
        "--out",
        s(&ckpt),
    ]);
    Fixture {
        _tmp: tmp,
        root,
        data,
        ckpt,
    }
}

fn score(f: &Fixture, out: &Path, extra: &[&str]) {
    let (tracks, labels) = (f.data.join("tracks.jsonl"), f.data.join("labels.csv"));
    let mut args = vec![
        "score",
        "--checkpoint",
        s(&f.ckpt),
        "--tracks",
        s(&tracks),
        "--labels",
        s(&labels),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&[
            "gen",
            "--seed",
            "9",
            "--videos",
            "3",
            "--frames",
            "50",
            "--out",
            s(dir),
        ]);
    }
    let (ma, mb) = (
        manifest(&a.join("manifest.json")),
        manifest(&b.join("manifest.json")),
    );
    let hashes = |m: &Value| -> Vec<String> {
        m["outputs"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_str().unwrap().to_string())
            .collect()
    };
    assert_eq!(hashes(&ma).len(), 4);
    assert_eq!(hashes(&ma), hashes(&mb));
    for name in ["tracks.jsonl", "labels.csv", "regions.csv", "gt_tracks.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap()
        );
    }
}

#[test]
fn missing_parent_is_usage_error_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("no").join("such").join("dir");
    let res = stgnf(&["gen", "--videos", "2", "--frames", "30", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!tmp.path().join("no").exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn supervised_without_labels_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["gen", "--videos", "2", "--frames", "40", "--out", s(&data)]);
    let out = tmp.path().join("m.json");
    let res = stgnf(&[
        "train",
        "--tracks",
        s(&data.join("tracks.jsonl")),
        "--setting",
        "supervised",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        res.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(!out.exists());
}

#[test]
fn pipeline_outputs_and_metrics() {
    let f = fixture();
    assert!(f.root.join("model.loss.csv").exists());
    assert!(f.root.join("model.manifest.json").exists());

    let scores = f.root.join("scores.csv");
    score(&f, &scores, &[]);
    for sib in ["detections.csv", "diagnostics.json", "manifest.json"] {
        assert!(f.root.join(format!("scores.{sib}")).exists(), "{sib}");
    }
    let report = ok(&[
        "eval",
        "--scores",
        s(&scores),
        "--labels",
        s(&f.data.join("labels.csv")),
        "--regions",
        s(&f.data.join("regions.csv")),
        "--detections",
        s(&f.root.join("scores.detections.csv")),
    ]);
    let v: Value = serde_json::from_str(&report).unwrap();
    for key in ["auc", "rbdc", "tbdc"] {
        let x = v[key]
            .as_f64()
            .unwrap_or_else(|| panic!("{key} missing: {v}"));
        assert!((0.0..=1.0).contains(&x));
    }

    let inspect: Value =
        serde_json::from_str(&ok(&["inspect", "--checkpoint", s(&f.ckpt)])).unwrap();
    assert!(inspect["optimizer_steps"].as_u64().unwrap() > 0);
}

#[test]
fn scoring_is_deterministic_and_records_smoothing() {
    let f = fixture();
    let a = f.root.join("a.csv");
    let b = f.root.join("b.csv");
    score(&f, &a, &["--smooth-sigma", "2.5"]);
    score(&f, &b, &["--smooth-sigma", "2.5"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = manifest(&f.root.join("a.manifest.json"));
    assert_eq!(m["config"]["smooth_sigma"].as_f64(), Some(2.5));
    assert_eq!(m["command"], "score");
}

#[test]
fn single_class_labels_are_undefined_metric() {
    let f = fixture();
    let scores = f.root.join("s.csv");
    score(&f, &scores, &[]);
    // Normal videos only: every frame label is 0.
    let res = stgnf(&[
        "eval",
        "--scores",
        s(&scores),
        "--labels",
        s(&f.data.join("labels.csv")),
        "--split",
        "normal",
    ]);
    assert_eq!(
        res.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn unknown_config_key_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"n_videos": 2, "bogus": 1}"#).unwrap();
    let res = stgnf(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(2));
}
