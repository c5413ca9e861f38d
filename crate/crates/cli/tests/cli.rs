use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsule-detector"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single machine-readable error line on standard error.
fn error_line(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

const CONFIG: &str = r#"
[train]
epochs = 2
batch = 4
seed = 3
[data]
manifest = "data/manifest.jsonl"
"#;

fn dataset(dir: &Path) {
    let o = bin(
        &["synth", "--out", "data", "--size", "32", "--groups", "3", "--frames", "2", "--eval-groups", "2", "--seed", "2"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
}

#[test]
fn inspect_reports_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["inspect"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("2,325,568"), "{text}");
    let total: f64 = text
        .lines()
        .find(|l| l.trim_start().starts_with("total"))
        .and_then(|l| l.split_whitespace().last())
        .map(|n| n.replace(',', "").parse().unwrap())
        .unwrap();
    assert!(((total - 2_796_889.0) / 2_796_889.0).abs() < 0.002, "{total}");
    let ten = stdout(&bin(&["inspect", "--capsules", "10"], dir.path()));
    assert!(ten.contains("3,896,318"), "{ten}");
}

#[test]
fn train_eval_infer_saliency_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let o = bin(&["train", "--config", "run.toml", "--out", "runs"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "epochs.jsonl", "config.toml"] {
        assert!(d.join("runs").join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(d.join("runs/epochs.jsonl")).unwrap().lines().count(), 2);

    let o = bin(&["eval", "--config", "run.toml", "--checkpoint", "runs/best.ckpt", "--out", "rep"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("rep/report.json")).unwrap()).unwrap();
    assert!(report["groups"]["accuracy"].is_number());
    assert_eq!(fs::read_to_string(d.join("rep/scores.jsonl")).unwrap().lines().count(), 8);

    let o = bin(&["infer", "--checkpoint", "runs/best.ckpt", "data/test/c0g5f0.png"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let sum: f64 = line["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-6);

    let o = bin(&["infer", "--checkpoint", "runs/best.ckpt", "data/test"], d);
    assert_eq!(stdout(&o).lines().count(), 8);

    let o = bin(
        &["saliency", "--checkpoint", "runs/best.ckpt", "--image", "data/test/c1g5f1.png", "--class", "fake", "--out", "sal.png"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::metadata(d.join("sal.png")).unwrap().len() > 0);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    for out in ["a", "b"] {
        let o = bin(&["train", "--config", "run.toml", "--epochs", "1", "--out", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = bin(&["eval", "--config", "run.toml", "--checkpoint", &format!("{out}/best.ckpt"), "--out", &format!("{out}/rep")], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["best.ckpt", "epochs.jsonl", "rep/report.json", "rep/scores.jsonl"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resumed_training_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    assert!(bin(&["train", "--config", "run.toml", "--out", "straight"], d).status.success());
    assert!(bin(&["train", "--config", "run.toml", "--epochs", "1", "--out", "split"], d).status.success());
    let o = bin(&["train", "--config", "run.toml", "--checkpoint", "split/last.ckpt", "--out", "split"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("straight/last.ckpt")).unwrap(), fs::read(d.join("split/last.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(d.join("straight/epochs.jsonl")).unwrap(),
        fs::read_to_string(d.join("split/epochs.jsonl")).unwrap()
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = bin(&["train", "--epochs", "0", "--manifest", "m.jsonl"], d);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "config");

    fs::write(d.join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let o = bin(&["train", "--config", "bad.toml"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("epoch"));

    let o = bin(&["train"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = bin(&["infer", "--checkpoint", "missing.ckpt", "x.png"], d);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["code"], 3);

    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = bin(&["inspect", "--checkpoint", "junk.ckpt"], d);
    assert_eq!(o.status.code(), Some(3));

    dataset(d);
    assert!(bin(&["train", "--config", "run.toml", "--epochs", "1", "--out", "r"], d).status.success());
    let o = bin(&["eval", "--config", "run.toml", "--checkpoint", "r/best.ckpt", "--capsules", "10"], d);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("capsules"));
}
