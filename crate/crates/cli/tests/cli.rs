use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
epochs = 2
batch_size = 8
learning_rate = 0.01
seed = 5

[model]
d = 8
feature_dim = 4
polarity_dim = 4
init_std = 0.1

[model.sse]
layers = 1
max_positions = 16

[loss]
num_negatives = 8
"#;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nextsession"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = bin(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A synthetic log prepared into `data/` plus the tiny config.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(
        &["synth", "--users", "24", "--sessions", "5", "--catalog", "50", "--output", "log.csv"],
        dir.path(),
    );
    ok(&["prepare-data", "--input", "log.csv", "--output", "data"], dir.path());
    dir
}

fn manifest_status(path: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["status"].as_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--bogus"][..], &["frobnicate"], &[], &["bench", "--n", "many"]] {
        assert_eq!(bin(args, dir.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["evaluate", "--checkpoint", "missing.ckpt", "--data", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("missing.ckpt"));
}

#[test]
fn pipeline_trains_and_evaluates() {
    let dir = prepared();
    let p = dir.path();
    assert_eq!(manifest_status(&p.join("data/manifest.json")), "ok");
    assert_eq!(manifest_status(&p.join("log.csv.manifest.json")), "ok");
    ok(&["--threads", "1", "train", "--data", "data", "--config", "tiny.toml", "--out", "run"], p);
    for f in ["best.ckpt", "last.ckpt", "metrics.jsonl", "report.json", "report.txt", "config.toml"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config"]["model"]["d"], 8);
    assert!(manifest["wall_clock_secs"].as_f64().unwrap() >= 0.0);

    let json = ok(&["evaluate", "--checkpoint", "run/best.ckpt", "--data", "data", "--protocol", "session"], p);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["protocol"], "leave_one_session_out");
    assert_eq!(report["metrics"].as_array().unwrap().len(), 3);
    let item = ok(&["evaluate", "--checkpoint", "run/best.ckpt", "--data", "data", "--protocol", "item"], p);
    assert!(item.contains("leave_one_item_out"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = prepared();
    let p = dir.path();
    ok(&["train", "--data", "data", "--config", "tiny.toml", "--epochs", "1", "--alpha", "0.7", "--out", "run"], p);
    let resolved = std::fs::read_to_string(p.join("run/config.toml")).unwrap();
    assert!(resolved.contains("epochs = 1"));
    assert!(resolved.contains("alpha = 0.7"));
    assert!(resolved.contains("d = 8"));
    assert_eq!(std::fs::read_to_string(p.join("run/metrics.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn mismatched_config_names_the_field() {
    let dir = prepared();
    let p = dir.path();
    ok(&["train", "--data", "data", "--config", "tiny.toml", "--out", "run"], p);
    std::fs::write(p.join("wide.toml"), TINY.replace("d = 8", "d = 16")).unwrap();
    let args = ["evaluate", "--checkpoint", "run/best.ckpt", "--data", "data", "--config", "wide.toml"];
    let out = bin(&args, p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d"));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced, p);
}

#[test]
fn single_threaded_reruns_are_bitwise_identical() {
    let dir = prepared();
    let p = dir.path();
    for run in ["a", "b"] {
        ok(&["--threads", "1", "train", "--data", "data", "--config", "tiny.toml", "--out", run], p);
    }
    for f in ["best.ckpt", "report.json"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_and_scaling_write_tables() {
    let dir = prepared();
    let p = dir.path();
    ok(&["sweep-alpha", "--data", "data", "--config", "tiny.toml", "--alphas", "0,2", "--epochs", "1", "--out", "sweep"], p);
    let csv = std::fs::read_to_string(p.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("alpha,recall@10"));
    ok(&["scaling", "--data", "data", "--config", "tiny.toml", "--fractions", "0.5,1", "--epochs", "1", "--out", "scale"], p);
    let csv = std::fs::read_to_string(p.join("scale/scaling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bench_reports_the_pair_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let json = ok(&["bench", "--n", "1024", "--m", "16", "--repeats", "1"], dir.path());
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["pair_ratio"], 256.0);
}
