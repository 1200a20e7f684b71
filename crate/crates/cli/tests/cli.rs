use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn surgline(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_surgline"));
    cmd.current_dir(dir).args(args);
    for k in ["SURGLINE_SEED", "SURGLINE_EPOCHS", "SURGLINE_LR", "SURGLINE_BATCH", "SURGLINE_CACHE"] {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str], env: &[(&str, &str)]) {
    let out = surgline(dir, args, env);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn tiny_dataset(dir: &Path) {
    ok(dir, &["synth", "--out", "syn", "--seed", "1", "--per-class", "4", "--videos", "4"], &[]);
    ok(dir, &["split", "--out", "sp", "--frames", "syn/frames.json", "--seed", "1"], &[]);
}

#[test]
fn config_file_then_env_then_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_dataset(dir);
    std::fs::write(dir.join("cfg.json"), r#"{"epochs": 3, "learning_rate": 0.002, "batch_size": 8, "seed": 5}"#)
        .unwrap();
    let base = ["train-control", "--frames", "syn/frames.json", "--split", "sp/split.json", "--config", "cfg.json"];
    let run = |out: &str, extra: &[&str], env: &[(&str, &str)]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(["--out", out]);
        args.extend(extra);
        ok(dir, &args, env);
        manifest(&dir.join(out).join("train-control.manifest.json"))
    };

    let m = run("file", &[], &[]);
    assert_eq!(m["config"]["stage"]["epochs"], 3);
    assert_eq!(m["config"]["stage"]["learning_rate"], 0.002);
    assert_eq!(m["config"]["stage"]["batch_size"], 8);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config_path"], "cfg.json");

    let env = [("SURGLINE_EPOCHS", "2"), ("SURGLINE_SEED", "6")];
    let m = run("env", &[], &env);
    assert_eq!(m["config"]["stage"]["epochs"], 2);
    assert_eq!(m["config"]["stage"]["batch_size"], 8);
    assert_eq!(m["seed"], 6);

    let m = run("flag", &["--epochs", "1", "--seed", "7"], &env);
    assert_eq!(m["config"]["stage"]["epochs"], 1);
    assert_eq!(m["config"]["stage"]["learning_rate"], 0.002);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["seed_generated"], false);
    let history = std::fs::read_to_string(dir.join("flag/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn missing_seed_is_generated_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "syn", "--per-class", "3", "--videos", "3"], &[]);
    let m = manifest(&dir.join("syn/synth.manifest.json"));
    assert_eq!(m["seed_generated"], true);
    assert!(m["seed"].is_u64());
    // The recorded seed reproduces the run.
    let seed = m["seed"].to_string();
    ok(dir, &["synth", "--out", "again", "--per-class", "3", "--videos", "3", "--seed", &seed], &[]);
    assert_eq!(
        std::fs::read(dir.join("syn/frames.json")).unwrap(),
        std::fs::read(dir.join("again/frames.json")).unwrap()
    );
}

#[test]
fn failures_exit_nonzero_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = surgline(dir, &["eval", "--out", "ev", "--preds", "missing.csv"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(dir.join("bad.json"), r#"{"epochs": 3, "unknown": 1}"#).unwrap();
    let out = surgline(dir, &["synth", "--out", "s", "--config", "bad.json"], &[]);
    assert!(!out.status.success());

    tiny_dataset(dir);
    let out = surgline(dir, &["timeline", "--out", "t", "--preds", "syn/frames.json", "--window", "4"], &[]);
    assert!(!out.status.success());
    let out = surgline(
        dir,
        &["train-phases", "--out", "p", "--init", "nope.safetensors", "--frames", "syn/frames.json", "--split", "sp/split.json"],
        &[],
    );
    assert!(!out.status.success());
    assert!(!dir.join("p/checkpoint.safetensors").exists());
}

#[test]
fn window_one_timeline_follows_raw_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_dataset(dir);
    ok(dir, &["predict", "--out", "pred", "--frames", "syn/frames.json", "--seed", "1"], &[]);
    ok(dir, &["timeline", "--out", "tl", "--preds", "pred/preds.csv", "--window", "1", "--seed", "1"], &[]);

    let mut rows = csv::Reader::from_path(dir.join("pred/preds.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let vid = headers.iter().position(|h| h == "video_id").unwrap();
    let top1 = headers.iter().position(|h| h == "top1").unwrap();
    let mut by_video: std::collections::BTreeMap<String, Vec<String>> = Default::default();
    for r in rows.records() {
        let r = r.unwrap();
        by_video.entry(r[vid].to_string()).or_default().push(r[top1].to_string());
    }
    for (video, labels) in by_video {
        let tl = manifest(&dir.join(format!("tl/timeline_{video}.json")));
        let mut expanded = Vec::new();
        for s in tl["segments"].as_array().unwrap() {
            let n = s["n_frames"].as_u64().unwrap() as usize;
            expanded.extend(std::iter::repeat_n(s["class"].as_str().unwrap().to_string(), n));
        }
        assert_eq!(expanded, labels, "video {video}");
    }
}
