use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ux(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ux"))
        .args(args)
        .current_dir(dir)
        .env_remove("UX_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn small_spec(dir: &Path, amplitude: f64) {
    let spec = serde_json::json!({
        "height": 20, "width": 20, "timesteps": 10, "box_min": 4, "box_max": 7,
        "events_per_step": 1, "amplitude": amplitude
    });
    fs::write(dir.join("spec.json"), spec.to_string()).unwrap();
}

fn desk_config(dir: &Path, epochs: usize) {
    let cfg = serde_json::json!({
        "epochs": epochs, "filters": 3, "time_dim": 8, "units": 2, "embed_dim": 8, "depth": 1,
        "heads": 2, "window": 5, "patch_height": 2, "patch_width": 2
    });
    fs::write(dir.join("desk.json"), cfg.to_string()).unwrap();
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d, 0.6);
    ok(&ux(&["synth", "--config", "spec.json", "--out", "data"], d));
    let again = ux(&["synth", "--config", "spec.json", "--out", "data"], d);
    assert_eq!(again.status.code(), Some(2));
    ok(&ux(&["synth", "--config", "spec.json", "--out", "data", "--force"], d));
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d, 0.6);
    let env_seed = Command::new(env!("CARGO_BIN_EXE_ux"))
        .args(["synth", "--config", "spec.json", "--out", "a"])
        .current_dir(d)
        .env("UX_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(ok(&env_seed)["seed"], 5);
    let flag = Command::new(env!("CARGO_BIN_EXE_ux"))
        .args(["synth", "--config", "spec.json", "--out", "b", "--seed", "7"])
        .current_dir(d)
        .env("UX_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(ok(&flag)["seed"], 7);
    fs::write(d.join("seeded.json"), r#"{"height": 20, "width": 20, "timesteps": 3, "seed": 9}"#).unwrap();
    let cfg = Command::new(env!("CARGO_BIN_EXE_ux"))
        .args(["synth", "--config", "seeded.json", "--out", "c"])
        .current_dir(d)
        .env("UX_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(ok(&cfg)["seed"], 9);
}

#[test]
fn hfa_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d, 0.6);
    ok(&ux(&["synth", "--config", "spec.json", "--out", "data"], d));
    let summary = ok(&ux(&["analyze-hfa", "--data", "data", "--out", "hfa", "--region", "5"], d));
    assert!(summary["normal_count"].as_u64().unwrap() > 0);
    let csv = fs::read_to_string(d.join("hfa/hfa-report.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "timestamp,region_index,label,channel,s_high");
    // 10 grids x 16 regions x 2 channels, plus the random group
    let extreme = summary["extreme_count"].as_u64().unwrap() as usize;
    assert!(csv.lines().count() > 320 + extreme);
    let file: Value = serde_json::from_slice(&fs::read(d.join("hfa/hfa-summary.json")).unwrap()).unwrap();
    assert_eq!(file["normal_count"], summary["normal_count"]);
}

#[test]
fn train_evaluate_predict_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d, 0.6);
    desk_config(d, 2);
    ok(&ux(&["synth", "--config", "spec.json", "--out", "data"], d));
    let summary = ok(&ux(&["train", "--data", "data", "--config", "desk.json", "--out", "run"], d));
    assert_eq!(summary["epochs_run"], 2);
    for f in ["checkpoint.uxck", "last.uxck", "trace.jsonl", "pool.epamem", "stats.json"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let trace = fs::read_to_string(d.join("run/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);

    // reruns are byte-identical
    ok(&ux(&["train", "--data", "data", "--config", "desk.json", "--out", "run2"], d));
    for f in ["checkpoint.uxck", "last.uxck", "trace.jsonl", "pool.epamem"] {
        assert_eq!(fs::read(d.join("run").join(f)).unwrap(), fs::read(d.join("run2").join(f)).unwrap(), "{f}");
    }

    let report = ok(&ux(
        &["evaluate", "--checkpoint", "run/checkpoint.uxck", "--pool", "run/pool.epamem", "--data", "data", "--out", "ev"],
        d,
    ));
    assert_eq!(report["scale"], "raw");
    assert!(report["general"]["mae"]["mean"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(d.join("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let pred = ok(&ux(
        &[
            "predict", "--checkpoint", "run/checkpoint.uxck", "--pool", "run/pool.epamem",
            "--grid", "data/grids/00002.wgrid", "--out", "next.wgrid",
        ],
        d,
    ));
    assert_eq!(pred["timestamp"], "2022-01-01T03:00:00Z");

    let afm = ok(&ux(
        &["afm", "inspect", "--checkpoint", "run/checkpoint.uxck", "--grid", "data/grids/00002.wgrid", "--region", "3"],
        d,
    ));
    assert_eq!(afm["kappa"].as_array().unwrap().len(), 3);
    let curves = afm["curves"]["filters"].as_array().unwrap();
    assert_eq!(curves.len(), 3);
    assert!(curves.iter().all(|c| c.as_array().unwrap().len() == 256));
    assert_eq!(afm["weights"].as_array().unwrap().len(), 3);

    let pool = ok(&ux(&["epa", "inspect", "--pool", "run/pool.epamem", "--type", "normal"], d));
    assert_eq!(pool["slots"].as_array().unwrap().len(), 1);
    assert_eq!(pool["slots"][0]["type"], "normal");
}

#[test]
fn build_memory_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d, 0.6);
    ok(&ux(&["synth", "--config", "spec.json", "--out", "data"], d));
    let stats = ok(&ux(&["fit-stats", "--data", "data", "--out", "stats.json"], d));
    assert_eq!(stats["mean"].as_array().unwrap().len(), 2);
    let pool = ok(&ux(&["epa", "build-memory", "--data", "data", "--u", "3", "--stats", "stats.json", "--out", "p.epamem"], d));
    assert_eq!(pool["units"], 3);
    let glob_pool = ok(&ux(
        &["build-memory", "--train", "data/grids/*.wgrid", "--events", "data/*.jsonl", "--u", "3", "--stats", "stats.json", "--out", "q.epamem"],
        d,
    ));
    assert_eq!(pool, glob_pool);
    assert_eq!(fs::read(d.join("p.epamem")).unwrap(), fs::read(d.join("q.epamem")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(ux(&["analyze-hfa", "--data", "missing", "--out", "x"], d).status.code(), Some(3));
    assert_eq!(ux(&["train", "--data", "missing"], d).status.code(), Some(2));
    fs::write(d.join("bad.json"), r#"{"epochs": 0}"#).unwrap();
    small_spec(d, 0.6);
    ok(&ux(&["synth", "--config", "spec.json", "--out", "data"], d));
    let bad = ux(&["train", "--data", "data", "--config", "bad.json", "--out", "run"], d);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let report = ok(&ux(&["gradcheck", "--max-entries", "2"], tmp.path()));
    assert_eq!(report["passed"], true);
    assert_eq!(report["entries"].as_array().unwrap().len(), 4);
}
