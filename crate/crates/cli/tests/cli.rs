use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn relight(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relight"))
        .args(args)
        .current_dir(cwd)
        .env("RELIGHT_NUM_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = relight(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SPEC: &str = r#"{"count": 12, "resolution": 16, "head_model_level": 2, "split": [0.5, 0.25, 0.25]}"#;
const CONFIG: &str = r#"{
  "unet": {"image_size": 16, "base_channels": 8, "channel_multipliers": [1, 2], "attention_resolutions": [8],
           "head_channels": 8, "groups": 4, "time_embed_dim": 8, "cond_hidden": 16},
  "batch_size": 2, "steps": 2, "log_every": 1, "checkpoint_every": 2
}"#;

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    fs::write(d.join("cfg.json"), CONFIG).unwrap();
    ok(&["gen-data", "--spec", "spec.json", "--out", "data"], d);
    ok(&["gen-pairs", "--data", "data", "--n", "2", "--seed", "1"], d);
    assert!(d.join("data/pairs/pairs.json").exists());
    ok(&["train", "--config", "cfg.json", "--data", "data", "--out", "run", "--mode", "no-modulator"], d);
    ok(&["train", "--resume", "run/latest.ckpt", "--data", "data", "--out", "run", "--steps", "3"], d);
    assert!(d.join("run/step_00000003.ckpt").exists());

    let input = ["--ckpt", "run/latest.ckpt", "--image", "data/test/000009.png", "--sidecar", "data/test/000009.json", "--steps", "5"];
    let relit = |out: &str| {
        let mut a = vec!["relight"];
        a.extend(input);
        a.extend(["--target-from-sidecar", "data/test/000010.json", "--target-c", "-4", "--out", out]);
        ok(&a, d);
        fs::read(d.join(out)).unwrap()
    };
    assert_eq!(relit("a.png"), relit("b.png"));

    let mut sweep = vec!["sweep-shadow"];
    sweep.extend(input);
    sweep.extend(["--c-list", "-4,0,4", "--out", "sweep.png"]);
    ok(&sweep, d);
    let grid = relight_core::RgbImage::load_png(&d.join("sweep.png")).unwrap();
    assert_eq!((grid.width, grid.height), (48, 16));

    let mut inv = vec!["invert"];
    inv.extend(input);
    inv.extend(["--out", "inv.json"]);
    let printed = ok(&inv, d);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(d.join("inv.json")).unwrap()).unwrap();
    assert!(printed.starts_with(doc["x_t_sha256"].as_str().unwrap()));
    assert_eq!(doc["corrections"]["mus"].as_array().unwrap().len(), 5);

    ok(&["eval", "--ckpt", "run/latest.ckpt", "--pairs", "data/pairs/pairs.json", "--out", "eval", "--steps", "3"], d);
    let csv = fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Missing input file: I/O error.
    assert_eq!(relight(&["gen-pairs", "--data", "missing"], d).status.code(), Some(3));
    // Invalid spec: validation error.
    fs::write(d.join("bad.json"), r#"{"count": 0}"#).unwrap();
    assert_eq!(relight(&["gen-data", "--spec", "bad.json", "--out", "x"], d).status.code(), Some(2));
    fs::write(d.join("typo.json"), r#"{"cont": 5}"#).unwrap();
    assert_eq!(relight(&["gen-data", "--spec", "typo.json", "--out", "x"], d).status.code(), Some(2));
    // Unknown mode is rejected by the argument parser.
    assert_eq!(relight(&["train", "--data", "x", "--out", "y", "--mode", "bogus"], d).status.code(), Some(2));
}
