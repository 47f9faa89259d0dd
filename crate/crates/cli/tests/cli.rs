use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cor_core::image::load_png;
use cor_core::metrics::psnr;

const BIN: &str = env!("CARGO_BIN_EXE_cor");

fn cor(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cor(dir, args);
    assert!(
        out.status.success(),
        "cor {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A small configuration: 64x64 sources, few images, short training.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.json");
    let text = format!(
        r#"{{
  "seed": 5,
  "dataset": {{"per_category": 2, "source": {{"kind": "procedural", "height": 64, "width": 64}}}},
  "discriminator": {{
    "training_set": {{"images_per_class": 6, "patches_per_image": 2, "image_size": 64, "patch_size": 64}},
    "training": {{"epochs": 40, "batch": 0}}
  }}{extra}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn subdirs(root: &Path) -> Vec<String> {
    let mut d: Vec<String> = fs::read_dir(root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    d.sort();
    d
}

#[test]
fn synth_default_layout_and_category_filter() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["--config", cfg, "--out", "all", "synth"]);
    assert_eq!(subdirs(&tmp.path().join("all")).len(), 13);
    assert!(tmp.path().join("all/manifest.json").is_file());
    assert!(tmp.path().join("all/config.json").is_file());

    ok(tmp.path(), &["--config", cfg, "--out", "two", "--categories", "h+n1,r", "synth"]);
    assert_eq!(subdirs(&tmp.path().join("two")), ["clean", "h+n1", "r"]);
}

#[test]
fn synth_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        ok(tmp.path(), &["--config", cfg, "--out", out, "--categories", "h+r+n5,n1", "synth"]);
    }
    for rel in ["manifest.json", "config.json", "clean/0001.png", "h+r+n5/0000.png", "n1/0001.png"] {
        let a = fs::read(tmp.path().join("a").join(rel)).unwrap();
        let b = fs::read(tmp.path().join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel}");
    }
}

#[test]
fn unknown_config_keys_fail_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#", "sede": 3"#);
    let out = cor(tmp.path(), &["--config", cfg.to_str().unwrap(), "complexity"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn train_dd_writes_model_and_monotone_full_batch_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let stdout = ok(tmp.path(), &["--config", cfg.to_str().unwrap(), "--out", "dd", "train-dd"]);
    assert!(stdout.contains("held-out accuracy"));
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("dd/model.json")).unwrap()).unwrap();
    let classes = model["class_labels"].as_array().unwrap();
    assert_eq!(classes.len(), 5 + 1);
    assert_eq!(classes.last().unwrap(), "clean");
    let (header, rows) = read_csv(&tmp.path().join("dd/train_log.csv"));
    assert_eq!(header, ["epoch", "loss", "accuracy"]);
    assert_eq!(rows.len(), 40);
    let losses: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn run_restores_with_oracle_components_and_dumps_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["--config", cfg, "--out", "ds", "--categories", "h+r+n1", "synth"]);

    let missing = cor(tmp.path(), &["--config", cfg, "--mode", "oracle", "--out", "r", "run", "ds/h+r+n1/0000.png"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("oracle mode requires --manifest"));

    let args = [
        "--config", cfg, "--mode", "oracle", "--dd", "oracle", "--manifest", "ds/manifest.json", "--out", "r", "run",
        "--dump-steps", "ds/h+r+n1/0000.png",
    ];
    let stdout = ok(tmp.path(), &args);
    assert!(stdout.contains("steps 3"), "{stdout}");
    let restored = load_png(tmp.path().join("r/0000.png")).unwrap();
    let clean = load_png(tmp.path().join("ds/clean/0000.png")).unwrap();
    let degraded = load_png(tmp.path().join("ds/h+r+n1/0000.png")).unwrap();
    assert!(psnr(&restored, &clean).unwrap() > psnr(&degraded, &clean).unwrap() + 10.0);
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("r/0000.trace.json")).unwrap()).unwrap();
    assert_eq!(trace["termination"], "clean_detected");
    assert_eq!(trace["steps"].as_array().unwrap().len(), 4);
    for i in 0..4 {
        assert!(tmp.path().join(format!("r/0000_steps/step_{i:02}.png")).is_file());
    }

    let dir_args = [
        "--config", cfg, "--mode", "oracle", "--dd", "oracle", "--manifest", "ds/manifest.json", "--out", "rd", "run",
        "ds/h+r+n1",
    ];
    ok(tmp.path(), &dir_args);
    assert!(tmp.path().join("rd/0000.png").is_file() && tmp.path().join("rd/0001.png").is_file());
}

#[test]
fn eval_csv_schema_and_oracle_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#", "registry": {"mode": "oracle", "bases": ["n1", "n2", "n5", "r", "h"]}"#);
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["--config", cfg, "--out", "ds", "--categories", "h+r+n1,r+n5", "synth"]);
    for out in ["ev", "ev2"] {
        ok(tmp.path(), &["--config", cfg, "--dd", "oracle", "--out", out, "eval", "ds"]);
    }
    let csv_path = tmp.path().join("ev/eval.csv");
    assert_eq!(fs::read(&csv_path).unwrap(), fs::read(tmp.path().join("ev2/eval.csv")).unwrap());
    let (header, rows) = read_csv(&csv_path);
    assert_eq!(
        header,
        ["category", "psnr_input", "ssim_input", "psnr_single_pass", "psnr_cor", "ssim_cor", "mean_steps"]
    );
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["h+r+n1", "r+n5", "mean"]);
    let hrn = &rows[0];
    assert_eq!(hrn[6].parse::<f64>().unwrap(), 3.0);
    for row in &rows[..2] {
        let (input, cor): (f64, f64) = (row[1].parse().unwrap(), row[4].parse().unwrap());
        assert!(input.is_finite() && input < cor, "{row:?}");
    }

    ok(tmp.path(), &["--config", cfg, "--dd", "oracle", "--categories", "clean", "--out", "evc", "eval", "ds"]);
    let (_, rows) = read_csv(&tmp.path().join("evc/eval.csv"));
    assert_eq!(rows[0][0], "clean");
    assert_eq!(rows[0][6].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn eval_with_trained_dd_needs_a_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["--config", cfg, "--out", "ds", "--categories", "n1", "synth"]);
    let out = cor(tmp.path(), &["--config", cfg, "--out", "ev", "eval", "ds"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
    ok(tmp.path(), &["--config", cfg, "--out", "dd", "train-dd"]);
    ok(tmp.path(), &["--config", cfg, "--model", "dd/model.json", "--out", "ev", "eval", "ds"]);
    let (_, rows) = read_csv(&tmp.path().join("ev/eval.csv"));
    assert_eq!(rows.len(), 2);
}

#[test]
fn complexity_curves() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--out", "c", "complexity", "--n", "20"]);
    let (header, rows) = read_csv(&tmp.path().join("c/curves.csv"));
    assert_eq!(
        header,
        ["k", "tr_exact_num", "tr_exact_den", "tr_float", "ir_exact_num", "ir_exact_den", "ir_float"]
    );
    assert_eq!(rows.len(), 20);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[19][3].parse::<f64>().unwrap(), 52428.75);
}

#[test]
fn ablate_writes_both_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#", "ablation": {"images": 2, "image_size": 64}"#);
    let stdout = ok(tmp.path(), &["--config", cfg.to_str().unwrap(), "--out", "ab", "ablate"]);
    assert!(stdout.contains("margins"));
    let (header, rows) = read_csv(&tmp.path().join("ab/ablation.csv"));
    assert_eq!(header[..3], ["table", "setting", "description"]);
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    let expect: Vec<(String, String)> = ["a", "b", "c", "d", "e"]
        .iter()
        .map(|s| ("margins".to_string(), s.to_string()))
        .chain(["a", "b", "c", "d"].iter().map(|s| ("bases".to_string(), s.to_string())))
        .collect();
    assert_eq!(keys, expect);
    assert!(tmp.path().join("ab/config.json").is_file());
}
