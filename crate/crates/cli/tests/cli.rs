//! End-to-end tests of the `mnvton` binary: each test drives the real
//! executable against a micro configuration in a temp directory.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mnvton"))
}

/// Tiny but complete run config: 12x12 is the smallest frame the image
/// metrics accept (11x11 windows), and three training steps keep tests fast.
fn micro_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "variant": "mn_v3",
  "model": { "d": 12, "heads": 2, "layers": 2, "patch": 2 },
  "schedule": { "steps": 50, "beta_start": 0.0001, "beta_end": 0.02 },
  "train": { "steps": 3, "batch": 2, "lr": 0.003, "beta1": 0.9, "beta2": 0.999, "log_every": 1 },
  "task": {
    "frames": 1,
    "height": 12,
    "width": 12,
    "channels": 3,
    "garment_height": 4,
    "garment_width": 4,
    "text_tokens": 2
  },
  "sample": { "steps": 3 },
  "seed": 0
}
"#,
    )
    .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_into(config: &Path, out_dir: &Path) {
    run_ok(bin().args(["train", "--config"]).arg(config).arg("--out").arg(out_dir));
}

// ---------------------------------------------------------------------------

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    train_into(&config, &run_a);
    train_into(&config, &run_b);

    for run in [&run_a, &run_b] {
        assert!(run.join("config.json").is_file());
        assert!(run.join("model.ckpt").is_file());
        let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
        let rows: Vec<serde_json::Value> =
            metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 3, "one row per step at log_every 1");
        assert!(rows.iter().all(|r| r["loss"].as_f64().unwrap().is_finite()));
    }
    // Same config, same seed: identical checkpoints byte for byte.
    let a = std::fs::read(run_a.join("model.ckpt")).unwrap();
    let b = std::fs::read(run_b.join("model.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_scores_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let run = dir.path().join("run");
    train_into(&config, &run);

    let out = run_ok(
        bin()
            .args(["eval", "--config"])
            .arg(&config)
            .arg("--ckpt")
            .arg(run.join("model.ckpt"))
            .arg("--out")
            .arg(dir.path().join("eval"))
            .args(["--samples", "2", "--threads", "2"]),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("ssim"));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("eval/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["samples"], 2);
    assert_eq!(report["per_sample"].as_array().unwrap().len(), 2);
    assert!(report["mean_ssim"].as_f64().unwrap().is_finite());
}

#[test]
fn sample_and_gen_data_write_readable_images() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let run = dir.path().join("run");
    train_into(&config, &run);

    let images = dir.path().join("images");
    run_ok(
        bin()
            .args(["sample", "--config"])
            .arg(&config)
            .arg("--ckpt")
            .arg(run.join("model.ckpt"))
            .arg("--out")
            .arg(&images)
            .args(["--samples", "2"]),
    );
    for i in 0..2 {
        for kind in ["generated", "target", "agnostic", "garment"] {
            let path = images.join(format!("s{i:03}_{kind}.ppm"));
            let img = mnvton_core::io::read_ppm(&path).unwrap();
            assert_eq!(img.shape()[3], 3);
        }
    }

    let data = dir.path().join("data");
    run_ok(
        bin()
            .args(["gen-data", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&data)
            .args(["--samples", "3"]),
    );
    let index: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(data.join("index.json")).unwrap()).unwrap();
    assert_eq!(index.len(), 3);
    assert!(data.join("s000_mask.ppm").is_file());
}

#[test]
fn checkpoint_config_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let run = dir.path().join("run");
    train_into(&config, &run);

    // Evaluating under a different seed changes the config hash.
    let other = dir.path().join("other.json");
    let text = std::fs::read_to_string(&config).unwrap().replace("\"seed\": 0", "\"seed\": 1");
    std::fs::write(&other, text).unwrap();
    let out = bin()
        .args(["eval", "--config"])
        .arg(&other)
        .arg("--ckpt")
        .arg(run.join("model.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_table_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let out_dir = dir.path().join("ablation");
    let out = run_ok(
        bin()
            .args(["ablate", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .args(["--seeds", "0", "--variants", "mn_v3,naive_split", "--eval-samples", "1"]),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("naive_split"));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("ablation.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["variants"].as_array().unwrap().len(), 2);
    assert!(out_dir.join("ablation.txt").is_file());
}

#[test]
fn cost_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let out = run_ok(
        bin()
            .args(["cost", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join("cost")),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["dual_net", "naive_split", "mn_v1", "mn_v2", "mn_v3"] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
    let reports: Vec<serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("cost/cost.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(reports.len(), 5);
}

#[test]
fn gradcheck_passes_on_the_builtin_config() {
    // The built-in micro configuration keeps the token stream short enough
    // for finite differences over every parameter of all five variants.
    let out = run_ok(bin().arg("gradcheck"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches(" ok").count(), 5, "stdout:\n{stdout}");
}

#[test]
fn pca_writes_heatmaps_for_each_block() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let run = dir.path().join("run");
    train_into(&config, &run);

    let out_dir = dir.path().join("pca");
    run_ok(
        bin()
            .args(["pca", "--config"])
            .arg(&config)
            .arg("--ckpt")
            .arg(run.join("model.ckpt"))
            .arg("--out")
            .arg(&out_dir),
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("pca.json")).unwrap()).unwrap();
    assert_eq!(report["blocks"].as_array().unwrap().len(), 2);
    assert!(out_dir.join("block0_scores.ppm").is_file());
    assert!(out_dir.join("block1_scores.ppm").is_file());
}

#[test]
fn invalid_config_fails_with_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"not_a_field": 1}"#).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(line["kind"], "json");
    assert!(line["error"].as_str().unwrap().contains("not_a_field"));
}
