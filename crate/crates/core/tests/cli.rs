//! End-to-end exercise of the command-line surface on a tiny synthetic
//! dataset: synth -> train -> eval -> infer -> gradcam, plus exit codes.

use std::path::Path;
use std::process::Command;

mod common;

fn vfgrade() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vfgrade"))
}

fn tiny_config(manifest: &Path) -> String {
    format!(
        r#"
[dataset]
manifest = "{}"
test_fraction = 0.25

[preprocess]
window_preset = "conventional"

[augment]
canonical_side = 16
shift_limit = 2
box_side_range = [1, 3]

[sampler]
n = 1

[network]
input_side = 16
width_scale = 0.0625
stage_blocks = [1, 1, 1, 1]
se_reduction = 4

[optimizer]
epochs = 2
decay_epochs = []

[training]
seed = 5
checkpoint_every = 1
"#,
        manifest.display()
    )
}

#[test]
fn cli_full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");

    // synth
    let out = vfgrade()
        .args(["synth", "--out"])
        .arg(&data_dir)
        .args([
            "--cases",
            "8",
            "--per-case",
            "4",
            "--side",
            "64",
            "--seed",
            "9",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "synth failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = data_dir.join("manifest.json");
    assert!(manifest.exists());
    common::presplit_manifest(&manifest, 0.25, 1);

    // train
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, tiny_config(&manifest)).unwrap();
    let run_dir = dir.path().join("run");
    let out = vfgrade()
        .args(["train", "--config"])
        .arg(&config_path)
        .args(["--out"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = run_dir.join("last.ckpt");
    assert!(ckpt.exists());
    assert!(
        run_dir.join("resolved_config.toml").exists(),
        "resolved config provenance"
    );
    assert!(
        run_dir.join("metrics.jsonl").exists(),
        "line-delimited metrics log"
    );
    let split_manifest = run_dir.join("manifest_with_split.json");
    assert!(split_manifest.exists());

    // the metrics log has one JSON record per step with the scheduled lr
    let log = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let mut step_lines = 0;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v.get("step").is_some() {
            assert_eq!(v["lr"].as_f64().unwrap(), 1e-3);
            step_lines += 1;
        }
    }
    assert!(step_lines > 0);

    // eval on the test split (byte-stable report)
    let eval_dir = dir.path().join("eval");
    let out = vfgrade()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--manifest"])
        .arg(&split_manifest)
        .args(["--out"])
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "AUCROC",
        "SPE",
        "SEN",
        "macro-F1",
        "macro-precision",
        "macro-recall",
    ] {
        assert!(
            stdout.contains(needle),
            "eval output lacks {needle}: {stdout}"
        );
    }
    let report1 = std::fs::read(eval_dir.join("eval_report.json")).unwrap();
    assert!(eval_dir.join("roc.png").exists());
    let out = vfgrade()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--manifest"])
        .arg(&split_manifest)
        .args(["--out"])
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report2 = std::fs::read(eval_dir.join("eval_report.json")).unwrap();
    assert_eq!(report1, report2, "evaluation report must be byte-stable");

    // evaluating the train split without --allow-train is refused (exit 2)
    let out = vfgrade()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--manifest"])
        .arg(&split_manifest)
        .args(["--split", "train"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "train-split eval must be refused"
    );
    let out = vfgrade()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--manifest"])
        .arg(&split_manifest)
        .args(["--split", "train", "--allow-train"])
        .output()
        .unwrap();
    assert!(out.status.success(), "--allow-train must permit it");

    // infer on one case: 4 labels -> 4 rows, probabilities sum to 1
    let manifest_text = std::fs::read_to_string(&manifest).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest_text).unwrap();
    let case = &parsed["cases"][0];
    let volume = data_dir.join(case["volume"].as_str().unwrap());
    let mask = data_dir.join(case["mask"].as_str().unwrap());
    let infer_json = dir.path().join("infer.json");
    let out = vfgrade()
        .args(["infer", "--checkpoint"])
        .arg(&ckpt)
        .args(["--volume"])
        .arg(&volume)
        .args(["--mask"])
        .arg(&mask)
        .args(["--out"])
        .arg(&infer_json)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "infer failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&infer_json).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4, "4 labeled vertebrae -> 4 rows");
    for row in rows {
        let probs = row["probabilities"].as_array().unwrap();
        let sum: f64 = probs.iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    // gradcam on the first vertebra of that case
    let label = case["vertebrae"][0]["label"].as_u64().unwrap();
    let cam_dir = dir.path().join("cam");
    let out = vfgrade()
        .args(["gradcam", "--checkpoint"])
        .arg(&ckpt)
        .args(["--volume"])
        .arg(&volume)
        .args(["--mask"])
        .arg(&mask)
        .args(["--label", &label.to_string(), "--out"])
        .arg(&cam_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "gradcam failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let entries: Vec<_> = std::fs::read_dir(&cam_dir).unwrap().collect();
    assert!(entries.len() >= 2, "expected overlay + attention volume");
}

#[test]
fn cli_exit_codes() {
    // config error -> 2
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[training]\nbogus_key = 1\n").unwrap();
    let out = vfgrade()
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // data error -> 3
    let out = vfgrade()
        .args([
            "infer",
            "--checkpoint",
            "/nonexistent.ckpt",
            "--volume",
            "/nonexistent.nii",
            "--mask",
            "/nonexistent.nii",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
