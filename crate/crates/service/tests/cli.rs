mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{cqa, cqa_ok, tree, write_five_record_fixture};
use cqa_core::calibration::ThresholdResult;
use cqa_service::pipeline::{read_csv, read_json, ProbRow, PredictionRow};

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn calibrate_five_record_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (preds, labels) = write_five_record_fixture(dir.path());
    let out = dir.path().join("threshold.json");
    let curve = dir.path().join("curve.json");
    cqa_ok(&["calibrate", "--predictions", s(&preds), "--labels", s(&labels), "--target", "0.9", "--out", s(&out), "--curve-out", s(&curve)]);
    let t: ThresholdResult = read_json(&out).unwrap();
    assert_eq!(t.tau, 0.10);
    assert_eq!(t.coverage, 0.4);
    assert_eq!(t.achieved_accuracy, 1.0);
    let raw: serde_json::Value = read_json(&out).unwrap();
    assert_eq!(raw["tau"], serde_json::json!(0.1));

    cqa_ok(&["calibrate", "--predictions", s(&preds), "--labels", s(&labels), "--target", "0.7", "--out", s(&out)]);
    assert_eq!(read_json::<ThresholdResult>(&out).unwrap().tau, 0.20);
}

#[test]
fn unachievable_target_exits_nonzero_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let (preds, labels) = write_five_record_fixture(dir.path());
    // every record wrong: no prefix reaches any positive target
    std::fs::write(&labels, "slice_id,label\ns/0,0\ns/1,0\ns/2,0\ns/3,0\ns/4,2\n").unwrap();
    let out = cqa(&["calibrate", "--predictions", s(&preds), "--labels", s(&labels), "--target", "0.5", "--out", s(&dir.path().join("t.json"))]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "unachievable_target");
    assert!(err["message"].is_string());
    assert!(!dir.path().join("t.json").exists());
}

#[test]
fn missing_inputs_and_bad_config_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = cqa(&["metrics", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("m.csv"))]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"mc_passes": 0}"#).unwrap();
    let out = cqa(&["--config", s(&cfg), "synth", "--out", s(&dir.path().join("d")), "--n", "4"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    let out = cqa(&["calibrate", "--labels", "x.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("predictions"));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cqa_ok(&["synth", "--n", "2000", "--seed", "7", "--out", s(&a)]);
    cqa_ok(&["synth", "--n", "2000", "--seed", "7", "--out", s(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    // 200 subjects: meta, labels, raters + 3 PNGs per slice; plus synth.json
    assert_eq!(ta.len(), 200 * 3 + 2000 * 3 + 1);
    assert!(ta == tb);

    let c = dir.path().join("c");
    cqa_ok(&["synth", "--n", "20", "--seed", "8", "--out", s(&c)]);
    assert_ne!(tree(&c)["subject_0000/labels.csv"], ta["subject_0000/labels.csv"]);
}

/// Small dataset plus a one-epoch model.
fn tiny_model(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let model = dir.join("model.bin");
    cqa_ok(&["synth", "--n", "12", "--seed", "3", "--out", s(&data)]);
    cqa_ok(&["train", "--data", s(&data), "--epochs", "1", "--out", s(&model)]);
    (data, model)
}

fn rows_per_slice(probs: &Path) -> BTreeMap<String, Vec<usize>> {
    let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in read_csv::<ProbRow>(probs).unwrap() {
        m.entry(r.slice_id).or_default().push(r.pass);
    }
    m
}

#[test]
fn predict_writes_t_rows_per_slice() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = tiny_model(dir.path());
    let probs = dir.path().join("probs.csv");
    let preds = dir.path().join("preds.csv");
    cqa_ok(&["predict", "--model", s(&model), "--data", s(&data), "--t", "20", "--probs-out", s(&probs), "--out", s(&preds)]);
    let rows = rows_per_slice(&probs);
    assert_eq!(rows.len(), 12);
    for passes in rows.values() {
        assert_eq!(passes, &(0..20).collect::<Vec<_>>());
    }
    let header = std::fs::read_to_string(&probs).unwrap();
    assert!(header.starts_with("slice_id,pass,f1,f2\n"));
    let p = std::fs::read_to_string(&preds).unwrap();
    assert!(p.starts_with("slice_id,mean,variance,p1_hat,p2_hat,P0,P1,P2,predicted_class\n"));
    let predictions: Vec<PredictionRow> = read_csv(&preds).unwrap();
    assert_eq!(predictions.len(), 12);
    for r in &predictions {
        assert!((r.p0 + r.p1 + r.p2 - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&r.variance));
    }

    // T from the config file when no flag is given
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"mc_passes": 5}"#).unwrap();
    cqa_ok(&["--config", s(&cfg), "predict", "--model", s(&model), "--data", s(&data), "--probs-out", s(&probs), "--out", s(&preds)]);
    assert!(rows_per_slice(&probs).values().all(|p| p.len() == 5));
}

#[test]
fn config_paths_stand_in_for_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = tiny_model(dir.path());
    let preds = dir.path().join("preds.csv");
    let threshold = dir.path().join("threshold.json");
    let cfg = dir.path().join("cfg.json");
    let paths = serde_json::json!({
        "target_accuracy": 0.05,
        "paths": {"data": data, "model": model, "predictions": preds, "threshold": threshold}
    });
    std::fs::write(&cfg, paths.to_string()).unwrap();
    let c = s(&cfg);
    cqa_ok(&["--config", c, "predict", "--probs-out", s(&dir.path().join("probs.csv"))]);
    cqa_ok(&["--config", c, "calibrate"]);
    let report = dir.path().join("report.json");
    cqa_ok(&["--config", c, "evaluate", "--out", s(&report)]);
    let r: serde_json::Value = read_json(&report).unwrap();
    for key in ["target_accuracy", "tau", "coverage", "selective_accuracy", "overall_accuracy", "per_class", "confusion", "bad_cases", "curve_bins"] {
        assert!(r.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(r["target_accuracy"], serde_json::json!(0.05));
}
