#![allow(dead_code)]

use std::collections::HashMap;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cqa_core::calibration::{build_curve, CalRecord, ThresholdResult};
use cqa_core::uq::PredictedQuality;
use cqa_service::bundle::CaseBundle;
use cqa_service::config::AppConfig;
use cqa_service::events::EventLog;
use cqa_service::pipeline::synth_bundles;
use cqa_service::server::{router, AppState, ReviewData};
use http_body_util::BodyExt;
use tower::ServiceExt;

pub const TAU: f64 = 0.3;

/// Two cases of four synthetic slices each.
pub fn cases() -> Vec<CaseBundle> {
    let cfg = AppConfig {
        slices_per_subject: 4,
        ..AppConfig::default()
    };
    synth_bundles(&cfg, 8, 21, "case_").unwrap().0
}

pub fn quality(predicted_class: u8, variance: f64) -> PredictedQuality {
    let mut class_probs = [0.1; 3];
    class_probs[predicted_class as usize] = 0.8;
    PredictedQuality {
        mean: predicted_class as f64,
        variance,
        p1_hat: 0.5,
        p2_hat: 0.5,
        class_probs,
        predicted_class,
    }
}

/// Slice `n` of each case: 0 → confident class 1, 1 → abstain, 2 → confident
/// class 0, 3 → confident class 2.
pub fn predictions(cases: &[CaseBundle]) -> HashMap<String, PredictedQuality> {
    cases
        .iter()
        .flat_map(|c| &c.slices)
        .map(|s| {
            let q = match s.index % 4 {
                0 => quality(1, 0.05),
                1 => quality(1, 0.9),
                2 => quality(0, 0.1),
                _ => quality(2, TAU),
            };
            (s.slice_id.clone(), q)
        })
        .collect()
}

pub fn review_data() -> ReviewData {
    let cases = cases();
    let predictions = predictions(&cases);
    let records: Vec<CalRecord> = (0..40)
        .map(|i| {
            let u = i as f64 / 40.0;
            let correct = i < 20 || i % 3 == 0;
            CalRecord::new(format!("r{i:02}"), u, 1, if correct { 1 } else { 0 })
        })
        .collect();
    ReviewData {
        cases,
        predictions,
        curve: build_curve(&records).unwrap(),
    }
}

pub fn threshold() -> ThresholdResult {
    ThresholdResult {
        target_accuracy: 0.9,
        tau: TAU,
        coverage: 0.5,
        achieved_accuracy: 1.0,
    }
}

pub fn app(log: EventLog) -> (AppState, Router) {
    let state = AppState::new(review_data(), threshold(), log).unwrap();
    (state.clone(), router(state))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn json(app: &Router, method: Method, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, serde_json::Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

pub fn cqa(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_cqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("cqa binary runs")
}

/// Run `cqa` and fail the test with its stderr if it exits nonzero.
pub fn cqa_ok(args: &[&str]) {
    let out = cqa(args);
    assert!(out.status.success(), "cqa {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

/// Every file below `root`, keyed by relative path.
pub fn tree(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// `(slice_id, variance, predicted, reference)` with cumulative accuracies
/// 1, 1, 2/3, 3/4, 3/5 in uncertainty order.
pub const FIVE_RECORDS: [(&str, f64, u8, u8); 5] = [
    ("s/0", 0.05, 1, 1),
    ("s/1", 0.10, 2, 2),
    ("s/2", 0.15, 0, 1),
    ("s/3", 0.20, 2, 2),
    ("s/4", 0.30, 1, 0),
];

/// Write the five records as a prediction CSV and a label CSV.
pub fn write_five_record_fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let preds = dir.join("five_predictions.csv");
    let labels = dir.join("five_labels.csv");
    let mut p = String::from("slice_id,mean,variance,p1_hat,p2_hat,P0,P1,P2,predicted_class\n");
    let mut l = String::from("slice_id,label\n");
    for (id, v, pred, reference) in FIVE_RECORDS {
        let mut probs = [0.1; 3];
        probs[pred as usize] = 0.8;
        p.push_str(&format!("{id},{pred},{v},0.5,0.5,{},{},{},{pred}\n", probs[0], probs[1], probs[2]));
        l.push_str(&format!("{id},{reference}\n"));
    }
    std::fs::write(&preds, p).unwrap();
    std::fs::write(&labels, l).unwrap();
    (preds, labels)
}
