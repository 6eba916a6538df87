mod common;

use std::collections::HashSet;

use axum::http::{Method, StatusCode};
use common::{app, call, json, review_data, threshold, TAU};
use cqa_core::decision::{ABSTAIN_MESSAGE, WARNING_MESSAGE};
use cqa_service::events::{EventKind, EventLog};
use cqa_service::server::AppState;
use serde_json::json;

fn assess(class: serde_json::Value) -> Option<serde_json::Value> {
    Some(json!({"rater_id": "dr_a", "assessed_class": class}))
}

#[tokio::test]
async fn class_two_against_confident_class_one_warns() {
    let (_, app) = app(EventLog::in_memory());
    let (status, body) = json(&app, Method::POST, "/api/cases/case_0000/slices/0/assessment", assess(json!(2))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["verdict"]["warning"], json!(true));
    assert_eq!(body["verdict"]["status"], json!("confident"));
    assert_eq!(body["verdict"]["predicted_class"], json!(1));
    assert_eq!(body["verdict"]["message"], json!(WARNING_MESSAGE));
    assert_eq!(body["seq"], json!(1));
}

#[tokio::test]
async fn agreement_and_lower_assessments_do_not_warn() {
    let (_, app) = app(EventLog::in_memory());
    for (n, class) in [(0, 1), (0, 0), (2, 0), (2, 1), (3, 2), (3, 0)] {
        let uri = format!("/api/cases/case_0001/slices/{n}/assessment");
        let (status, body) = json(&app, Method::POST, &uri, assess(json!(class))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["verdict"]["warning"], json!(false), "slice {n} class {class}");
    }
}

#[tokio::test]
async fn invalid_class_is_unprocessable() {
    let (state, app) = app(EventLog::in_memory());
    for bad in [json!(5), json!(-1), json!("two"), json!(1.5)] {
        let (status, body) = json(&app, Method::POST, "/api/cases/case_0000/slices/0/assessment", assess(bad.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
        assert_eq!(body["error"], json!("invalid_request"));
    }
    let (status, _) = json(&app, Method::POST, "/api/cases/case_0000/slices/0/assessment", Some(json!({"assessed_class": 1}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(state.events().is_empty());
}

#[tokio::test]
async fn unknown_case_or_slice_is_not_found() {
    let (_, app) = app(EventLog::in_memory());
    for uri in [
        "/api/cases/nope/slices/0",
        "/api/cases/case_0000/slices/4",
        "/api/cases/case_0000/slices/x",
        "/api/cases/case_0000/slices/9/image",
    ] {
        let (status, body) = json(&app, Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["error"], json!("not_found"));
    }
    let (status, _) = json(&app, Method::POST, "/api/cases/nope/slices/0/assessment", assess(json!(1))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn high_variance_slice_abstains() {
    let (_, app) = app(EventLog::in_memory());
    let (status, body) = json(&app, Method::GET, "/api/cases/case_0000/slices/1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["verdict"]["status"], json!("abstain"));
    assert_eq!(body["verdict"]["message"], json!(ABSTAIN_MESSAGE));
    assert!(body["verdict"].get("predicted_class").is_none());
    // abstention holds whatever the clinician says
    let (_, post) = json(&app, Method::POST, "/api/cases/case_0000/slices/1/assessment", assess(json!(2))).await;
    assert_eq!(post["verdict"]["status"], json!("abstain"));
    assert_eq!(post["verdict"]["warning"], json!(false));
}

#[tokio::test]
async fn variance_equal_to_tau_is_confident() {
    let (_, app) = app(EventLog::in_memory());
    let (_, body) = json(&app, Method::GET, "/api/cases/case_0000/slices/3", None).await;
    assert_eq!(body["verdict"]["status"], json!("confident"));
    assert_eq!(body["verdict"]["variance"], json!(TAU));
}

#[tokio::test]
async fn slice_view_carries_geometry_and_image() {
    let (_, app) = app(EventLog::in_memory());
    let (_, body) = json(&app, Method::GET, "/api/cases/case_0000/slices/2", None).await;
    assert_eq!(body["slice_id"], json!("case_0000/2"));
    assert_eq!((body["rows"].as_u64(), body["cols"].as_u64()), (Some(64), Some(64)));
    assert_eq!(body["seq"], json!(0));
    assert!(body.get("assessment").is_none());
    let lines = body["polylines"].as_array().unwrap();
    assert!(!lines.is_empty());
    for p in lines[0].as_array().unwrap() {
        let rc: [usize; 2] = serde_json::from_value(p.clone()).unwrap();
        assert!(rc[0] < 64 && rc[1] < 64);
    }
    // the blind view never reveals an assessment-dependent warning
    assert_eq!(body["verdict"]["warning"], json!(false));

    let (status, png) = call(&app, Method::GET, body["image_url"].as_str().unwrap(), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let decoded = image::load_from_memory(&png).unwrap().to_luma8();
    assert_eq!(decoded.dimensions(), (64, 64));
}

#[tokio::test]
async fn stale_base_seq_conflicts() {
    let (state, app) = app(EventLog::in_memory());
    let uri = "/api/cases/case_0000/slices/0/assessment";
    let first = json!({"rater_id": "a", "assessed_class": 1, "base_seq": 0});
    let (status, body) = json(&app, Method::POST, uri, Some(first.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let seq = body["seq"].as_u64().unwrap();

    // a second writer still holding seq 0 loses
    let (status, body) = json(&app, Method::POST, uri, Some(first)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["current_seq"], json!(seq));

    let (status, _) = json(&app, Method::POST, uri, Some(json!({"rater_id": "b", "assessed_class": 2, "base_seq": seq}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, view) = json(&app, Method::GET, "/api/cases/case_0000/slices/0", None).await;
    assert_eq!(view["assessment"]["rater_id"], json!("b"));
    // assessment + verdict per accepted write, nothing for the conflict
    assert_eq!(state.events().len(), 4);
}

#[tokio::test]
async fn case_list_reports_progress() {
    let (_, app) = app(EventLog::in_memory());
    json(&app, Method::POST, "/api/cases/case_0001/slices/0/assessment", assess(json!(2))).await;
    json(&app, Method::POST, "/api/cases/case_0001/slices/2/assessment", assess(json!(0))).await;
    let (_, list) = json(&app, Method::GET, "/api/cases", None).await;
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0], json!({"case_id": "case_0000", "slice_count": 4, "assessed": 0, "abstained": 1, "warnings": 0}));
    assert_eq!(list[1], json!({"case_id": "case_0001", "slice_count": 4, "assessed": 2, "abstained": 1, "warnings": 1}));
}

#[tokio::test]
async fn threshold_change_is_recorded_and_applied() {
    let (state, app) = app(EventLog::in_memory());
    let (_, cal) = json(&app, Method::GET, "/api/calibration", None).await;
    assert_eq!(cal["tau"], json!(TAU));
    assert_eq!(cal["bins"].as_array().unwrap().len(), 20);

    let (status, t) = json(&app, Method::POST, "/api/threshold", Some(json!({"target_accuracy": 0.7}))).await;
    assert_eq!(status, StatusCode::OK, "{t}");
    let tau = t["tau"].as_f64().unwrap();
    assert!(tau > TAU);
    let (_, cal) = json(&app, Method::GET, "/api/calibration", None).await;
    assert_eq!(cal["tau"], json!(tau));
    assert_eq!(cal["target_accuracy"], json!(0.7));
    let events = state.events();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].kind, EventKind::ThresholdChange);

    let (_, v) = json(&app, Method::GET, "/api/cases/case_0000/slices/3", None).await;
    assert_eq!(v["verdict"]["tau"], json!(tau));

    for bad in [json!({"target_accuracy": 0.0}), json!({"target_accuracy": 1.5}), json!({"target": 0.9})] {
        let (status, _) = json(&app, Method::POST, "/api/threshold", Some(bad)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
    // the low-uncertainty half of the curve is all correct
    let (status, body) = json(&app, Method::POST, "/api/threshold", Some(json!({"target_accuracy": 1.0}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(body["coverage"].as_f64().unwrap() < 1.0);
    assert_eq!(state.events().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_get_unique_sequence_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    let (state, app) = app(EventLog::open(&path).unwrap());
    let mut tasks = Vec::new();
    for round in 0..5 {
        for case in ["case_0000", "case_0001"] {
            for n in 0..4 {
                let app = app.clone();
                let uri = format!("/api/cases/{case}/slices/{n}/assessment");
                let body = json!({"rater_id": format!("r{round}"), "assessed_class": (n + round) % 3});
                tasks.push(tokio::spawn(async move { json(&app, Method::POST, &uri, Some(body)).await }));
            }
        }
    }
    let mut seqs = HashSet::new();
    for t in tasks {
        let (status, body) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert!(seqs.insert(body["seq"].as_u64().unwrap()));
    }
    assert_eq!(seqs.len(), 40);

    let logged = EventLog::open(&path).unwrap();
    let events = logged.events();
    assert_eq!(events, state.events().as_slice());
    let assessments: Vec<u64> = events.iter().filter(|e| e.kind == EventKind::Assessment).map(|e| e.seq).collect();
    assert_eq!(assessments.iter().copied().collect::<HashSet<_>>(), seqs);
    assert_eq!(assessments.len(), 40);
    assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1));
}

async fn snapshot(app: &axum::Router) -> Vec<(String, Vec<u8>)> {
    let mut uris = vec!["/api/cases".to_string(), "/api/calibration".to_string()];
    for case in ["case_0000", "case_0001"] {
        for n in 0..4 {
            uris.push(format!("/api/cases/{case}/slices/{n}"));
            uris.push(format!("/api/cases/{case}/slices/{n}/image"));
        }
    }
    let mut out = Vec::new();
    for u in uris {
        let (status, body) = call(app, Method::GET, &u, None).await;
        assert_eq!(status, StatusCode::OK);
        out.push((u, body));
    }
    out
}

#[tokio::test]
async fn replay_reproduces_every_get() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    let before = {
        let (_, app) = app(EventLog::open(&path).unwrap());
        json(&app, Method::POST, "/api/cases/case_0000/slices/0/assessment", assess(json!(2))).await;
        json(&app, Method::POST, "/api/threshold", Some(json!({"target_accuracy": 0.8}))).await;
        json(&app, Method::POST, "/api/cases/case_0001/slices/3/assessment", assess(json!(1))).await;
        json(&app, Method::POST, "/api/cases/case_0000/slices/0/assessment", assess(json!(0))).await;
        snapshot(&app).await
    };
    let restarted = AppState::new(review_data(), threshold(), EventLog::open(&path).unwrap()).unwrap();
    let app = cqa_service::server::router(restarted.clone());
    assert_eq!(snapshot(&app).await, before);
    // and once more, from the same log
    let again = AppState::new(review_data(), threshold(), EventLog::open(&path).unwrap()).unwrap();
    assert_eq!(snapshot(&cqa_service::server::router(again)).await, before);
}

#[test]
fn state_requires_a_prediction_for_every_slice() {
    let mut data = review_data();
    data.predictions.remove("case_0001/3");
    let err = AppState::new(data, threshold(), EventLog::in_memory()).unwrap_err();
    assert!(err.to_string().contains("case_0001/3"));
}
