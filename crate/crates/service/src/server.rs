//! HTTP review API.
//!
//! Reads share the session lock; every write (assessment, threshold change)
//! takes it exclusively, so event-log appends are serialized and a stale
//! `base_seq` is detected under the same lock that appends.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cqa_core::calibration::{find_threshold, CalibrationCurve, CurveBin, ThresholdResult};
use cqa_core::decision::{adjudicate, ClinicianAssessment, Verdict};
use cqa_core::geometry::contour_polylines;
use cqa_core::uq::PredictedQuality;
use cqa_core::QaError;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{encode_png, CaseBundle};
use crate::error::{Result, ServiceError};
use crate::events::{EventKind, EventLog, SessionEvent};

/// Env var holding the listen address.
pub const LISTEN_ENV: &str = "CQA_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

/// Immutable inputs of a review session.
#[derive(Debug)]
pub struct ReviewData {
    pub cases: Vec<CaseBundle>,
    pub predictions: HashMap<String, PredictedQuality>,
    pub curve: CalibrationCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AssessmentPayload {
    slice_id: String,
    rater_id: String,
    assessed_class: u8,
}

#[derive(Debug)]
struct Session {
    log: EventLog,
    threshold: ThresholdResult,
    /// Latest assessment per slice with the sequence number of its event.
    assessments: HashMap<String, (ClinicianAssessment, u64)>,
}

impl Session {
    fn apply(&mut self, ev: &SessionEvent) -> Result<()> {
        let bad = |e: serde_json::Error| ServiceError::Usage(format!("event {}: {e}", ev.seq));
        match ev.kind {
            EventKind::Assessment => {
                let p: AssessmentPayload = serde_json::from_value(ev.payload.clone()).map_err(bad)?;
                let a = ClinicianAssessment::new(p.slice_id.clone(), p.rater_id, p.assessed_class, ev.timestamp.clone())?;
                self.assessments.insert(p.slice_id, (a, ev.seq));
            }
            EventKind::ThresholdChange => {
                self.threshold = serde_json::from_value(ev.payload.clone()).map_err(bad)?;
            }
            EventKind::Verdict => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AppState {
    data: Arc<ReviewData>,
    session: Arc<RwLock<Session>>,
}

impl AppState {
    /// Start a session at `threshold`, then replay any events already in `log`.
    pub fn new(data: ReviewData, threshold: ThresholdResult, log: EventLog) -> Result<Self> {
        for b in &data.cases {
            for s in &b.slices {
                if !data.predictions.contains_key(&s.slice_id) {
                    return Err(ServiceError::Usage(format!("no prediction for slice {}", s.slice_id)));
                }
            }
        }
        let mut session = Session {
            log,
            threshold,
            assessments: HashMap::new(),
        };
        let events = session.log.events().to_vec();
        for ev in &events {
            session.apply(ev)?;
        }
        Ok(Self {
            data: Arc::new(data),
            session: Arc::new(RwLock::new(session)),
        })
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.session.read().expect("session lock").log.events().to_vec()
    }
}

struct ApiError(StatusCode, String, String);

impl ApiError {
    fn not_found(msg: impl Into<String>) -> Self {
        Self(StatusCode::NOT_FOUND, "not_found".into(), msg.into())
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Self(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request".into(), msg.into())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::Qa(QaError::UnachievableTarget { .. } | QaError::Domain(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.kind().into(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Serialize)]
struct CaseSummary {
    case_id: String,
    slice_count: usize,
    assessed: usize,
    abstained: usize,
    warnings: usize,
}

#[derive(Debug, Serialize)]
struct SliceView {
    case_id: String,
    slice_index: usize,
    slice_id: String,
    rows: usize,
    cols: usize,
    spacing_mm: [f64; 2],
    image_url: String,
    /// Outer boundary of each auto-contour component as `[row, col]` pixels.
    polylines: Vec<Vec<[usize; 2]>>,
    /// Verdict before any clinician input.
    verdict: Verdict,
    /// Sequence number of the latest assessment on this slice (0 if none).
    seq: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    assessment: Option<ClinicianAssessment>,
}

#[derive(Debug, Serialize)]
struct AssessmentResponse {
    seq: u64,
    verdict: Verdict,
}

#[derive(Debug, Serialize)]
struct CalibrationView {
    target_accuracy: f64,
    tau: f64,
    coverage: f64,
    achieved_accuracy: f64,
    bins: Vec<CurveBin>,
}

impl AppState {
    fn case(&self, cid: &str) -> ApiResult<&CaseBundle> {
        self.data
            .cases
            .iter()
            .find(|c| c.subject_id == cid)
            .ok_or_else(|| ApiError::not_found(format!("unknown case '{cid}'")))
    }

    fn slice(&self, cid: &str, n: &str) -> ApiResult<(&CaseBundle, &crate::bundle::CaseSlice)> {
        let case = self.case(cid)?;
        let slice = n
            .parse::<usize>()
            .ok()
            .and_then(|n| case.slices.get(n))
            .ok_or_else(|| ApiError::not_found(format!("case '{cid}' has no slice '{n}'")))?;
        Ok((case, slice))
    }

    fn prediction(&self, slice_id: &str) -> &PredictedQuality {
        &self.data.predictions[slice_id]
    }
}

async fn list_cases(State(st): State<AppState>) -> Json<Vec<CaseSummary>> {
    let session = st.session.read().expect("session lock");
    let tau = session.threshold.tau;
    let cases = st
        .data
        .cases
        .iter()
        .map(|c| {
            let mut summary = CaseSummary {
                case_id: c.subject_id.clone(),
                slice_count: c.slices.len(),
                assessed: 0,
                abstained: 0,
                warnings: 0,
            };
            for s in &c.slices {
                let assessment = session.assessments.get(&s.slice_id).map(|(a, _)| a);
                let v = adjudicate(st.prediction(&s.slice_id), tau, assessment);
                summary.assessed += assessment.is_some() as usize;
                summary.abstained += (v.status == cqa_core::decision::VerdictStatus::Abstain) as usize;
                summary.warnings += v.warning as usize;
            }
            summary
        })
        .collect();
    Json(cases)
}

async fn get_slice(State(st): State<AppState>, Path((cid, n)): Path<(String, String)>) -> ApiResult<Json<SliceView>> {
    let (case, s) = st.slice(&cid, &n)?;
    let session = st.session.read().expect("session lock");
    let latest = session.assessments.get(&s.slice_id);
    Ok(Json(SliceView {
        case_id: case.subject_id.clone(),
        slice_index: s.index,
        slice_id: s.slice_id.clone(),
        rows: s.image.rows,
        cols: s.image.cols,
        spacing_mm: case.spacing_mm,
        image_url: format!("/api/cases/{}/slices/{}/image", case.subject_id, s.index),
        polylines: contour_polylines(&s.auto_mask),
        verdict: adjudicate(st.prediction(&s.slice_id), session.threshold.tau, None),
        seq: latest.map_or(0, |(_, seq)| *seq),
        assessment: latest.map(|(a, _)| a.clone()),
    }))
}

async fn get_slice_image(State(st): State<AppState>, Path((cid, n)): Path<(String, String)>) -> ApiResult<Response> {
    let (_, s) = st.slice(&cid, &n)?;
    let png = encode_png(s.image.rows, s.image.cols, s.image.to_u8());
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
struct AssessmentRequest {
    rater_id: String,
    assessed_class: i64,
    #[serde(default)]
    base_seq: Option<u64>,
}

async fn post_assessment(
    State(st): State<AppState>,
    Path((cid, n)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let (_, s) = st.slice(&cid, &n)?;
    let req: AssessmentRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::invalid(format!("bad assessment body: {e}")))?;
    let class = u8::try_from(req.assessed_class)
        .ok()
        .filter(|&c| (c as usize) < cqa_core::NUM_CLASSES)
        .ok_or_else(|| ApiError::invalid(format!("assessed_class {} must be 0, 1 or 2", req.assessed_class)))?;
    if req.rater_id.trim().is_empty() {
        return Err(ApiError::invalid("rater_id must not be empty"));
    }

    let mut session = st.session.write().expect("session lock");
    let current = session.assessments.get(&s.slice_id).map_or(0, |(_, seq)| *seq);
    if let Some(base) = req.base_seq {
        if base != current {
            let body = json!({
                "error": "conflict",
                "message": format!("slice {} was updated (seq {current}, request based on {base})", s.slice_id),
                "current_seq": current,
            });
            return Ok((StatusCode::CONFLICT, Json(body)).into_response());
        }
    }
    let timestamp = chrono::Utc::now().to_rfc3339();
    let payload = AssessmentPayload {
        slice_id: s.slice_id.clone(),
        rater_id: req.rater_id,
        assessed_class: class,
    };
    let ev = session
        .log
        .append(EventKind::Assessment, timestamp, serde_json::to_value(&payload).expect("serializable"))?;
    session.apply(&ev)?;
    let assessment = &session.assessments[&s.slice_id].0;
    let verdict = adjudicate(st.prediction(&s.slice_id), session.threshold.tau, Some(assessment));
    session.log.append(
        EventKind::Verdict,
        ev.timestamp.clone(),
        json!({"slice_id": s.slice_id, "assessment_seq": ev.seq, "verdict": verdict}),
    )?;
    Ok(Json(AssessmentResponse { seq: ev.seq, verdict }).into_response())
}

async fn get_calibration(State(st): State<AppState>) -> Json<CalibrationView> {
    let t = st.session.read().expect("session lock").threshold.clone();
    Json(CalibrationView {
        target_accuracy: t.target_accuracy,
        tau: t.tau,
        coverage: t.coverage,
        achieved_accuracy: t.achieved_accuracy,
        bins: st.data.curve.bins.clone(),
    })
}

#[derive(Debug, Deserialize)]
struct ThresholdRequest {
    target_accuracy: f64,
}

async fn post_threshold(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<ThresholdResult>> {
    let req: ThresholdRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::invalid(format!("bad threshold body: {e}")))?;
    if !(req.target_accuracy > 0.0 && req.target_accuracy <= 1.0) {
        return Err(ApiError::invalid(format!("target_accuracy {} outside (0, 1]", req.target_accuracy)));
    }
    let result = find_threshold(&st.data.curve, req.target_accuracy).map_err(ServiceError::from)?;
    let mut session = st.session.write().expect("session lock");
    let ev = session.log.append(
        EventKind::ThresholdChange,
        chrono::Utc::now().to_rfc3339(),
        serde_json::to_value(&result).expect("serializable"),
    )?;
    session.apply(&ev)?;
    Ok(Json(result))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{cid}/slices/{n}", get(get_slice))
        .route("/api/cases/{cid}/slices/{n}/image", get(get_slice_image))
        .route("/api/cases/{cid}/slices/{n}/assessment", post(post_assessment))
        .route("/api/calibration", get(get_calibration))
        .route("/api/threshold", post(post_threshold))
        .with_state(state)
}

/// Listen address from [`LISTEN_ENV`], falling back to [`DEFAULT_LISTEN`].
pub fn listen_addr() -> String {
    std::env::var(LISTEN_ENV).unwrap_or_else(|_| DEFAULT_LISTEN.to_string())
}

pub async fn serve(state: AppState, addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::io(addr, e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::io(addr, e))
}

/// Predictions keyed by slice id.
pub fn prediction_map(rows: &[crate::pipeline::PredictionRow]) -> HashMap<String, PredictedQuality> {
    rows.iter().map(|r| (r.slice_id.clone(), r.quality())).collect()
}

