//! Accept/abstain verdicts and the clinician warning rule.

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::uq::PredictedQuality;
use crate::NUM_CLASSES;

pub const ABSTAIN_MESSAGE: &str =
    "High model uncertainty on this slice: no quality prediction is offered. Please review the contour carefully.";
pub const WARNING_MESSAGE: &str =
    "The model confidently predicts this contour needs revision, but it was assessed as acceptable. Please re-evaluate before proceeding.";
pub const AGREE_MESSAGE: &str = "Model and clinician assessments agree.";
pub const NO_WARNING_MESSAGE: &str = "No warning: the clinician assessment stands.";
pub const AWAITING_MESSAGE: &str = "Confident prediction; awaiting clinician assessment.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicianAssessment {
    pub slice_id: String,
    pub rater_id: String,
    pub assessed_class: u8,
    /// RFC 3339.
    pub timestamp: String,
}

impl ClinicianAssessment {
    pub fn new(
        slice_id: impl Into<String>,
        rater_id: impl Into<String>,
        assessed_class: u8,
        timestamp: impl Into<String>,
    ) -> Result<Self> {
        if assessed_class as usize >= NUM_CLASSES {
            return Err(QaError::Domain(format!("assessed class {assessed_class} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self {
            slice_id: slice_id.into(),
            rater_id: rater_id.into(),
            assessed_class,
            timestamp: timestamp.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Confident,
    Abstain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    /// Present only for confident verdicts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<u8>,
    pub warning: bool,
    pub message: String,
    pub variance: f64,
    pub tau: f64,
}

/// Apply the accept/abstain split at `tau` and, for confident predictions,
/// the warning rule: warn only when the model predicts class 0 or 1 and the
/// clinician assessed class 2. A variance equal to `tau` is confident.
pub fn adjudicate(pred: &PredictedQuality, tau: f64, assessment: Option<&ClinicianAssessment>) -> Verdict {
    let base = |status, predicted_class, warning, message: &str| Verdict {
        status,
        predicted_class,
        warning,
        message: message.to_string(),
        variance: pred.variance,
        tau,
    };
    if pred.variance > tau {
        return base(VerdictStatus::Abstain, None, false, ABSTAIN_MESSAGE);
    }
    let predicted = pred.predicted_class;
    match assessment.map(|a| a.assessed_class) {
        None => base(VerdictStatus::Confident, Some(predicted), false, AWAITING_MESSAGE),
        Some(2) if predicted < 2 => base(VerdictStatus::Confident, Some(predicted), true, WARNING_MESSAGE),
        Some(c) if c == predicted => base(VerdictStatus::Confident, Some(predicted), false, AGREE_MESSAGE),
        Some(_) => base(VerdictStatus::Confident, Some(predicted), false, NO_WARNING_MESSAGE),
    }
}
