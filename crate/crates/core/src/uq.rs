//! Predictive moments of the three-level ordinal label from conditional
//! head probabilities, class decisions, and rater-panel statistics.
//!
//! Each stochastic pass yields `(f1, f2)` with `f1 = P(y >= 1)` and
//! `f2 = P(y >= 2 | y >= 1)`, so one pass defines the outcome distribution
//! `P(0) = 1 - f1`, `P(1) = f1 (1 - f2)`, `P(2) = f1 f2`.

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::NUM_CLASSES;

/// The `T` conditional-probability pairs produced by MC-dropout passes for one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McProbs {
    pairs: Vec<[f64; 2]>,
}

impl McProbs {
    pub fn new(pairs: Vec<[f64; 2]>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(QaError::EmptyInput("at least one MC pass is required".into()));
        }
        for (t, p) in pairs.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return Err(QaError::Domain(format!("pass {t}: probabilities {p:?} outside [0, 1]")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[[f64; 2]] {
        &self.pairs
    }

    pub fn passes(&self) -> usize {
        self.pairs.len()
    }

    fn mean_of(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        self.pairs.iter().map(|p| f(p[0], p[1])).sum::<f64>() / self.pairs.len() as f64
    }
}

/// Mean and variance of `y = y1 + y2` under a single pass.
pub fn per_pass_moments(f1: f64, f2: f64) -> Result<(f64, f64)> {
    for (name, v) in [("f1", f1), ("f2", f2)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(QaError::Domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(moments_unchecked(f1, f2))
}

#[inline]
fn moments_unchecked(f1: f64, f2: f64) -> (f64, f64) {
    let mean = f1 + f1 * f2;
    let var = f1 + 3.0 * f1 * f2 - f1 * f1 * (1.0 + f2) * (1.0 + f2);
    (mean, var)
}

/// MC estimates of the predictive mean and total variance (expected per-pass
/// variance plus the variance of per-pass means).
pub fn mc_moments(mc: &McProbs) -> (f64, f64) {
    let t = mc.passes() as f64;
    let (mut mean_sum, mut var_sum, mut sq_sum) = (0.0, 0.0, 0.0);
    for p in mc.pairs() {
        let (m, v) = moments_unchecked(p[0], p[1]);
        mean_sum += m;
        var_sum += v;
        sq_sum += m * m;
    }
    let mean = mean_sum / t;
    let var = var_sum / t + sq_sum / t - mean * mean;
    // cancellation can leave a tiny negative residue when all passes agree
    (mean, var.max(0.0))
}

/// How the two averaged head outputs are turned into a class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRule {
    /// Threshold each averaged conditional probability at 0.5 and add the indicators.
    #[default]
    Conditional,
    /// Threshold the averaged marginals `P(y >= 1)` and `P(y >= 2)` instead.
    Cumulative,
}

/// Class decision with the averaged conditional probabilities it was based on.
pub fn predict_class(mc: &McProbs, rule: ClassRule) -> (u8, f64, f64) {
    let p1 = mc.mean_of(|f1, _| f1);
    let p2 = mc.mean_of(|_, f2| f2);
    let second = match rule {
        ClassRule::Conditional => p2,
        ClassRule::Cumulative => mc.mean_of(|f1, f2| f1 * f2),
    };
    ((p1 > 0.5) as u8 + (second > 0.5) as u8, p1, p2)
}

/// `(P0, P1, P2)` of the MC-averaged outcome distribution.
pub fn class_probabilities(mc: &McProbs) -> [f64; NUM_CLASSES] {
    let ge1 = mc.mean_of(|f1, _| f1);
    let ge2 = mc.mean_of(|f1, f2| f1 * f2);
    [1.0 - ge1, ge1 - ge2, ge2]
}

/// Everything downstream needs to know about one slice's prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedQuality {
    pub mean: f64,
    pub variance: f64,
    pub p1_hat: f64,
    pub p2_hat: f64,
    pub class_probs: [f64; NUM_CLASSES],
    pub predicted_class: u8,
}

impl PredictedQuality {
    pub fn from_mc(mc: &McProbs, rule: ClassRule) -> Self {
        let (mean, variance) = mc_moments(mc);
        let (predicted_class, p1_hat, p2_hat) = predict_class(mc, rule);
        Self {
            mean,
            variance,
            p1_hat,
            p2_hat,
            class_probs: class_probabilities(mc),
            predicted_class,
        }
    }
}

/// Class votes from independent raters for one slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterPanel {
    labels: Vec<u8>,
}

impl RaterPanel {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(QaError::EmptyInput("rater panel needs at least one label".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(QaError::Domain(format!("rater label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn probabilities(&self) -> [f64; NUM_CLASSES] {
        let n = self.labels.len() as f64;
        self.counts().map(|c| c as f64 / n)
    }
}

/// Shannon entropy of the panel's vote distribution in nats, `0 ln 0 = 0`.
pub fn manual_entropy(panel: &RaterPanel) -> f64 {
    let h: f64 = panel
        .probabilities()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // a unanimous panel evaluates to -0.0
    h.max(0.0)
}

/// Strict-majority class, or class 1 when no class holds a majority.
pub fn majority_vote(panel: &RaterPanel) -> u8 {
    let n = panel.labels.len();
    panel
        .counts()
        .iter()
        .position(|&c| 2 * c > n)
        .map(|j| j as u8)
        .unwrap_or(1)
}
