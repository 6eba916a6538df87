//! Accuracy-vs-uncertainty curves, uncertainty threshold selection and
//! selective (accept/abstain) evaluation.
//!
//! Records are ordered by `(uncertainty, slice_id)`. The threshold for a target
//! accuracy is the uncertainty of the last record in the longest prefix whose
//! cumulative accuracy still meets the target. Records that share an
//! uncertainty value are always kept or dropped together, so `u <= tau`
//! selects exactly the chosen prefix.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::uq::{manual_entropy, RaterPanel};
use crate::NUM_CLASSES;

/// Default number of equal-count bins used for plotted curves.
pub const DEFAULT_CURVE_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalRecord {
    pub slice_id: String,
    pub uncertainty: f64,
    pub predicted_class: u8,
    pub reference_class: u8,
    pub correct: bool,
    /// Averaged outcome distribution, used for AUC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<[f64; NUM_CLASSES]>,
}

impl CalRecord {
    pub fn new(slice_id: impl Into<String>, uncertainty: f64, predicted_class: u8, reference_class: u8) -> Self {
        Self {
            slice_id: slice_id.into(),
            uncertainty,
            predicted_class,
            reference_class,
            correct: predicted_class == reference_class,
            class_probs: None,
        }
    }

    pub fn with_class_probs(mut self, probs: [f64; NUM_CLASSES]) -> Self {
        self.class_probs = Some(probs);
        self
    }
}

fn record_order(a: &CalRecord, b: &CalRecord) -> Ordering {
    a.uncertainty
        .total_cmp(&b.uncertainty)
        .then_with(|| a.slice_id.cmp(&b.slice_id))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub count: usize,
    pub mean_uncertainty: f64,
    pub max_uncertainty: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    /// Sorted ascending by `(uncertainty, slice_id)`.
    pub records: Vec<CalRecord>,
    /// `cumulative_accuracy[i]` is the accuracy over the first `i + 1` records.
    pub cumulative_accuracy: Vec<f64>,
    pub bins: Vec<CurveBin>,
}

impl CalibrationCurve {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn overall_accuracy(&self) -> f64 {
        *self.cumulative_accuracy.last().unwrap_or(&0.0)
    }

    /// Indices closing each run of equal uncertainty.
    fn tie_group_ends(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.records.len();
        (0..n).filter(move |&i| i + 1 == n || self.records[i + 1].uncertainty != self.records[i].uncertainty)
    }
}

pub fn build_curve(records: &[CalRecord]) -> Result<CalibrationCurve> {
    build_curve_with_bins(records, DEFAULT_CURVE_BINS)
}

pub fn build_curve_with_bins(records: &[CalRecord], n_bins: usize) -> Result<CalibrationCurve> {
    if records.is_empty() {
        return Err(QaError::EmptyInput("calibration curve needs at least one record".into()));
    }
    if let Some(r) = records.iter().find(|r| r.uncertainty.is_nan()) {
        return Err(QaError::Domain(format!("record {} has NaN uncertainty", r.slice_id)));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(record_order);

    let mut correct = 0usize;
    let cumulative_accuracy = sorted
        .iter()
        .enumerate()
        .map(|(i, r)| {
            correct += r.correct as usize;
            correct as f64 / (i + 1) as f64
        })
        .collect();

    let n = sorted.len();
    let n_bins = n_bins.clamp(1, n);
    let bins = (0..n_bins)
        .map(|b| {
            let chunk = &sorted[b * n / n_bins..(b + 1) * n / n_bins];
            let count = chunk.len();
            CurveBin {
                count,
                mean_uncertainty: chunk.iter().map(|r| r.uncertainty).sum::<f64>() / count as f64,
                max_uncertainty: chunk.last().map(|r| r.uncertainty).unwrap_or(f64::NAN),
                accuracy: chunk.iter().filter(|r| r.correct).count() as f64 / count as f64,
            }
        })
        .collect();

    Ok(CalibrationCurve {
        records: sorted,
        cumulative_accuracy,
        bins,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub target_accuracy: f64,
    pub tau: f64,
    /// Fraction of calibration records with uncertainty `<= tau`.
    pub coverage: f64,
    pub achieved_accuracy: f64,
}

/// Largest uncertainty threshold whose accepted calibration records reach `target_accuracy`.
pub fn find_threshold(curve: &CalibrationCurve, target_accuracy: f64) -> Result<ThresholdResult> {
    if curve.is_empty() {
        return Err(QaError::EmptyInput("empty calibration curve".into()));
    }
    if !(target_accuracy > 0.0 && target_accuracy <= 1.0) {
        return Err(QaError::Domain(format!("target accuracy {target_accuracy} outside (0, 1]")));
    }
    let n = curve.len() as f64;
    let qualifying = curve
        .tie_group_ends()
        .filter(|&i| curve.cumulative_accuracy[i] >= target_accuracy)
        .last();
    match qualifying {
        Some(i) => Ok(ThresholdResult {
            target_accuracy,
            tau: curve.records[i].uncertainty,
            coverage: (i + 1) as f64 / n,
            achieved_accuracy: curve.cumulative_accuracy[i],
        }),
        None => {
            // best attainable operating point, preferring more coverage on ties
            let best = curve
                .tie_group_ends()
                .max_by(|&a, &b| {
                    curve.cumulative_accuracy[a]
                        .total_cmp(&curve.cumulative_accuracy[b])
                        .then(a.cmp(&b))
                })
                .expect("non-empty curve");
            Err(QaError::UnachievableTarget {
                target: target_accuracy,
                best_accuracy: curve.cumulative_accuracy[best],
                coverage: (best + 1) as f64 / n,
            })
        }
    }
}

/// One-vs-rest statistics for a single class on the accepted records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
    pub auc: Option<f64>,
}

/// Support-weighted averages of the per-class statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedStats {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadCase {
    pub slice_id: String,
    pub uncertainty: f64,
    pub predicted_class: u8,
    pub reference_class: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub target_accuracy: Option<f64>,
    pub tau: f64,
    pub n_total: usize,
    pub n_accepted: usize,
    pub coverage: f64,
    /// `None` when nothing was accepted.
    pub selective_accuracy: Option<f64>,
    pub overall_accuracy: Option<f64>,
    /// Keyed by class index.
    pub per_class: BTreeMap<String, ClassStats>,
    pub weighted: WeightedStats,
    /// `confusion[reference][predicted]` over accepted records.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Accepted but misclassified records.
    pub bad_cases: Vec<BadCase>,
    pub curve_bins: Vec<CurveBin>,
}

impl SelectiveReport {
    /// Attach the calibration context the threshold came from.
    pub fn with_context(mut self, threshold: Option<&ThresholdResult>, curve: Option<&CalibrationCurve>) -> Self {
        if let Some(t) = threshold {
            self.target_accuracy = Some(t.target_accuracy);
        }
        if let Some(c) = curve {
            self.curve_bins = c.bins.clone();
        }
        self
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Split records at `tau` (accept `u <= tau`) and score the accepted part.
pub fn selective_evaluate(records: &[CalRecord], tau: f64) -> SelectiveReport {
    let accepted: Vec<&CalRecord> = records.iter().filter(|r| r.uncertainty <= tau).collect();
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for r in &accepted {
        confusion[r.reference_class as usize][r.predicted_class as usize] += 1;
    }

    let mut per_class = BTreeMap::new();
    let mut stats = Vec::with_capacity(NUM_CLASSES);
    for j in 0..NUM_CLASSES {
        let tp = confusion[j][j];
        let predicted: usize = (0..NUM_CLASSES).map(|i| confusion[i][j]).sum();
        let support: usize = confusion[j].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        let scored: Vec<(f64, bool)> = accepted
            .iter()
            .filter_map(|r| r.class_probs.map(|p| (p[j], r.reference_class as usize == j)))
            .collect();
        let auc = if scored.len() == accepted.len() {
            auc_from_scores(&scored).ok()
        } else {
            None
        };
        let s = ClassStats {
            precision,
            recall,
            f1,
            support,
            auc,
        };
        stats.push(s.clone());
        per_class.insert(j.to_string(), s);
    }

    let total_support: usize = stats.iter().map(|s| s.support).sum();
    let weighted_of = |get: fn(&ClassStats) -> Option<f64>| -> Option<f64> {
        if total_support == 0 {
            return None;
        }
        let sum: f64 = stats
            .iter()
            .map(|s| get(s).unwrap_or(0.0) * s.support as f64)
            .sum();
        Some(sum / total_support as f64)
    };
    let weighted = WeightedStats {
        precision: weighted_of(|s| s.precision),
        recall: weighted_of(|s| s.recall),
        f1: weighted_of(|s| s.f1),
    };

    let bad_cases = accepted
        .iter()
        .filter(|r| !r.correct)
        .map(|r| BadCase {
            slice_id: r.slice_id.clone(),
            uncertainty: r.uncertainty,
            predicted_class: r.predicted_class,
            reference_class: r.reference_class,
        })
        .collect();

    let n_correct = accepted.iter().filter(|r| r.correct).count();
    SelectiveReport {
        target_accuracy: None,
        tau,
        n_total: records.len(),
        n_accepted: accepted.len(),
        coverage: ratio(accepted.len(), records.len()).unwrap_or(0.0),
        selective_accuracy: ratio(n_correct, accepted.len()),
        overall_accuracy: ratio(records.iter().filter(|r| r.correct).count(), records.len()),
        per_class,
        weighted,
        confusion,
        bad_cases,
        curve_bins: Vec::new(),
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// ROC AUC of `score` for separating positives from negatives (Mann-Whitney
/// statistic, ties counted one half).
pub fn auc_from_scores(scored: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(QaError::UndefinedMetric(format!(
            "AUC needs both positives and negatives ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = ranks.iter().zip(scored).filter(|(_, s)| s.1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC for `class` using each record's probability of that class.
pub fn auc_per_class(records: &[CalRecord], class: u8) -> Result<f64> {
    let scored = records
        .iter()
        .map(|r| {
            r.class_probs
                .map(|p| (p[class as usize], r.reference_class == class))
                .ok_or_else(|| QaError::UndefinedMetric(format!("record {} has no class probabilities", r.slice_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    auc_from_scores(&scored)
}

/// Spearman rank correlation with average ranks for ties. A constant
/// sequence has no rank variation and yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(QaError::Dimension(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(QaError::UndefinedMetric("correlation needs at least two points".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyGroup {
    pub entropy: f64,
    pub mean_variance: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    /// Ascending by entropy.
    pub groups: Vec<EntropyGroup>,
    pub spearman: f64,
}

/// Correlation between rater disagreement (panel entropy) and the mean
/// predicted variance of the slices sharing that entropy value.
pub fn uncertainty_agreement(panels: &[RaterPanel], variances: &[f64]) -> Result<AgreementSummary> {
    if panels.len() != variances.len() {
        return Err(QaError::Dimension(format!(
            "{} panels vs {} predictions",
            panels.len(),
            variances.len()
        )));
    }
    // entropies of equal vote patterns are bit-identical; the key only guards rounding
    let mut groups: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    for (panel, &v) in panels.iter().zip(variances) {
        let h = manual_entropy(panel);
        let entry = groups.entry((h * 1e9).round() as i64).or_insert((h, 0.0, 0));
        entry.1 += v;
        entry.2 += 1;
    }
    if groups.len() < 2 {
        return Err(QaError::UndefinedMetric(format!(
            "need at least two distinct entropy groups, found {}",
            groups.len()
        )));
    }
    let groups: Vec<EntropyGroup> = groups
        .into_values()
        .map(|(entropy, sum, count)| EntropyGroup {
            entropy,
            mean_variance: sum / count as f64,
            count,
        })
        .collect();
    let hs: Vec<f64> = groups.iter().map(|g| g.entropy).collect();
    let vs: Vec<f64> = groups.iter().map(|g| g.mean_variance).collect();
    let rho = spearman(&hs, &vs)?;
    Ok(AgreementSummary { groups, spearman: rho })
}
