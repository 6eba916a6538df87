//! The CLI verbs as library functions.

use std::collections::BTreeMap;
use std::path::Path;

use cqa_core::boc_net::{fine_tune, mc_forward, train, Checkpoint, Network, TrainOutcome};
use cqa_core::calibration::{
    build_curve, find_threshold, selective_evaluate, uncertainty_agreement, AgreementSummary, CalRecord,
    CalibrationCurve, SelectiveReport, ThresholdResult,
};
use cqa_core::geometry::compute_metrics;
use cqa_core::rng::derive_seed;
use cqa_core::synthgen::{generate_balanced_dataset, simulate_manual_labels, MIN_CLASS_FRACTION};
use cqa_core::uq::{PredictedQuality, RaterPanel};
use serde::{Deserialize, Serialize};

use crate::bundle::{bundles_from_samples, write_case_bundle, CaseBundle, LabelRow};
use crate::config::{AppConfig, LabelSource};
use crate::error::{Result, ServiceError};
use crate::features::{examples, slice_input, slice_label};

/// Regeneration attempts allowed while balancing synthetic classes.
const BALANCE_ATTEMPTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n: usize,
    pub seed: u64,
    pub subjects: usize,
    pub histogram: [usize; 3],
    pub balanced: bool,
    pub perturbation: cqa_core::synthgen::PerturbationParams,
}

/// Generate `n` synthetic slices with simulated rater panels, grouped into
/// subjects.
pub fn synth_bundles(cfg: &AppConfig, n: usize, seed: u64, prefix: &str) -> Result<(Vec<CaseBundle>, SynthSummary)> {
    let synth = cfg.synth_config();
    let ds = generate_balanced_dataset(n, &synth, seed, BALANCE_ATTEMPTS)?;
    let panels: Vec<RaterPanel> = simulate_manual_labels(&ds.samples, &cfg.thresholds, &cfg.rater_noise, derive_seed(seed, u64::MAX))?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let bundles = bundles_from_samples(&ds.samples, Some(&panels), synth.spacing_mm, cfg.slices_per_subject, prefix);
    let summary = SynthSummary {
        n,
        seed,
        subjects: bundles.len(),
        histogram: ds.histogram,
        balanced: ds.is_balanced(MIN_CLASS_FRACTION),
        perturbation: ds.perturbation,
    };
    Ok((bundles, summary))
}

pub fn synth_to_dir(cfg: &AppConfig, out: &Path, n: usize, seed: u64) -> Result<SynthSummary> {
    let (bundles, summary) = synth_bundles(cfg, n, seed, "subject_")?;
    std::fs::create_dir_all(out).map_err(|e| ServiceError::io(out, e))?;
    for b in &bundles {
        write_case_bundle(&out.join(&b.subject_id), b)?;
    }
    write_json(&out.join("synth.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub slice_id: String,
    pub dsc: f64,
    pub sdsc: f64,
    pub hd95_mm: f64,
}

fn require_ref(s: &crate::bundle::CaseSlice) -> Result<&cqa_core::geometry::MaskSlice> {
    s.ref_mask
        .as_ref()
        .ok_or_else(|| ServiceError::Usage(format!("slice {} has no reference mask", s.slice_id)))
}

pub fn metrics(cfg: &AppConfig, bundles: &[CaseBundle]) -> Result<Vec<MetricsRow>> {
    bundles
        .iter()
        .flat_map(|b| &b.slices)
        .map(|s| {
            let m = compute_metrics(require_ref(s)?, &s.auto_mask, cfg.sdsc_tolerance_mm)?;
            Ok(MetricsRow {
                slice_id: s.slice_id.clone(),
                dsc: m.dsc,
                sdsc: m.sdsc,
                hd95_mm: m.hd95_mm,
            })
        })
        .collect()
}

pub fn surrogate_labels(cfg: &AppConfig, bundles: &[CaseBundle]) -> Result<Vec<LabelRow>> {
    bundles
        .iter()
        .flat_map(|b| &b.slices)
        .map(|s| {
            let m = compute_metrics(require_ref(s)?, &s.auto_mask, cfg.sdsc_tolerance_mm)?;
            let label = cqa_core::geometry::surrogate_label(&m, &cfg.thresholds);
            Ok(LabelRow::new(s.slice_id.clone(), label, &m))
        })
        .collect()
}

pub fn train_model(
    cfg: &AppConfig,
    data: &[CaseBundle],
    validation: Option<&[CaseBundle]>,
) -> Result<(Checkpoint, TrainOutcome)> {
    let netcfg = cfg.network_config();
    let net = Network::new(netcfg.clone())?;
    let train_set = examples(data, &netcfg, cfg.label_source, cfg.sdsc_tolerance_mm)?;
    let val_set = validation
        .map(|v| examples(v, &netcfg, cfg.label_source, cfg.sdsc_tolerance_mm))
        .transpose()?;
    let out = train(&cfg.train, &net, &train_set, val_set.as_deref())?;
    Ok((
        Checkpoint {
            config: netcfg,
            params: out.params.clone(),
        },
        out,
    ))
}

pub fn fine_tune_model(
    cfg: &AppConfig,
    pretrained: &Checkpoint,
    lr_groups: &[(String, f64)],
    data: &[CaseBundle],
    validation: Option<&[CaseBundle]>,
) -> Result<(Checkpoint, TrainOutcome)> {
    let net = pretrained.network()?;
    let netcfg = &pretrained.config;
    let train_set = examples(data, netcfg, cfg.label_source, cfg.sdsc_tolerance_mm)?;
    let val_set = validation
        .map(|v| examples(v, netcfg, cfg.label_source, cfg.sdsc_tolerance_mm))
        .transpose()?;
    let out = fine_tune(&pretrained.params, lr_groups, &cfg.train, &net, &train_set, val_set.as_deref())?;
    Ok((
        Checkpoint {
            config: netcfg.clone(),
            params: out.params.clone(),
        },
        out,
    ))
}

/// Parse `name=rate,name=rate`.
pub fn parse_lr_groups(text: &str) -> Result<Vec<(String, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (name, rate) = item
                .split_once('=')
                .ok_or_else(|| ServiceError::Usage(format!("expected group=rate, got '{item}'")))?;
            let rate: f64 = rate
                .trim()
                .parse()
                .map_err(|_| ServiceError::Usage(format!("bad learning rate in '{item}'")))?;
            Ok((name.trim().to_string(), rate))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbRow {
    pub slice_id: String,
    pub pass: usize,
    pub f1: f64,
    pub f2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub slice_id: String,
    pub mean: f64,
    pub variance: f64,
    pub p1_hat: f64,
    pub p2_hat: f64,
    #[serde(rename = "P0")]
    pub p0: f64,
    #[serde(rename = "P1")]
    pub p1: f64,
    #[serde(rename = "P2")]
    pub p2: f64,
    pub predicted_class: u8,
}

impl PredictionRow {
    pub fn new(slice_id: String, q: &PredictedQuality) -> Self {
        Self {
            slice_id,
            mean: q.mean,
            variance: q.variance,
            p1_hat: q.p1_hat,
            p2_hat: q.p2_hat,
            p0: q.class_probs[0],
            p1: q.class_probs[1],
            p2: q.class_probs[2],
            predicted_class: q.predicted_class,
        }
    }

    pub fn quality(&self) -> PredictedQuality {
        PredictedQuality {
            mean: self.mean,
            variance: self.variance,
            p1_hat: self.p1_hat,
            p2_hat: self.p2_hat,
            class_probs: [self.p0, self.p1, self.p2],
            predicted_class: self.predicted_class,
        }
    }
}

/// MC-dropout predictions for every slice. Slice `i` (in dataset order) uses
/// the dropout stream derived from `(seed, i)`.
pub fn predict(
    cfg: &AppConfig,
    ckpt: &Checkpoint,
    bundles: &[CaseBundle],
    seed: u64,
) -> Result<(Vec<ProbRow>, Vec<PredictionRow>)> {
    let net = ckpt.network()?;
    let mut probs = Vec::new();
    let mut preds = Vec::new();
    for (i, s) in bundles.iter().flat_map(|b| &b.slices).enumerate() {
        let input = slice_input(s, &ckpt.config, cfg.sdsc_tolerance_mm)?;
        let mc = mc_forward(&net, &ckpt.params, &input, cfg.mc_passes, derive_seed(seed, i as u64))?;
        for (t, p) in mc.pairs().iter().enumerate() {
            probs.push(ProbRow {
                slice_id: s.slice_id.clone(),
                pass: t,
                f1: p[0],
                f2: p[1],
            });
        }
        preds.push(PredictionRow::new(s.slice_id.clone(), &PredictedQuality::from_mc(&mc, cfg.class_rule)));
    }
    Ok((probs, preds))
}

/// Reference classes by slice id from bundles.
pub fn reference_labels(bundles: &[CaseBundle], source: LabelSource) -> BTreeMap<String, u8> {
    bundles
        .iter()
        .flat_map(|b| &b.slices)
        .filter_map(|s| Some((s.slice_id.clone(), slice_label(s, source)?)))
        .collect()
}

/// Join predictions with reference labels. Every prediction needs a label.
pub fn cal_records(preds: &[PredictionRow], labels: &BTreeMap<String, u8>) -> Result<Vec<CalRecord>> {
    preds
        .iter()
        .map(|p| {
            let reference = *labels
                .get(&p.slice_id)
                .ok_or_else(|| ServiceError::Usage(format!("no reference label for slice {}", p.slice_id)))?;
            Ok(CalRecord::new(p.slice_id.clone(), p.variance, p.predicted_class, reference)
                .with_class_probs([p.p0, p.p1, p.p2]))
        })
        .collect()
}

pub fn calibrate(records: &[CalRecord], target: f64) -> Result<(ThresholdResult, CalibrationCurve)> {
    let curve = build_curve(records)?;
    let threshold = find_threshold(&curve, target)?;
    Ok((threshold, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub report: SelectiveReport,
    /// Entropy-group agreement, when rater panels were available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementSummary>,
}

pub fn evaluate(
    records: &[CalRecord],
    threshold: &ThresholdResult,
    panels: Option<(&[RaterPanel], &[f64])>,
) -> Result<EvaluationReport> {
    let curve = build_curve(records)?;
    let report = selective_evaluate(records, threshold.tau).with_context(Some(threshold), Some(&curve));
    let agreement = match panels {
        Some((p, v)) => match uncertainty_agreement(p, v) {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!("uncertainty agreement unavailable: {e}");
                None
            }
        },
        None => None,
    };
    Ok(EvaluationReport { report, agreement })
}

/// Rater panels and predicted variances for the predicted slices that have a panel.
pub fn panels_for(bundles: &[CaseBundle], preds: &[PredictionRow]) -> (Vec<RaterPanel>, Vec<f64>) {
    let by_id: BTreeMap<&str, &RaterPanel> = bundles
        .iter()
        .flat_map(|b| &b.slices)
        .filter_map(|s| Some((s.slice_id.as_str(), s.raters.as_ref()?)))
        .collect();
    preds
        .iter()
        .filter_map(|p| Some(((*by_id.get(p.slice_id.as_str())?).clone(), p.variance)))
        .unzip()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| ServiceError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::format(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ServiceError::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| ServiceError::format(path, e))?;
    }
    w.flush().map_err(|e| ServiceError::io(path, e))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ServiceError::format(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| ServiceError::format(path, e)))
        .collect()
}

/// `slice_id,label` pairs from any CSV carrying those two columns.
pub fn read_label_map(path: &Path) -> Result<BTreeMap<String, u8>> {
    #[derive(Deserialize)]
    struct Row {
        slice_id: String,
        label: u8,
    }
    Ok(read_csv::<Row>(path)?.into_iter().map(|r| (r.slice_id, r.label)).collect())
}
