//! Network inputs and training labels built from case slices.

use cqa_core::boc_net::{Backbone, Example, NetworkConfig};
use cqa_core::geometry::{boundary_pixels, compute_metrics, SurrogateThresholds};
use cqa_core::uq::majority_vote;
use cqa_core::QaError;

use crate::bundle::{CaseBundle, CaseSlice};
use crate::config::LabelSource;
use crate::error::{Result, ServiceError};

/// Length of the geometric feature vector.
pub const MLP_FEATURES: usize = 6;

/// HD95 values above this (including +inf) are clipped before scaling.
const HD95_CAP_MM: f64 = 50.0;

/// `[dsc, sdsc, hd95 / 10, area ratio, perimeter ratio, centroid offset / 10]`
/// of the auto contour against the reference. Distances are in cm so that
/// every feature is of order one.
pub fn geometric_features(slice: &CaseSlice, sdsc_tolerance_mm: f64) -> Result<Vec<f64>> {
    let reference = slice.ref_mask.as_ref().ok_or_else(|| {
        ServiceError::Usage(format!("slice {}: geometric features need a reference mask", slice.slice_id))
    })?;
    let auto = &slice.auto_mask;
    let m = compute_metrics(reference, auto, sdsc_tolerance_mm)?;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let offset = match (reference.centroid_mm(), auto.centroid_mm()) {
        (Some(a), Some(b)) => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
        _ => HD95_CAP_MM,
    };
    Ok(vec![
        m.dsc,
        m.sdsc,
        m.hd95_mm.min(HD95_CAP_MM) / 10.0,
        ratio(auto.area_px(), reference.area_px()),
        ratio(boundary_pixels(auto).len(), boundary_pixels(reference).len()),
        offset.min(HD95_CAP_MM) / 10.0,
    ])
}

/// Network input for one slice: image and auto-mask channels for the CNN,
/// geometric features for the MLP.
pub fn slice_input(slice: &CaseSlice, net: &NetworkConfig, sdsc_tolerance_mm: f64) -> Result<Vec<f64>> {
    match net.backbone {
        Backbone::SmallCnn => {
            let (rows, cols) = (slice.image.rows, slice.image.cols);
            if net.input_channels != 2 || rows != net.input_size || cols != net.input_size {
                return Err(QaError::Dimension(format!(
                    "slice {}: {rows}x{cols} slice does not fit a {}-channel {}x{} network input",
                    slice.slice_id, net.input_channels, net.input_size, net.input_size
                ))
                .into());
            }
            let mut input = slice.image.data.clone();
            input.extend(slice.auto_mask.pixels().iter().map(|&b| if b { 1.0 } else { 0.0 }));
            Ok(input)
        }
        Backbone::MlpFeatures => {
            if net.n_features != MLP_FEATURES {
                return Err(QaError::Config(format!(
                    "mlp_features expects {MLP_FEATURES} geometric features, config has {}",
                    net.n_features
                ))
                .into());
            }
            geometric_features(slice, sdsc_tolerance_mm)
        }
    }
}

/// Reference class of a slice under `source`, if available.
pub fn slice_label(slice: &CaseSlice, source: LabelSource) -> Option<u8> {
    match source {
        LabelSource::Surrogate => slice.label.as_ref().map(|l| l.label),
        LabelSource::Manual => slice.raters.as_ref().map(majority_vote),
    }
}

/// Surrogate class recomputed from the masks, for bundles without `labels.csv`.
pub fn recompute_label(slice: &CaseSlice, thresholds: &SurrogateThresholds, tol: f64) -> Option<u8> {
    let reference = slice.ref_mask.as_ref()?;
    let m = compute_metrics(reference, &slice.auto_mask, tol).ok()?;
    Some(cqa_core::geometry::surrogate_label(&m, thresholds))
}

/// Labelled training examples over every slice of `bundles`, in bundle order.
pub fn examples(
    bundles: &[CaseBundle],
    net: &NetworkConfig,
    source: LabelSource,
    sdsc_tolerance_mm: f64,
) -> Result<Vec<Example>> {
    bundles
        .iter()
        .flat_map(|b| &b.slices)
        .map(|s| {
            let label = slice_label(s, source).ok_or_else(|| {
                ServiceError::Usage(format!("slice {} has no {source:?} label", s.slice_id).to_lowercase())
            })?;
            Ok(Example {
                input: slice_input(s, net, sdsc_tolerance_mm)?,
                label,
            })
        })
        .collect()
}
