//! Synthetic reference contours, pseudo-CT slices and degraded auto-contours.
//!
//! A reference shape is drawn from a small catalog, a pseudo-CT slice is
//! rendered around it, and an "auto-contour" is produced by perturbing the
//! reference with a random affine transform followed by a smooth elastic
//! displacement. The auto-contour is labelled from its geometric agreement
//! with the reference.
//!
//! Every sample derives its own generator from `(seed, index)`, so a dataset
//! is a pure function of its seed and parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::geometry::{compute_metrics, surrogate_label, GeomMetrics, MaskSlice, SurrogateThresholds};
use crate::rng::{derive_seed, rng_from_seed, sub_rng, QaRng};
use crate::uq::{majority_vote, RaterPanel};
use crate::NUM_CLASSES;

/// Closed interval `[lo, hi]`; a zero-width span always yields `lo`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub const fn symmetric(half_width: f64) -> Self {
        Self {
            lo: -half_width,
            hi: half_width,
        }
    }

    fn sample(&self, rng: &mut QaRng) -> f64 {
        let u: f64 = rng.random();
        if self.hi == self.lo {
            self.lo
        } else {
            self.lo + u * (self.hi - self.lo)
        }
    }

    fn widened(&self, factor: f64, centre: f64) -> Self {
        Self {
            lo: centre + (self.lo - centre) * factor,
            hi: centre + (self.hi - centre) * factor,
        }
    }

    fn is_ordered(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationParams {
    pub rotation_deg: Span,
    /// Multiplicative, around 1.
    pub scale: Span,
    /// (row, col) translation ranges.
    pub translation_mm: [Span; 2],
    /// Control points per side of the elastic lattice.
    pub elastic_grid: usize,
    /// Maximum control-point displacement per axis.
    pub elastic_mag_mm: f64,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self {
            rotation_deg: Span::symmetric(20.0),
            scale: Span::new(0.7, 1.3),
            translation_mm: [Span::symmetric(6.0), Span::symmetric(6.0)],
            elastic_grid: 4,
            elastic_mag_mm: 9.0,
        }
    }
}

impl PerturbationParams {
    /// No perturbation at all.
    pub fn identity() -> Self {
        Self {
            rotation_deg: Span::fixed(0.0),
            scale: Span::fixed(1.0),
            translation_mm: [Span::fixed(0.0), Span::fixed(0.0)],
            elastic_grid: 2,
            elastic_mag_mm: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spans = [self.rotation_deg, self.scale, self.translation_mm[0], self.translation_mm[1]];
        if !spans.iter().all(Span::is_ordered) {
            return Err(QaError::Config(format!("perturbation ranges must satisfy lo <= hi: {self:?}")));
        }
        if self.scale.lo <= 0.0 {
            return Err(QaError::Config("scale range must be positive".into()));
        }
        if self.elastic_grid < 2 {
            return Err(QaError::Config(format!("elastic_grid must be >= 2, got {}", self.elastic_grid)));
        }
        if !(self.elastic_mag_mm >= 0.0 && self.elastic_mag_mm.is_finite()) {
            return Err(QaError::Config(format!("elastic_mag_mm must be >= 0, got {}", self.elastic_mag_mm)));
        }
        Ok(())
    }

    /// Every range stretched by `factor` about its neutral value.
    pub fn widened(&self, factor: f64) -> Self {
        Self {
            rotation_deg: self.rotation_deg.widened(factor, 0.0),
            scale: self.scale.widened(factor, 1.0),
            translation_mm: self.translation_mm.map(|s| s.widened(factor, 0.0)),
            elastic_grid: self.elastic_grid,
            elastic_mag_mm: self.elastic_mag_mm * factor,
        }
    }
}

/// A sampled perturbation, ready to apply.
struct Warp {
    cos: f64,
    sin: f64,
    scale: f64,
    translation_mm: [f64; 2],
    grid: usize,
    /// (row, col) control displacements in mm, row-major over the lattice.
    control: Vec<[f64; 2]>,
}

impl Warp {
    fn sample(params: &PerturbationParams, rng: &mut QaRng) -> Self {
        let theta = params.rotation_deg.sample(rng).to_radians();
        let scale = params.scale.sample(rng);
        let translation_mm = [params.translation_mm[0].sample(rng), params.translation_mm[1].sample(rng)];
        let g = params.elastic_grid;
        let mag = params.elastic_mag_mm;
        let control = (0..g * g)
            .map(|_| {
                let a: f64 = rng.random();
                let b: f64 = rng.random();
                [(2.0 * a - 1.0) * mag, (2.0 * b - 1.0) * mag]
            })
            .collect();
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            scale,
            translation_mm,
            grid: g,
            control,
        }
    }

    /// Bilinear interpolation of the control lattice at pixel (r, c).
    fn displacement(&self, r: f64, c: f64, rows: usize, cols: usize) -> [f64; 2] {
        let g = self.grid;
        let lattice = |x: f64, n: usize| if n > 1 { x / (n - 1) as f64 * (g - 1) as f64 } else { 0.0 };
        let (u, v) = (lattice(r, rows), lattice(c, cols));
        let i0 = (u.floor() as usize).min(g - 2);
        let j0 = (v.floor() as usize).min(g - 2);
        let (fu, fv) = (u - i0 as f64, v - j0 as f64);
        let at = |i: usize, j: usize| self.control[i * g + j];
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            *o = (1.0 - fu) * ((1.0 - fv) * at(i0, j0)[k] + fv * at(i0, j0 + 1)[k])
                + fu * ((1.0 - fv) * at(i0 + 1, j0)[k] + fv * at(i0 + 1, j0 + 1)[k]);
        }
        out
    }
}

/// Rotate, scale (about the mask centroid), translate, then elastically
/// displace `mask`. Implemented by reverse mapping each output pixel with
/// nearest-neighbour sampling, so the result stays binary.
pub fn perturb_mask(mask: &MaskSlice, params: &PerturbationParams, seed: u64) -> Result<MaskSlice> {
    params.validate()?;
    let centre = mask
        .centroid_mm()
        .ok_or_else(|| QaError::DegenerateInput("cannot perturb an empty mask".into()))?;
    let mut rng = rng_from_seed(seed);
    let warp = Warp::sample(params, &mut rng);
    let (rows, cols) = (mask.rows(), mask.cols());
    let [sr, sc] = mask.spacing_mm();

    let out = MaskSlice::from_fn(rows, cols, [sr, sc], |r, c| {
        let d = warp.displacement(r as f64, c as f64, rows, cols);
        // undo elastic, then translation
        let qr = r as f64 * sr - d[0] - warp.translation_mm[0];
        let qc = c as f64 * sc - d[1] - warp.translation_mm[1];
        // undo scale and rotation about the centroid
        let (vr, vc) = ((qr - centre[0]) / warp.scale, (qc - centre[1]) / warp.scale);
        let src_r = centre[0] + warp.cos * vr + warp.sin * vc;
        let src_c = centre[1] - warp.sin * vr + warp.cos * vc;
        let (pr, pc) = ((src_r / sr).round(), (src_c / sc).round());
        pr >= 0.0 && pc >= 0.0 && (pr as usize) < rows && (pc as usize) < cols && mask.get(pr as usize, pc as usize)
    })?;
    Ok(out.with_id(mask.subject_id.clone(), mask.slice_index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Bean,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Bean, ShapeKind::Blob];
}

/// Random catalog shape centred near the middle of the grid.
pub fn random_shape(kind: ShapeKind, rows: usize, cols: usize, spacing_mm: [f64; 2], rng: &mut QaRng) -> Result<MaskSlice> {
    let size = rows.min(cols) as f64 / 64.0;
    let cr = rows as f64 / 2.0 + rng.random_range(-6.0..6.0) * size;
    let cc = cols as f64 / 2.0 + rng.random_range(-6.0..6.0) * size;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let local = move |r: usize, c: usize| {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        (ca * dr + sa * dc, -sa * dr + ca * dc)
    };
    match kind {
        ShapeKind::Ellipse => {
            let a = rng.random_range(8.0..15.0) * size;
            let b = rng.random_range(6.0..11.0) * size;
            MaskSlice::from_fn(rows, cols, spacing_mm, |r, c| {
                let (x, y) = local(r, c);
                (x / a).powi(2) + (y / b).powi(2) <= 1.0
            })
        }
        ShapeKind::Bean => {
            let a = rng.random_range(10.0..15.0) * size;
            let b = rng.random_range(7.0..10.0) * size;
            let bite_r = b * rng.random_range(0.5..0.7);
            let bite_y = b * 1.05;
            MaskSlice::from_fn(rows, cols, spacing_mm, |r, c| {
                let (x, y) = local(r, c);
                let in_body = (x / a).powi(2) + (y / b).powi(2) <= 1.0;
                let in_bite = x * x + (y - bite_y).powi(2) <= bite_r * bite_r;
                in_body && !in_bite
            })
        }
        ShapeKind::Blob => {
            let r0 = rng.random_range(8.0..13.0) * size;
            let harmonics: Vec<(f64, f64, f64)> = (2..=4)
                .map(|k| (k as f64, rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            MaskSlice::from_fn(rows, cols, spacing_mm, |r, c| {
                let (x, y) = local(r, c);
                let theta = y.atan2(x);
                let radius = r0 * (1.0 + harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).cos()).sum::<f64>());
                (x * x + y * y).sqrt() <= radius
            })
        }
    }
}

/// Grey-level slice in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SliceImage {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QaError::Dimension(format!("image buffer {} vs {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Quantise to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(rows, cols, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// Intensity model of the pseudo-CT slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageModel {
    pub background: f64,
    /// Peak amplitude of the smooth background ramp.
    pub background_ramp: f64,
    pub interior_offset: f64,
    pub noise_sigma: f64,
}

impl Default for ImageModel {
    fn default() -> Self {
        Self {
            background: 0.3,
            background_ramp: 0.05,
            interior_offset: 0.4,
            noise_sigma: 0.05,
        }
    }
}

/// Render a pseudo-CT slice: smooth background, brighter organ interior, Gaussian noise.
pub fn render_image(organ: &MaskSlice, model: &ImageModel, rng: &mut QaRng) -> SliceImage {
    let (rows, cols) = (organ.rows(), organ.cols());
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gr, gc) = (phase.cos(), phase.sin());
    let noise = Normal::new(0.0, model.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = (r as f64 / rows as f64 - 0.5, c as f64 / cols as f64 - 0.5);
            let mut x = model.background + model.background_ramp * 2.0 * (gr * u + gc * v);
            if organ.get(r, c) {
                x += model.interior_offset;
            }
            x += noise.sample(rng);
            data.push(x.clamp(0.0, 1.0));
        }
    }
    SliceImage { rows, cols, data }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub image: SliceImage,
    pub ref_mask: MaskSlice,
    pub auto_mask: MaskSlice,
    pub metrics: GeomMetrics,
    pub label: u8,
    pub shape: ShapeKind,
    /// Factor the perturbation ranges were scaled by for this sample.
    pub severity: f64,
    pub seed_used: u64,
}

/// Grid and labelling settings shared by a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_mm: [f64; 2],
    pub sdsc_tolerance_mm: f64,
    pub shapes: Vec<ShapeKind>,
    pub perturbation: PerturbationParams,
    /// Per-sample factor applied to every perturbation range (see
    /// [`PerturbationParams::widened`]), so a dataset mixes mild and severe
    /// degradations.
    pub severity: Span,
    pub thresholds: SurrogateThresholds,
    pub image: ImageModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            spacing_mm: [1.0, 1.0],
            sdsc_tolerance_mm: crate::geometry::DEFAULT_SDSC_TOLERANCE_MM,
            shapes: ShapeKind::ALL.to_vec(),
            perturbation: PerturbationParams::default(),
            severity: Span::new(0.0, 1.0),
            thresholds: SurrogateThresholds::default(),
            image: ImageModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub samples: Vec<SynthSample>,
    pub histogram: [usize; NUM_CLASSES],
    /// Perturbation actually used (differs from the request after widening).
    pub perturbation: PerturbationParams,
}

impl SynthDataset {
    /// Every class holds more than `min_fraction` of the samples.
    pub fn is_balanced(&self, min_fraction: f64) -> bool {
        let n = self.samples.len() as f64;
        self.histogram.iter().all(|&c| c as f64 > min_fraction * n)
    }
}

pub fn class_histogram<'a>(labels: impl IntoIterator<Item = &'a u8>) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for &l in labels {
        h[l as usize] += 1;
    }
    h
}

/// Sample `index` of the dataset with master seed `seed`.
pub fn generate_sample(config: &SynthConfig, seed: u64, index: u64) -> Result<SynthSample> {
    let seed_used = derive_seed(seed, index);
    let mut rng = rng_from_seed(seed_used);
    let shape = config.shapes[rng.random_range(0..config.shapes.len())];
    let reference = random_shape(shape, config.rows, config.cols, config.spacing_mm, &mut rng)?;
    let image = render_image(&reference, &config.image, &mut rng);
    let severity = config.severity.sample(&mut rng);
    let warp_seed: u64 = rng.random();
    let auto_mask = perturb_mask(&reference, &config.perturbation.widened(severity), warp_seed)?;
    let metrics = compute_metrics(&reference, &auto_mask, config.sdsc_tolerance_mm)?;
    let label = surrogate_label(&metrics, &config.thresholds);
    Ok(SynthSample {
        image,
        ref_mask: reference,
        auto_mask,
        metrics,
        label,
        shape,
        severity,
        seed_used,
    })
}

pub fn generate_dataset(n: usize, config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    if n == 0 {
        return Err(QaError::EmptyInput("dataset size must be >= 1".into()));
    }
    if config.shapes.is_empty() {
        return Err(QaError::Config("shape catalog is empty".into()));
    }
    config.perturbation.validate()?;
    config.thresholds.validate()?;
    if !(config.severity.is_ordered() && config.severity.lo >= 0.0) {
        return Err(QaError::Config(format!("severity range must satisfy 0 <= lo <= hi: {:?}", config.severity)));
    }
    let samples = (0..n as u64)
        .map(|i| generate_sample(config, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let histogram = class_histogram(samples.iter().map(|s| &s.label));
    Ok(SynthDataset {
        samples,
        histogram,
        perturbation: config.perturbation,
    })
}

/// Minimum share each class should reach in a generated training set.
pub const MIN_CLASS_FRACTION: f64 = 0.10;

/// Like [`generate_dataset`], but widens the perturbation ranges by 1.25x and
/// regenerates (up to `max_attempts` times) while some class holds no more
/// than 10% of the samples.
pub fn generate_balanced_dataset(n: usize, config: &SynthConfig, seed: u64, max_attempts: usize) -> Result<SynthDataset> {
    let mut cfg = config.clone();
    let mut ds = generate_dataset(n, &cfg, seed)?;
    for attempt in 1..max_attempts {
        if ds.is_balanced(MIN_CLASS_FRACTION) {
            break;
        }
        log::warn!(
            "class histogram {:?} is unbalanced; widening perturbation (attempt {attempt})",
            ds.histogram
        );
        cfg.perturbation = cfg.perturbation.widened(1.25);
        ds = generate_dataset(n, &cfg, seed)?;
    }
    if !ds.is_balanced(MIN_CLASS_FRACTION) {
        log::warn!("class histogram {:?} still unbalanced", ds.histogram);
    }
    Ok(ds)
}

/// Noise model for simulated raters: each rater perceives the metrics with
/// independent errors and then applies the surrogate thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaterNoise {
    /// Additive Gaussian noise on DSC and surface DSC.
    pub overlap_sigma: f64,
    /// Multiplicative log-normal noise on HD95.
    pub log_hd95_sigma: f64,
}

impl Default for RaterNoise {
    fn default() -> Self {
        Self {
            overlap_sigma: 0.04,
            log_hd95_sigma: 0.25,
        }
    }
}

/// A simulated panel of `n_raters` independent noisy raters.
pub fn simulate_panel(
    metrics: &GeomMetrics,
    thresholds: &SurrogateThresholds,
    n_raters: usize,
    noise: &RaterNoise,
    rng: &mut QaRng,
) -> Result<RaterPanel> {
    let overlap = Normal::new(0.0, noise.overlap_sigma.max(0.0)).expect("finite sigma");
    let log_hd = Normal::new(0.0, noise.log_hd95_sigma.max(0.0)).expect("finite sigma");
    let labels = (0..n_raters)
        .map(|_| {
            let seen = GeomMetrics::new(
                (metrics.dsc + overlap.sample(rng)).clamp(0.0, 1.0),
                (metrics.sdsc + overlap.sample(rng)).clamp(0.0, 1.0),
                metrics.hd95_mm * log_hd.sample(rng).exp(),
            );
            surrogate_label(&seen, thresholds)
        })
        .collect();
    RaterPanel::new(labels)
}

/// Simulated three-rater panels and their majority-vote labels for a set of samples.
pub fn simulate_manual_labels(
    samples: &[SynthSample],
    thresholds: &SurrogateThresholds,
    noise: &RaterNoise,
    seed: u64,
) -> Result<Vec<(RaterPanel, u8)>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sub_rng(seed, i as u64);
            let panel = simulate_panel(&s.metrics, thresholds, 3, noise, &mut rng)?;
            let label = majority_vote(&panel);
            Ok((panel, label))
        })
        .collect()
}
