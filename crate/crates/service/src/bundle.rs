//! On-disk case bundles.
//!
//! ```text
//! <subject>/meta.json          {"subject_id", "spacing_mm": [row, col], "slice_count"}
//! <subject>/images/slice_<n>.png
//! <subject>/auto/slice_<n>.png
//! <subject>/ref/slice_<n>.png   optional
//! <subject>/labels.csv          optional: slice_id,label,dsc,sdsc,hd95_mm
//! <subject>/raters.csv          optional: slice_id,rater_1,rater_2,rater_3
//! ```
//!
//! Mask PNGs are 8-bit grayscale with nonzero meaning inside. A dataset
//! directory is either one bundle or a directory of bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cqa_core::geometry::{GeomMetrics, MaskSlice};
use cqa_core::synthgen::{SliceImage, SynthSample};
use cqa_core::uq::RaterPanel;
use cqa_core::QaError;
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::pipeline::write_csv;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub subject_id: String,
    pub spacing_mm: [f64; 2],
    pub slice_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub slice_id: String,
    pub label: u8,
    pub dsc: f64,
    pub sdsc: f64,
    pub hd95_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseSlice {
    pub index: usize,
    pub slice_id: String,
    pub image: SliceImage,
    pub auto_mask: MaskSlice,
    pub ref_mask: Option<MaskSlice>,
    pub label: Option<LabelRow>,
    pub raters: Option<RaterPanel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseBundle {
    pub subject_id: String,
    pub spacing_mm: [f64; 2],
    pub slices: Vec<CaseSlice>,
}

pub fn slice_id(subject_id: &str, index: usize) -> String {
    format!("{subject_id}/{index}")
}

fn slice_file(dir: &Path, kind: &str, n: usize) -> PathBuf {
    dir.join(kind).join(format!("slice_{n}.png"))
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| ServiceError::format(path, e))?;
    Ok(img.to_luma8())
}

fn write_gray(path: &Path, rows: usize, cols: usize, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(cols as u32, rows as u32, bytes).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ServiceError::format(path, e))
}

pub fn encode_png(rows: usize, cols: usize, bytes: Vec<u8>) -> Vec<u8> {
    let img = GrayImage::from_raw(cols as u32, rows as u32, bytes).expect("buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

fn read_mask(path: &Path, spacing: [f64; 2]) -> Result<MaskSlice> {
    let img = read_gray(path)?;
    let (rows, cols) = (img.height() as usize, img.width() as usize);
    let pixels = img.into_raw().into_iter().map(|v| v != 0).collect();
    Ok(MaskSlice::new(rows, cols, pixels, spacing)?)
}

fn mask_bytes(mask: &MaskSlice) -> Vec<u8> {
    mask.pixels().iter().map(|&b| if b { 255 } else { 0 }).collect()
}

/// Slice numbers present as `slice_<n>.png` in `dir`.
fn slice_numbers(dir: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))? {
        let name = entry.map_err(|e| ServiceError::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("slice_").and_then(|s| s.strip_suffix(".png")) {
            let n = n
                .parse()
                .map_err(|_| ServiceError::format(dir.join(name.as_ref()), "slice number is not an integer"))?;
            out.push(n);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn check_contiguous(dir: &Path, count: usize, required: bool) -> Result<()> {
    if !dir.is_dir() {
        return if required {
            Err(ServiceError::format(dir, "missing slice directory"))
        } else {
            Ok(())
        };
    }
    let found = slice_numbers(dir)?;
    if found != (0..count).collect::<Vec<_>>() {
        let missing: Vec<usize> = (0..count).filter(|n| found.binary_search(n).is_err()).collect();
        let extra: Vec<usize> = found.iter().copied().filter(|&n| n >= count).collect();
        return Err(ServiceError::format(
            dir,
            format!("slice files must be slice_0..slice_{} (missing {missing:?}, unexpected {extra:?})", count.saturating_sub(1)),
        ));
    }
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ServiceError::format(path, e))?;
    rdr.deserialize()
        .map(|row| row.map_err(|e| ServiceError::format(path, e)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RaterRow {
    slice_id: String,
    rater_1: u8,
    rater_2: u8,
    rater_3: u8,
}

/// Load and validate one subject directory.
pub fn load_case_bundle(dir: &Path) -> Result<CaseBundle> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| ServiceError::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&meta_text).map_err(|e| ServiceError::format(&meta_path, e))?;
    if !(meta.spacing_mm[0] > 0.0 && meta.spacing_mm[1] > 0.0) {
        return Err(ServiceError::format(&meta_path, "spacing must be positive"));
    }
    check_contiguous(&dir.join("images"), meta.slice_count, true)?;
    check_contiguous(&dir.join("auto"), meta.slice_count, true)?;
    check_contiguous(&dir.join("ref"), meta.slice_count, false)?;
    let has_ref = dir.join("ref").is_dir();

    let mut labels: BTreeMap<String, LabelRow> = BTreeMap::new();
    let labels_path = dir.join("labels.csv");
    if labels_path.exists() {
        for row in read_labels_csv(&labels_path)? {
            labels.insert(row.slice_id.clone(), row);
        }
    }
    let mut raters: BTreeMap<String, RaterPanel> = BTreeMap::new();
    let raters_path = dir.join("raters.csv");
    if raters_path.exists() {
        let mut rdr = csv::Reader::from_path(&raters_path).map_err(|e| ServiceError::format(&raters_path, e))?;
        for row in rdr.deserialize::<RaterRow>() {
            let row = row.map_err(|e| ServiceError::format(&raters_path, e))?;
            let panel = RaterPanel::new(vec![row.rater_1, row.rater_2, row.rater_3])
                .map_err(|e| ServiceError::format(&raters_path, format!("{}: {e}", row.slice_id)))?;
            raters.insert(row.slice_id, panel);
        }
    }

    let mut slices = Vec::with_capacity(meta.slice_count);
    for n in 0..meta.slice_count {
        let id = slice_id(&meta.subject_id, n);
        let img = read_gray(&slice_file(dir, "images", n))?;
        let (rows, cols) = (img.height() as usize, img.width() as usize);
        let image = SliceImage::from_u8(rows, cols, img.as_raw())?;
        let auto_mask = read_mask(&slice_file(dir, "auto", n), meta.spacing_mm)?.with_id(&meta.subject_id, n);
        let dims_err = |what: &str, m: &MaskSlice| {
            ServiceError::Qa(QaError::Dimension(format!(
                "slice {id}: {what} mask is {}x{} but the image is {rows}x{cols}",
                m.rows(),
                m.cols()
            )))
        };
        if (auto_mask.rows(), auto_mask.cols()) != (rows, cols) {
            return Err(dims_err("auto", &auto_mask));
        }
        let ref_mask = if has_ref {
            let m = read_mask(&slice_file(dir, "ref", n), meta.spacing_mm)?.with_id(&meta.subject_id, n);
            if (m.rows(), m.cols()) != (rows, cols) {
                return Err(dims_err("reference", &m));
            }
            Some(m)
        } else {
            None
        };
        slices.push(CaseSlice {
            index: n,
            label: labels.remove(&id),
            raters: raters.remove(&id),
            slice_id: id,
            image,
            auto_mask,
            ref_mask,
        });
    }
    if let Some(stray) = labels.keys().next() {
        return Err(ServiceError::format(&labels_path, format!("label for unknown slice {stray}")));
    }
    Ok(CaseBundle {
        subject_id: meta.subject_id,
        spacing_mm: meta.spacing_mm,
        slices,
    })
}

/// A single bundle, or every bundle directly below `root` (sorted by directory name).
pub fn load_dataset(root: &Path) -> Result<Vec<CaseBundle>> {
    if root.join("meta.json").exists() {
        return Ok(vec![load_case_bundle(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| ServiceError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(ServiceError::format(root, "no case bundles (meta.json) found"));
    }
    dirs.iter().map(|d| load_case_bundle(d)).collect()
}

pub fn write_case_bundle(dir: &Path, bundle: &CaseBundle) -> Result<()> {
    for sub in ["images", "auto"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| ServiceError::io(dir.join(sub), e))?;
    }
    let has_ref = bundle.slices.iter().all(|s| s.ref_mask.is_some()) && !bundle.slices.is_empty();
    if has_ref {
        fs::create_dir_all(dir.join("ref")).map_err(|e| ServiceError::io(dir.join("ref"), e))?;
    }
    let meta = BundleMeta {
        subject_id: bundle.subject_id.clone(),
        spacing_mm: bundle.spacing_mm,
        slice_count: bundle.slices.len(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("serializable");
    fs::write(&meta_path, text + "\n").map_err(|e| ServiceError::io(&meta_path, e))?;

    for s in &bundle.slices {
        let (rows, cols) = (s.image.rows, s.image.cols);
        write_gray(&slice_file(dir, "images", s.index), rows, cols, s.image.to_u8())?;
        write_gray(&slice_file(dir, "auto", s.index), rows, cols, mask_bytes(&s.auto_mask))?;
        if let (true, Some(m)) = (has_ref, &s.ref_mask) {
            write_gray(&slice_file(dir, "ref", s.index), rows, cols, mask_bytes(m))?;
        }
    }
    let labels: Vec<&LabelRow> = bundle.slices.iter().filter_map(|s| s.label.as_ref()).collect();
    if !labels.is_empty() {
        write_csv(&dir.join("labels.csv"), &labels)?;
    }
    let raters: Vec<RaterRow> = bundle
        .slices
        .iter()
        .filter_map(|s| {
            let l = s.raters.as_ref()?.labels();
            (l.len() == 3).then(|| RaterRow {
                slice_id: s.slice_id.clone(),
                rater_1: l[0],
                rater_2: l[1],
                rater_3: l[2],
            })
        })
        .collect();
    if !raters.is_empty() {
        write_csv(&dir.join("raters.csv"), &raters)?;
    }
    Ok(())
}

impl LabelRow {
    pub fn new(slice_id: String, label: u8, m: &GeomMetrics) -> Self {
        Self {
            slice_id,
            label,
            dsc: m.dsc,
            sdsc: m.sdsc,
            hd95_mm: m.hd95_mm,
        }
    }
}

/// Group synthetic samples into bundles of `slices_per_subject` slices.
pub fn bundles_from_samples(
    samples: &[SynthSample],
    panels: Option<&[RaterPanel]>,
    spacing_mm: [f64; 2],
    slices_per_subject: usize,
    prefix: &str,
) -> Vec<CaseBundle> {
    let per = slices_per_subject.max(1);
    samples
        .chunks(per)
        .enumerate()
        .map(|(k, chunk)| {
            let subject_id = format!("{prefix}{k:04}");
            let slices = chunk
                .iter()
                .enumerate()
                .map(|(n, s)| {
                    let id = slice_id(&subject_id, n);
                    CaseSlice {
                        index: n,
                        label: Some(LabelRow::new(id.clone(), s.label, &s.metrics)),
                        raters: panels.map(|p| p[k * per + n].clone()),
                        slice_id: id,
                        // quantised exactly as a PNG round trip would
                        image: SliceImage::from_u8(s.image.rows, s.image.cols, &s.image.to_u8())
                            .expect("dimensions preserved"),
                        auto_mask: s.auto_mask.clone().with_id(&subject_id, n),
                        ref_mask: Some(s.ref_mask.clone().with_id(&subject_id, n)),
                    }
                })
                .collect();
            CaseBundle {
                subject_id,
                spacing_mm,
                slices,
            }
        })
        .collect()
}
