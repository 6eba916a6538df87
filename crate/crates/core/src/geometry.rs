//! Binary slice masks, contour similarity metrics and surrogate quality labels.
//!
//! Distances are measured between pixel centres, scaled by the row/column
//! pitch in millimetres. Surfaces are the 4-connected boundary pixels of the
//! inside region. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};

/// Default surface-DSC tolerance in millimetres.
pub const DEFAULT_SDSC_TOLERANCE_MM: f64 = 2.0;

/// A single 2D contour rasterised to a boolean grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSlice {
    rows: usize,
    cols: usize,
    pixels: Vec<bool>,
    /// (row pitch, column pitch) in mm.
    spacing_mm: [f64; 2],
    pub subject_id: String,
    pub slice_index: usize,
}

impl MaskSlice {
    pub fn new(rows: usize, cols: usize, pixels: Vec<bool>, spacing_mm: [f64; 2]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(QaError::Dimension(format!("mask must be at least 1x1, got {rows}x{cols}")));
        }
        if pixels.len() != rows * cols {
            return Err(QaError::Dimension(format!(
                "pixel buffer has {} entries, expected {rows}x{cols}",
                pixels.len()
            )));
        }
        if !(spacing_mm[0] > 0.0 && spacing_mm[1] > 0.0) || !spacing_mm.iter().all(|s| s.is_finite()) {
            return Err(QaError::Domain(format!("spacing must be positive and finite, got {spacing_mm:?}")));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            spacing_mm,
            subject_id: String::new(),
            slice_index: 0,
        })
    }

    /// All-outside mask.
    pub fn empty(rows: usize, cols: usize, spacing_mm: [f64; 2]) -> Result<Self> {
        Self::new(rows, cols, vec![false; rows * cols], spacing_mm)
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        spacing_mm: [f64; 2],
        mut inside: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                pixels.push(inside(r, c));
            }
        }
        Self::new(rows, cols, pixels, spacing_mm)
    }

    pub fn with_id(mut self, subject_id: impl Into<String>, slice_index: usize) -> Self {
        self.subject_id = subject_id.into();
        self.slice_index = slice_index;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spacing_mm(&self) -> [f64; 2] {
        self.spacing_mm
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.pixels[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.pixels[r * self.cols + c] = value;
    }

    /// Inside pixel at signed coordinates; anything beyond the grid is outside.
    #[inline]
    fn inside_at(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols && self.get(r as usize, c as usize)
    }

    pub fn area_px(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    /// Centroid of the inside region in mm, `None` for an empty mask.
    pub fn centroid_mm(&self) -> Option<[f64; 2]> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [sr / n as f64 * self.spacing_mm[0], sc / n as f64 * self.spacing_mm[1]])
    }

    /// Fails unless `other` has the same grid shape and spacing.
    pub fn check_compatible(&self, other: &MaskSlice) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(QaError::Dimension(format!(
                "grid {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        if self.spacing_mm != other.spacing_mm {
            return Err(QaError::Dimension(format!(
                "spacing {:?} vs {:?}",
                self.spacing_mm, other.spacing_mm
            )));
        }
        Ok(())
    }
}

/// Inside pixels with at least one 4-neighbour outside the region (or off the grid),
/// as (row, col) indices in raster order.
pub fn boundary_pixels(mask: &MaskSlice) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let edge = !mask.inside_at(ri - 1, ci)
                || !mask.inside_at(ri + 1, ci)
                || !mask.inside_at(ri, ci - 1)
                || !mask.inside_at(ri, ci + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Boundary pixel centres in physical (row, col) millimetres.
pub fn boundary_points(mask: &MaskSlice) -> Vec<[f64; 2]> {
    let [sr, sc] = mask.spacing_mm;
    boundary_pixels(mask)
        .into_iter()
        .map(|(r, c)| [r as f64 * sr, c as f64 * sc])
        .collect()
}

/// Squared physical distance between two pixel centres.
#[inline]
pub fn squared_distance_mm(a: (usize, usize), b: (usize, usize), spacing_mm: [f64; 2]) -> f64 {
    let dr = (a.0 as f64 - b.0 as f64) * spacing_mm[0];
    let dc = (a.1 as f64 - b.1 as f64) * spacing_mm[1];
    dr * dr + dc * dc
}

/// Row-bucketed boundary set answering exact nearest-point queries.
///
/// Rows are visited outward from the query row and the scan stops once the
/// row offset alone exceeds the best squared distance found so far.
struct SurfaceIndex {
    /// Sorted column indices of boundary pixels, per row.
    by_row: Vec<Vec<usize>>,
    spacing_mm: [f64; 2],
}

impl SurfaceIndex {
    fn new(points: &[(usize, usize)], rows: usize, spacing_mm: [f64; 2]) -> Self {
        let mut by_row = vec![Vec::new(); rows];
        for &(r, c) in points {
            by_row[r].push(c);
        }
        for row in &mut by_row {
            row.sort_unstable();
        }
        Self { by_row, spacing_mm }
    }

    fn nearest_in_row(&self, query: (usize, usize), row: usize, best: &mut f64) {
        let cols = &self.by_row[row];
        if cols.is_empty() {
            return;
        }
        let pos = cols.partition_point(|&c| c < query.1);
        for idx in [pos.wrapping_sub(1), pos] {
            if let Some(&c) = cols.get(idx) {
                let d2 = squared_distance_mm(query, (row, c), self.spacing_mm);
                if d2 < *best {
                    *best = d2;
                }
            }
        }
    }

    /// Distance in mm from `query` to the nearest indexed point (+inf if none).
    fn nearest_distance(&self, query: (usize, usize)) -> f64 {
        let mut best = f64::INFINITY;
        let rows = self.by_row.len();
        for k in 0..rows {
            let row_gap = k as f64 * self.spacing_mm[0];
            if row_gap * row_gap > best {
                break;
            }
            if query.0 + k < rows {
                self.nearest_in_row(query, query.0 + k, &mut best);
            }
            if k > 0 && query.0 >= k {
                self.nearest_in_row(query, query.0 - k, &mut best);
            }
        }
        best.sqrt()
    }
}

/// Directed nearest-boundary distances from every point of `from` to `to`.
fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], rows: usize, spacing_mm: [f64; 2]) -> Vec<f64> {
    let index = SurfaceIndex::new(to, rows, spacing_mm);
    from.iter().map(|&p| index.nearest_distance(p)).collect()
}

/// Intersection and region sizes for the Dice coefficient.
fn overlap_counts(a: &MaskSlice, b: &MaskSlice) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&pa, &pb) in a.pixels.iter().zip(&b.pixels) {
        na += pa as usize;
        nb += pb as usize;
        inter += (pa && pb) as usize;
    }
    (inter, na, nb)
}

/// Dice similarity coefficient `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(reference: &MaskSlice, test: &MaskSlice) -> Result<f64> {
    reference.check_compatible(test)?;
    let (inter, na, nb) = overlap_counts(reference, test);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Fraction of pooled boundary points lying within `tolerance_mm` of the other
/// boundary. Two empty masks score 1, exactly one empty scores 0.
pub fn surface_dice(reference: &MaskSlice, test: &MaskSlice, tolerance_mm: f64) -> Result<f64> {
    reference.check_compatible(test)?;
    if tolerance_mm.is_nan() || tolerance_mm < 0.0 {
        return Err(QaError::Domain(format!("tolerance must be >= 0, got {tolerance_mm}")));
    }
    let sa = boundary_pixels(reference);
    let sb = boundary_pixels(test);
    Ok(surface_dice_from_surfaces(&sa, &sb, reference.rows, reference.spacing_mm, tolerance_mm))
}

fn surface_dice_from_surfaces(
    sa: &[(usize, usize)],
    sb: &[(usize, usize)],
    rows: usize,
    spacing_mm: [f64; 2],
    tolerance_mm: f64,
) -> f64 {
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let within = |ds: Vec<f64>| ds.into_iter().filter(|&d| d <= tolerance_mm).count();
    let hits = within(directed_distances(sa, sb, rows, spacing_mm)) + within(directed_distances(sb, sa, rows, spacing_mm));
    hits as f64 / (sa.len() + sb.len()) as f64
}

/// 1-based nearest rank of the 95th percentile in a list of `n` values.
pub fn nearest_rank_95(n: usize) -> usize {
    (95 * n).div_ceil(100).max(1)
}

/// 95th-percentile Hausdorff distance (mm) over the pooled directed boundary
/// distances, nearest-rank percentile. Both empty gives 0, one empty +inf.
pub fn hd95(reference: &MaskSlice, test: &MaskSlice) -> Result<f64> {
    reference.check_compatible(test)?;
    let sa = boundary_pixels(reference);
    let sb = boundary_pixels(test);
    Ok(hd95_from_surfaces(&sa, &sb, reference.rows, reference.spacing_mm))
}

fn hd95_from_surfaces(sa: &[(usize, usize)], sb: &[(usize, usize)], rows: usize, spacing_mm: [f64; 2]) -> f64 {
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let mut pooled = directed_distances(sa, sb, rows, spacing_mm);
    pooled.extend(directed_distances(sb, sa, rows, spacing_mm));
    pooled.sort_by(f64::total_cmp);
    pooled[nearest_rank_95(pooled.len()) - 1]
}

/// The DSC / surface DSC / HD95 triple for one contour pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomMetrics {
    pub dsc: f64,
    pub sdsc: f64,
    /// +inf when exactly one mask is empty.
    pub hd95_mm: f64,
    /// Both masks were empty; the scores are conventions, not measurements.
    #[serde(default)]
    pub degenerate: bool,
}

impl GeomMetrics {
    pub fn new(dsc: f64, sdsc: f64, hd95_mm: f64) -> Self {
        Self {
            dsc,
            sdsc,
            hd95_mm,
            degenerate: false,
        }
    }
}

/// All three metrics, sharing one boundary extraction per mask.
pub fn compute_metrics(reference: &MaskSlice, test: &MaskSlice, sdsc_tolerance_mm: f64) -> Result<GeomMetrics> {
    reference.check_compatible(test)?;
    if sdsc_tolerance_mm.is_nan() || sdsc_tolerance_mm < 0.0 {
        return Err(QaError::Domain(format!("tolerance must be >= 0, got {sdsc_tolerance_mm}")));
    }
    let sa = boundary_pixels(reference);
    let sb = boundary_pixels(test);
    let (rows, spacing) = (reference.rows, reference.spacing_mm);
    Ok(GeomMetrics {
        dsc: dice(reference, test)?,
        sdsc: surface_dice_from_surfaces(&sa, &sb, rows, spacing, sdsc_tolerance_mm),
        hd95_mm: hd95_from_surfaces(&sa, &sb, rows, spacing),
        degenerate: sa.is_empty() && sb.is_empty(),
    })
}

/// How per-metric classes are combined into the final surrogate class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Most favourable per-metric class wins.
    #[default]
    MaxRule,
    /// Least favourable per-metric class wins.
    MinRule,
}

/// Per-metric class boundaries for surrogate labelling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateThresholds {
    pub dsc_hi: f64,
    pub dsc_lo: f64,
    pub sdsc_hi: f64,
    pub sdsc_lo: f64,
    pub hd95_good_mm: f64,
    pub hd95_major_mm: f64,
    pub aggregation: Aggregation,
}

impl Default for SurrogateThresholds {
    fn default() -> Self {
        Self {
            dsc_hi: 0.9,
            dsc_lo: 0.7,
            sdsc_hi: 0.9,
            sdsc_lo: 0.7,
            hd95_good_mm: 2.5,
            hd95_major_mm: 6.0,
            aggregation: Aggregation::MaxRule,
        }
    }
}

impl SurrogateThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dsc_lo < self.dsc_hi
            && self.dsc_hi <= 1.0
            && self.sdsc_lo < self.sdsc_hi
            && self.sdsc_hi <= 1.0
            && 0.0 < self.hd95_good_mm
            && self.hd95_good_mm < self.hd95_major_mm;
        if ok {
            Ok(())
        } else {
            Err(QaError::Config(format!("inconsistent surrogate thresholds: {self:?}")))
        }
    }

    fn overlap_class(value: f64, lo: f64, hi: f64) -> u8 {
        if value >= hi {
            2
        } else if value >= lo {
            1
        } else {
            0
        }
    }

    /// Per-metric classes `(r_dsc, r_sdsc, r_hd95)`.
    pub fn metric_classes(&self, m: &GeomMetrics) -> [u8; 3] {
        let r_hd = if m.hd95_mm <= self.hd95_good_mm {
            2
        } else if m.hd95_mm <= self.hd95_major_mm {
            1
        } else {
            0
        };
        [
            Self::overlap_class(m.dsc, self.dsc_lo, self.dsc_hi),
            Self::overlap_class(m.sdsc, self.sdsc_lo, self.sdsc_hi),
            r_hd,
        ]
    }
}

/// Surrogate quality class in {0, 1, 2} from the metric triple.
pub fn surrogate_label(metrics: &GeomMetrics, thr: &SurrogateThresholds) -> u8 {
    let classes = thr.metric_classes(metrics);
    match thr.aggregation {
        Aggregation::MaxRule => classes.into_iter().max().unwrap_or(0),
        Aggregation::MinRule => classes.into_iter().min().unwrap_or(0),
    }
}

/// Clockwise 8-neighbourhood starting west.
const MOORE: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

fn moore_index(dr: isize, dc: isize) -> usize {
    MOORE.iter().position(|&d| d == (dr, dc)).expect("unit offset")
}

/// Outer boundary of every 8-connected component as a closed pixel polyline
/// of `[row, col]` points (first point not repeated at the end).
///
/// Components are ordered by their top-left pixel in raster order.
pub fn contour_polylines(mask: &MaskSlice) -> Vec<Vec<[usize; 2]>> {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut label = vec![false; rows * cols];
    let mut out = Vec::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            if !mask.get(r0, c0) || label[r0 * cols + c0] {
                continue;
            }
            // mark the component so it is traced once
            let mut stack = vec![(r0, c0)];
            label[r0 * cols + c0] = true;
            while let Some((r, c)) = stack.pop() {
                for (dr, dc) in MOORE {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if mask.inside_at(nr, nc) {
                        let idx = nr as usize * cols + nc as usize;
                        if !label[idx] {
                            label[idx] = true;
                            stack.push((nr as usize, nc as usize));
                        }
                    }
                }
            }
            out.push(trace_outer(mask, (r0, c0)));
        }
    }
    out
}

/// Moore-neighbour tracing from the top-left pixel of a component.
fn trace_outer(mask: &MaskSlice, start: (usize, usize)) -> Vec<[usize; 2]> {
    let mut contour = vec![[start.0, start.1]];
    let mut cur = (start.0 as isize, start.1 as isize);
    // the west neighbour of the top-left pixel is outside
    let mut backtrack = 0usize;
    let limit = 4 * mask.rows * mask.cols + 8;
    let mut second: Option<(isize, isize)> = None;
    for _ in 0..limit {
        let mut next = None;
        for i in 1..=8 {
            let d = (backtrack + i) % 8;
            let cand = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
            if mask.inside_at(cand.0, cand.1) {
                next = Some((cand, d));
                break;
            }
        }
        let Some((nxt, d)) = next else {
            break; // isolated pixel
        };
        let probe = (cur.0 + MOORE[(d + 7) % 8].0, cur.1 + MOORE[(d + 7) % 8].1);
        if cur == (start.0 as isize, start.1 as isize) {
            match second {
                None => second = Some(nxt),
                Some(s) if s == nxt => break,
                Some(_) => {}
            }
        }
        backtrack = moore_index(probe.0 - nxt.0, probe.1 - nxt.1);
        cur = nxt;
        contour.push([cur.0 as usize, cur.1 as usize]);
    }
    // the walk ends back on the start pixel
    if contour.len() > 1 && contour.last() == contour.first() {
        contour.pop();
    }
    contour
}
