use cqa_core::geometry::{
    compute_metrics, dice, hd95, surface_dice, surrogate_label, Aggregation, GeomMetrics, MaskSlice,
    SurrogateThresholds,
};
use proptest::prelude::*;

#[path = "support/geometry_oracle.rs"]
mod oracle;

fn grid(m: &MaskSlice) -> oracle::Grid<'_> {
    oracle::Grid {
        rows: m.rows(),
        cols: m.cols(),
        px: m.pixels(),
        spacing: m.spacing_mm(),
    }
}

/// Random blobby mask: union of a few axis-aligned rectangles and discs, with
/// a chance of noise pixels and of being empty.
fn mask_pair() -> impl Strategy<Value = (MaskSlice, MaskSlice)> {
    (1usize..=32, 1usize..=32, prop::sample::select(vec![0.5, 0.8, 1.0, 1.25, 2.0]), prop::sample::select(vec![0.5, 1.0, 1.5]))
        .prop_flat_map(|(rows, cols, sr, sc)| {
            let n = rows * cols;
            (
                prop::collection::vec(prop::bool::weighted(0.45), n),
                prop::collection::vec(prop::bool::weighted(0.45), n),
                any::<bool>(),
                Just((rows, cols, [sr, sc])),
            )
        })
        .prop_map(|(a, b, smooth, (rows, cols, sp))| {
            let mut ma = MaskSlice::new(rows, cols, a, sp).unwrap();
            let mut mb = MaskSlice::new(rows, cols, b, sp).unwrap();
            if smooth {
                // majority filter gives contiguous regions rather than salt noise
                ma = majority(&ma);
                mb = majority(&mb);
            }
            (ma, mb)
        })
}

fn majority(m: &MaskSlice) -> MaskSlice {
    MaskSlice::from_fn(m.rows(), m.cols(), m.spacing_mm(), |r, c| {
        let mut n = 0;
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < m.rows() && (cc as usize) < m.cols() && m.get(rr as usize, cc as usize) {
                    n += 1;
                }
            }
        }
        n >= 4
    })
    .unwrap()
}

fn shifted(m: &MaskSlice, dr: usize, dc: usize) -> MaskSlice {
    MaskSlice::from_fn(m.rows() + dr, m.cols() + dc, m.spacing_mm(), |r, c| r >= dr && c >= dc && m.get(r - dr, c - dc))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn metrics_equal_all_pairs_oracle((a, b) in mask_pair(), tol in prop::sample::select(vec![0.0, 1.0, 2.0, 3.5])) {
        let (ga, gb) = (grid(&a), grid(&b));
        prop_assert_eq!(dice(&a, &b).unwrap(), oracle::dice(&ga, &gb));
        prop_assert_eq!(surface_dice(&a, &b, tol).unwrap(), oracle::sdsc(&ga, &gb, tol));
        prop_assert_eq!(hd95(&a, &b).unwrap(), oracle::hd95(&ga, &gb));
        let m = compute_metrics(&a, &b, tol).unwrap();
        prop_assert_eq!(m.dsc, oracle::dice(&ga, &gb));
        prop_assert_eq!(m.sdsc, oracle::sdsc(&ga, &gb, tol));
        prop_assert_eq!(m.hd95_mm, oracle::hd95(&ga, &gb));
        prop_assert_eq!(m.degenerate, a.is_empty() && b.is_empty());
    }

    #[test]
    fn metrics_are_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = compute_metrics(&a, &b, 2.0).unwrap();
        let ba = compute_metrics(&b, &a, 2.0).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab.dsc));
        prop_assert!((0.0..=1.0).contains(&ab.sdsc));
        prop_assert!(ab.hd95_mm >= 0.0);
        prop_assert_eq!(ab.hd95_mm.is_infinite(), a.is_empty() != b.is_empty());
    }

    #[test]
    fn metrics_are_translation_invariant((a, b) in mask_pair(), dr in 0usize..5, dc in 0usize..5) {
        let m0 = compute_metrics(&a, &b, 2.0).unwrap();
        let m1 = compute_metrics(&shifted(&a, dr, dc), &shifted(&b, dr, dc), 2.0).unwrap();
        prop_assert_eq!(m0, m1);
    }

    #[test]
    fn self_comparison_is_perfect((a, _) in mask_pair()) {
        prop_assume!(!a.is_empty());
        let m = compute_metrics(&a, &a, 0.0).unwrap();
        prop_assert_eq!((m.dsc, m.sdsc, m.hd95_mm), (1.0, 1.0, 0.0));
    }

    #[test]
    fn max_rule_is_monotone(
        dsc in 0.0f64..=1.0, sdsc in 0.0f64..=1.0, hd in 0.0f64..20.0,
        which in 0usize..3, gain in 0.0f64..1.0,
    ) {
        let thr = SurrogateThresholds::default();
        let base = GeomMetrics::new(dsc, sdsc, hd);
        let mut better = base;
        match which {
            0 => better.dsc = (dsc + gain).min(1.0),
            1 => better.sdsc = (sdsc + gain).min(1.0),
            _ => better.hd95_mm = (hd - 20.0 * gain).max(0.0),
        }
        prop_assert!(surrogate_label(&better, &thr) >= surrogate_label(&base, &thr));
        let min_thr = SurrogateThresholds { aggregation: Aggregation::MinRule, ..thr };
        prop_assert!(surrogate_label(&base, &min_thr) <= surrogate_label(&base, &thr));
    }
}

/// Every combination of per-metric classes, built from representative values
/// in each band, combines by max (or min).
#[test]
fn surrogate_sweep_all_27_combinations() {
    let thr = SurrogateThresholds::default();
    let overlap = [0.5, 0.8, 0.95];
    let hd = [8.0, 4.0, 1.0];
    let mut seen = 0;
    for (rd, &d) in overlap.iter().enumerate() {
        for (rs, &s) in overlap.iter().enumerate() {
            for (rh, &h) in hd.iter().enumerate() {
                let m = GeomMetrics::new(d, s, h);
                assert_eq!(thr.metric_classes(&m), [rd as u8, rs as u8, rh as u8]);
                assert_eq!(surrogate_label(&m, &thr) as usize, rd.max(rs).max(rh));
                let min_thr = SurrogateThresholds { aggregation: Aggregation::MinRule, ..thr };
                assert_eq!(surrogate_label(&m, &min_thr) as usize, rd.min(rs).min(rh));
                seen += 1;
            }
        }
    }
    assert_eq!(seen, 27);
}

#[test]
fn band_edges() {
    let thr = SurrogateThresholds::default();
    assert_eq!(thr.metric_classes(&GeomMetrics::new(0.9, 0.7, 2.5)), [2, 1, 2]);
    assert_eq!(thr.metric_classes(&GeomMetrics::new(0.7, 0.6999, 6.0)), [1, 0, 1]);
    assert_eq!(thr.metric_classes(&GeomMetrics::new(0.0, 0.0, 6.0001)), [0, 0, 0]);
    assert_eq!(thr.metric_classes(&GeomMetrics::new(0.0, 0.0, f64::INFINITY)), [0, 0, 0]);
}
