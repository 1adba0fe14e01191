//! Property tests for the module invariants.

use proptest::prelude::*;

use branchline::annotation::hflip_target;
use branchline::curvefit::{blob_filter, extract_waypoints, fit_polynomial, PathPoint};
use branchline::metrics::{pearson_series, rmse_series};
use branchline::segbaseline::threshold_mask;
use branchline::{MaskImage, PositionTarget};

fn arb_target() -> impl Strategy<Value = PositionTarget> {
    (2usize..5, 4usize..24, 8usize..72).prop_flat_map(|(n, h, w)| {
        (
            proptest::collection::vec(
                proptest::collection::vec(0.0..(w as f64 - 1.0), h),
                n,
            ),
            proptest::collection::vec(any::<bool>(), h),
        )
            .prop_map(move |(coords, valid)| PositionTarget {
                coords,
                valid,
                width: w,
                height: h,
            })
    })
}

fn arb_mask() -> impl Strategy<Value = MaskImage> {
    (4usize..40, 4usize..40).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), w * h).prop_map(move |bits| {
            MaskImage::from_fn(w, h, |x, y| bits[y * w + x])
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hflip_is_an_involution(t in arb_target()) {
        // Structure is exactly involutive; each coordinate goes through the
        // mirror arithmetic twice, which costs at most one f64 rounding.
        let ff = hflip_target(&hflip_target(&t));
        prop_assert_eq!(&ff.valid, &t.valid);
        prop_assert_eq!((ff.width, ff.height), (t.width, t.height));
        for (fc, tc) in ff.coords.iter().zip(&t.coords) {
            for (a, b) in fc.iter().zip(tc) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn hflip_preserves_merged_row_equality(t in arb_target()) {
        // Rows where all channels agree stay merged after flipping.
        let f = hflip_target(&t);
        for r in 0..t.height {
            let merged = t.coords.iter().all(|ch| ch[r] == t.coords[0][r]);
            if merged {
                prop_assert!(f.coords.iter().all(|ch| ch[r] == f.coords[0][r]));
            }
        }
    }

    #[test]
    fn blob_filter_is_idempotent_subset(mask in arb_mask(), min_area in 1usize..40) {
        let once = blob_filter(&mask, min_area);
        prop_assert!(once.subset_of(&mask));
        let twice = blob_filter(&once, min_area);
        prop_assert_eq!(&once, &twice);
    }

    #[test]
    fn waypoint_centers_lie_inside_runs(mask in arb_mask()) {
        for wp in extract_waypoints(&mask) {
            for &c in &wp.centers {
                let x = c.round() as usize;
                prop_assert!(mask.get(x.min(mask.width() - 1), wp.row));
            }
        }
    }

    #[test]
    fn threshold_sweep_is_monotone(
        bits in proptest::collection::vec(0.0f64..1.0, 64),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let probs = ndarray::Array4::from_shape_vec((1, 1, 8, 8), bits).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(threshold_mask(&probs, hi).subset_of(&threshold_mask(&probs, lo)));
    }

    #[test]
    fn rmse_symmetric_and_offset_exact(
        xs in proptest::collection::vec(-100.0f64..100.0, 2..40),
        offset in -20.0f64..20.0,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|v| v + offset).collect();
        let a = rmse_series(&xs, &shifted).unwrap();
        let b = rmse_series(&shifted, &xs).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((a - offset.abs()).abs() < 1e-9);
    }

    #[test]
    fn pearson_affine_invariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 3..30),
        ys in proptest::collection::vec(-50.0f64..50.0, 3..30),
        scale in 0.05f64..20.0,
        shift in -30.0f64..30.0,
    ) {
        let n = xs.len().min(ys.len());
        let (xs, ys) = (&xs[..n], &ys[..n]);
        if let Ok(base) = pearson_series(xs, ys) {
            let transformed: Vec<f64> = ys.iter().map(|v| scale * v + shift).collect();
            let r = pearson_series(xs, &transformed).unwrap();
            prop_assert!((r - base).abs() < 1e-9);
            let negated: Vec<f64> = ys.iter().map(|v| -v).collect();
            let rn = pearson_series(xs, &negated).unwrap();
            prop_assert!((rn + base).abs() < 1e-9);
        }
    }

    #[test]
    fn polynomial_fit_reproduces_low_degree_samples(
        coeffs in proptest::collection::vec(-5.0f64..5.0, 1..6),
        n_points in 8usize..30,
    ) {
        // Any degree-k polynomial sampled on a row grid is reproduced within
        // 1e-8 when fitted at order >= k (normalized domain).
        let degree = coeffs.len() - 1;
        let path: Vec<PathPoint> = (0..n_points)
            .map(|i| {
                let row = i * 2;
                let t = 2.0 * i as f64 / (n_points - 1) as f64 - 1.0;
                let x: f64 = coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c);
                PathPoint { row, x }
            })
            .collect();
        let curve = fit_polynomial(&path, degree.max(1)).unwrap();
        for p in &path {
            prop_assert!(
                (curve.eval(p.row as f64) - p.x).abs() < 1e-8,
                "row {} err {}",
                p.row,
                (curve.eval(p.row as f64) - p.x).abs()
            );
        }
    }

    #[test]
    fn csv_round_trip_preserves_targets(t in arb_target()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        t.save_csv(&path).unwrap();
        let back = PositionTarget::load_csv(&path, t.width).unwrap();
        prop_assert_eq!(back, t);
    }
}
