//! Label model: polylines → per-row coordinate grids, augmentations with
//! exact label transforms, and cross-validation splits.

use std::collections::BTreeMap;

use image::RgbImage;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::target::PositionTarget;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("non-scannable geometry: {0}")]
    NonScannableGeometry(String),
    #[error("more polylines ({0}) than branch channels ({1})")]
    BranchCountExceeded(usize, usize),
    #[error("invalid crop: {0}")]
    InvalidCrop(String),
    #[error("{0} samples are too few for {1} groups")]
    TooFewSamples(usize, usize),
    #[error("group count must be >= 2, got {0}")]
    InvalidGroupCount(usize),
}

/// A 2D point in pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pt {
    pub x: f64,
    pub y: f64,
}

impl Pt {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// An ordered polyline; scannable when strictly monotone in y.
pub type Polyline = Vec<Pt>;

/// Exact x-coordinate of the polyline at scan line `y`, or None outside its
/// vertical span. The polyline must be strictly increasing in y.
pub fn polyline_x_at(line: &[Pt], y: f64) -> Option<f64> {
    let first = line.first()?;
    let last = line.last()?;
    if y < first.y || y > last.y {
        return None;
    }
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if y >= a.y && y <= b.y {
            let t = (y - a.y) / (b.y - a.y);
            return Some(a.x + t * (b.x - a.x));
        }
    }
    None
}

/// Convert monotone centerline polylines into a per-row coordinate grid.
///
/// Each scan line crossed by a branch receives the exact (sub-pixel)
/// intersection of that branch with the line. Rows not crossed by every
/// channel are marked invalid. When fewer polylines than `n_branches` are
/// given, the last polyline is replicated into the remaining channels (the
/// shared-trunk convention: a single location is assigned to all joined
/// channels).
pub fn polyline_to_target(
    polylines: &[Polyline],
    canvas: (usize, usize),
    n_branches: usize,
) -> Result<PositionTarget, AnnotationError> {
    let (width, height) = canvas;
    if polylines.is_empty() {
        return Err(AnnotationError::NonScannableGeometry(
            "no polylines".into(),
        ));
    }
    if polylines.len() > n_branches {
        return Err(AnnotationError::BranchCountExceeded(
            polylines.len(),
            n_branches,
        ));
    }
    for (i, line) in polylines.iter().enumerate() {
        if line.len() < 2 {
            return Err(AnnotationError::NonScannableGeometry(format!(
                "polyline {i} has fewer than 2 points"
            )));
        }
        if line.windows(2).any(|s| s[1].y <= s[0].y) {
            return Err(AnnotationError::NonScannableGeometry(format!(
                "polyline {i} is not strictly increasing in the scan axis"
            )));
        }
    }

    let mut target = PositionTarget::new(n_branches, width, height);
    let hi = (width - 1) as f64;
    for r in 0..height {
        let mut all_covered = true;
        for b in 0..n_branches {
            let line = &polylines[b.min(polylines.len() - 1)];
            match polyline_x_at(line, r as f64) {
                Some(x) => target.coords[b][r] = x.clamp(0.0, hi),
                None => {
                    all_covered = false;
                    break;
                }
            }
        }
        target.valid[r] = all_covered;
    }
    Ok(target)
}

/// Mirror a coordinate grid about the vertical midline: coordinates map to
/// `(width-1) - x` and branch channels are reversed so channel 0 stays the
/// leftmost branch.
pub fn hflip_target(t: &PositionTarget) -> PositionTarget {
    let hi = (t.width - 1) as f64;
    let coords = t
        .coords
        .iter()
        .rev()
        .map(|ch| ch.iter().map(|&x| hi - x).collect())
        .collect();
    PositionTarget {
        coords,
        valid: t.valid.clone(),
        width: t.width,
        height: t.height,
    }
}

/// Mirror an RGB image about its vertical midline.
pub fn hflip_rgb(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Mirror a CHW tensor about its vertical midline (last axis).
pub fn hflip_tensor(x: &Array3<f64>) -> Array3<f64> {
    let mut y = x.clone();
    y.invert_axis(ndarray::Axis(2));
    y.as_standard_layout().to_owned()
}

/// Horizontal flip of an (image, target) pair. The pair must agree on width.
pub fn hflip(img: &RgbImage, t: &PositionTarget) -> (RgbImage, PositionTarget) {
    assert_eq!(
        img.width() as usize,
        t.width,
        "image and target widths must match"
    );
    (hflip_rgb(img), hflip_target(t))
}

/// Vertical anchor of a square crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropAnchor {
    Top,
    Center,
    Bottom,
}

/// Square crop of side `ratio × H` at the given anchor, rescaled back to a
/// `W × W` output. Image pixels are resampled bilinearly; coordinates go
/// through the exact affine window transform, and rows whose source lies
/// outside the window (or whose coordinate leaves it) are invalidated.
pub fn crop_augment(
    img: &RgbImage,
    t: &PositionTarget,
    anchor: CropAnchor,
    ratio: f64,
) -> Result<(RgbImage, PositionTarget), AnnotationError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(AnnotationError::InvalidCrop(format!(
            "ratio {ratio} outside (0, 1]"
        )));
    }
    if h < w {
        return Err(AnnotationError::InvalidCrop(
            "image must be square or taller than wide".into(),
        ));
    }
    if t.width != w || t.height != h {
        return Err(AnnotationError::InvalidCrop(
            "target dimensions do not match image".into(),
        ));
    }
    let side = (ratio * h as f64).round() as usize;
    if side == 0 || side > w {
        return Err(AnnotationError::InvalidCrop(format!(
            "window side {side} does not fit {w}x{h} canvas"
        )));
    }
    let row_off = match anchor {
        CropAnchor::Top => 0,
        CropAnchor::Center => (h - side) / 2,
        CropAnchor::Bottom => h - side,
    };
    let col_off = (w - side) / 2;

    let out_side = w;
    let scale = out_side as f64 / side as f64;

    let cropped =
        image::imageops::crop_imm(img, col_off as u32, row_off as u32, side as u32, side as u32)
            .to_image();
    let out_img = if side == out_side {
        cropped
    } else {
        image::imageops::resize(
            &cropped,
            out_side as u32,
            out_side as u32,
            image::imageops::FilterType::Triangle,
        )
    };

    // Coordinates: sample the source label at each output row's preimage and
    // apply the window affine map with pixel-center convention.
    let mut out_t = PositionTarget::new(t.n_branches(), out_side, out_side);
    let hi = (out_side - 1) as f64;
    for r_out in 0..out_side {
        let y_src = row_off as f64 + (r_out as f64 + 0.5) / scale - 0.5;
        if let Some(xs) = sample_target_at(t, y_src) {
            let mut ok = true;
            for (b, x) in xs.iter().enumerate() {
                let x_out = (x - col_off as f64 + 0.5) * scale - 0.5;
                if x_out < 0.0 || x_out > hi {
                    ok = false;
                    break;
                }
                out_t.coords[b][r_out] = x_out;
            }
            out_t.valid[r_out] = ok;
        }
    }
    keep_longest_valid_run(&mut out_t);
    Ok((out_img, out_t))
}

/// Linear interpolation of every channel of `t` at fractional row `y`.
fn sample_target_at(t: &PositionTarget, y: f64) -> Option<Vec<f64>> {
    if y < 0.0 || y > (t.height - 1) as f64 {
        return None;
    }
    let r0 = y.floor() as usize;
    let r1 = y.ceil() as usize;
    if !t.valid[r0] || !t.valid[r1] {
        return None;
    }
    let frac = y - r0 as f64;
    Some(
        t.coords
            .iter()
            .map(|ch| ch[r0] + frac * (ch[r1] - ch[r0]))
            .collect(),
    )
}

/// Restrict the validity mask to its longest contiguous run.
fn keep_longest_valid_run(t: &mut PositionTarget) {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for r in 0..=t.height {
        let v = r < t.height && t.valid[r];
        match (v, start) {
            (true, None) => start = Some(r),
            (false, Some(s)) => {
                if best.map_or(true, |(bs, be)| r - s > be - bs) {
                    best = Some((s, r));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some((s, e)) = best {
        for r in 0..t.height {
            t.valid[r] = r >= s && r < e;
        }
    }
}

/// Mapping from sample id to cross-validation group index in `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub k: usize,
    pub groups: BTreeMap<String, usize>,
}

impl SplitAssignment {
    pub fn group_of(&self, id: &str) -> Option<usize> {
        self.groups.get(id).copied()
    }

    pub fn members(&self, g: usize) -> Vec<String> {
        self.groups
            .iter()
            .filter(|(_, &gi)| gi == g)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0usize; self.k];
        for &g in self.groups.values() {
            s[g - 1] += 1;
        }
        s
    }
}

/// Seeded shuffle followed by round-robin assignment into `k` near-even
/// groups. Deterministic per seed.
pub fn split_cv_groups(
    sample_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<SplitAssignment, AnnotationError> {
    if k < 2 {
        return Err(AnnotationError::InvalidGroupCount(k));
    }
    if sample_ids.len() < k {
        return Err(AnnotationError::TooFewSamples(sample_ids.len(), k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<String> = sample_ids.to_vec();
    shuffled.shuffle(&mut rng);
    let groups = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k + 1))
        .collect();
    Ok(SplitAssignment { k, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vertical_line(x: f64, h: usize) -> Polyline {
        vec![Pt::new(x, 0.0), Pt::new(x, (h - 1) as f64)]
    }

    #[test]
    fn single_vertical_polyline() {
        let t = polyline_to_target(&[vertical_line(10.0, 32)], (32, 32), 1).unwrap();
        assert_eq!(t.n_valid(), 32);
        for r in 0..32 {
            assert_eq!(t.coords[0][r], 10.0);
        }
    }

    #[test]
    fn merged_branches_share_coords() {
        // Two branches diverging above row 20 of 32, identical from 20 down.
        let trunk: Vec<Pt> = (20..32).map(|r| Pt::new(16.0, r as f64)).collect();
        let mut left = vec![Pt::new(6.0, 0.0), Pt::new(15.5, 19.0)];
        left.extend(trunk.iter().copied());
        let mut right = vec![Pt::new(26.0, 0.0), Pt::new(16.5, 19.0)];
        right.extend(trunk.iter().copied());
        let t = polyline_to_target(&[left, right], (32, 32), 2).unwrap();
        assert_eq!(t.n_valid(), 32);
        for r in 20..32 {
            assert_eq!(t.coords[0][r], t.coords[1][r], "row {r}");
        }
        assert!(t.coords[0][0] < t.coords[1][0]);
    }

    #[test]
    fn diagonal_matches_line_equation() {
        // Analytic oracle: the line through (0,0) and (31,31) has x = y.
        let line = vec![Pt::new(0.0, 0.0), Pt::new(31.0, 31.0)];
        let t = polyline_to_target(&[line], (32, 32), 1).unwrap();
        for r in 0..32 {
            assert!((t.coords[0][r] - r as f64).abs() < 1e-12, "row {r}");
        }
    }

    #[test]
    fn non_monotone_rejected() {
        let line = vec![Pt::new(0.0, 0.0), Pt::new(5.0, 10.0), Pt::new(8.0, 10.0)];
        match polyline_to_target(&[line], (32, 32), 1) {
            Err(AnnotationError::NonScannableGeometry(_)) => {}
            other => panic!("expected NonScannableGeometry, got {other:?}"),
        }
    }

    #[test]
    fn hflip_arithmetic_and_involution() {
        let mut t = PositionTarget::new(2, 64, 4);
        t.valid = vec![true; 4];
        for r in 0..4 {
            t.coords[0][r] = 10.0;
            t.coords[1][r] = 40.0;
        }
        let f = hflip_target(&t);
        // 63 - 10 = 53 lands in the rightmost channel after reorder.
        assert_eq!(f.coords[1][0], 53.0);
        assert_eq!(f.coords[0][0], 23.0);
        let ff = hflip_target(&f);
        assert_eq!(ff, t);
    }

    #[test]
    fn hflip_symmetric_tree_fixed_point() {
        // Branches mirror-symmetric about the midline of a width-64 canvas.
        let mut t = PositionTarget::new(2, 64, 3);
        t.valid = vec![true; 3];
        t.coords[0] = vec![20.0, 25.0, 31.5];
        t.coords[1] = vec![43.0, 38.0, 31.5];
        let f = hflip_target(&t);
        assert_eq!(f, t);
    }

    #[test]
    fn hflip_pair_involution_on_image() {
        let img = RgbImage::from_fn(8, 4, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let mut t = PositionTarget::new(1, 8, 4);
        t.valid = vec![true; 4];
        let (fi, ft) = hflip(&img, &t);
        let (ffi, fft) = hflip(&fi, &ft);
        assert_eq!(ffi, img);
        assert_eq!(fft, t);
    }

    #[test]
    fn crop_window_offsets() {
        // H=100, ratio 0.8 → side 80, row offsets 0 / 10 / 20.
        let img = RgbImage::new(100, 100);
        let mut t = PositionTarget::new(1, 100, 100);
        t.valid = vec![true; 100];
        for r in 0..100 {
            t.coords[0][r] = 50.0;
        }
        for (anchor, expect_off) in [
            (CropAnchor::Top, 0.0),
            (CropAnchor::Center, 10.0),
            (CropAnchor::Bottom, 20.0),
        ] {
            let (_, ct) = crop_augment(&img, &t, anchor, 0.8).unwrap();
            // The first output row samples source row off + (0.5/scale) - 0.5.
            let scale = 100.0 / 80.0;
            let y0 = expect_off + 0.5 / scale - 0.5;
            assert!(y0 >= expect_off - 0.5 && y0 < expect_off + 1.0);
            assert_eq!(ct.height, 100);
            assert!(ct.n_valid() > 90);
        }
    }

    #[test]
    fn crop_identity_at_ratio_one() {
        let img = RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x * y) as u8, 0, 0]));
        let mut t = PositionTarget::new(1, 16, 16);
        t.valid = vec![true; 16];
        for r in 0..16 {
            t.coords[0][r] = 3.0 + r as f64 * 0.5;
        }
        let (ci, ct) = crop_augment(&img, &t, CropAnchor::Center, 1.0).unwrap();
        assert_eq!(ci, img);
        for r in 0..16 {
            assert!((ct.coords[0][r] - t.coords[0][r]).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_coordinate_offset() {
        // Window starting at column 10 with scale 1: coord 40 → 30.
        let img = RgbImage::new(100, 100);
        let mut t = PositionTarget::new(1, 100, 100);
        t.valid = vec![true; 100];
        for r in 0..100 {
            t.coords[0][r] = 40.0;
        }
        let (_, ct) = crop_augment(&img, &t, CropAnchor::Top, 0.8).unwrap();
        // side 80, col_off 10, scale 100/80.
        let expect = (40.0 - 10.0 + 0.5) * 1.25 - 0.5;
        let r_mid = 40;
        assert!((ct.coords[0][r_mid] - expect).abs() < 1e-9);
    }

    #[test]
    fn split_even_groups() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let s = split_cv_groups(&ids, 5, 7).unwrap();
        assert_eq!(s.sizes(), vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn split_2178_sizes() {
        let ids: Vec<String> = (0..2178).map(|i| format!("s{i}")).collect();
        let s = split_cv_groups(&ids, 5, 3).unwrap();
        let mut sizes = s.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![435, 435, 436, 436, 436]);
    }

    #[test]
    fn split_deterministic_and_partition() {
        let ids: Vec<String> = (0..57).map(|i| format!("s{i}")).collect();
        let a = split_cv_groups(&ids, 5, 99).unwrap();
        let b = split_cv_groups(&ids, 5, 99).unwrap();
        assert_eq!(a, b);
        // Partition: every id in exactly one group.
        assert_eq!(a.groups.len(), 57);
        assert_eq!(a.sizes().iter().sum::<usize>(), 57);
    }

    #[test]
    fn split_too_few() {
        let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        assert!(matches!(
            split_cv_groups(&ids, 5, 0),
            Err(AnnotationError::TooFewSamples(3, 5))
        ));
        assert!(matches!(
            split_cv_groups(&ids, 1, 0),
            Err(AnnotationError::InvalidGroupCount(1))
        ));
    }

    #[test]
    fn crop_rejects_bad_windows() {
        // Wider than tall.
        let wide = RgbImage::new(100, 50);
        let mut t = PositionTarget::new(1, 100, 50);
        t.valid = vec![true; 50];
        assert!(matches!(
            crop_augment(&wide, &t, CropAnchor::Top, 0.8),
            Err(AnnotationError::InvalidCrop(_))
        ));
        // Window side exceeds the width: 0.9 * 100 = 90 > 70.
        let narrow = RgbImage::new(70, 100);
        let mut t = PositionTarget::new(1, 70, 100);
        t.valid = vec![true; 100];
        assert!(matches!(
            crop_augment(&narrow, &t, CropAnchor::Center, 0.9),
            Err(AnnotationError::InvalidCrop(_))
        ));
        // Ratio outside (0, 1].
        let square = RgbImage::new(64, 64);
        let mut t = PositionTarget::new(1, 64, 64);
        t.valid = vec![true; 64];
        assert!(crop_augment(&square, &t, CropAnchor::Top, 0.0).is_err());
        assert!(crop_augment(&square, &t, CropAnchor::Top, 1.2).is_err());
    }

    #[test]
    fn crop_preserves_target_invariants() {
        // A sloped branch cropped at every anchor still validates.
        let img = RgbImage::new(64, 64);
        let mut t = PositionTarget::new(2, 64, 64);
        t.valid = vec![true; 64];
        for r in 0..64 {
            t.coords[0][r] = 8.0 + r as f64 * 0.4;
            t.coords[1][r] = 50.0 - r as f64 * 0.3;
        }
        for anchor in [CropAnchor::Top, CropAnchor::Center, CropAnchor::Bottom] {
            let (_, ct) = crop_augment(&img, &t, anchor, 0.8).unwrap();
            ct.validate().unwrap();
            assert!(ct.n_valid() > 32);
        }
    }
}
