//! Rasterization: branch strokes, occluder shapes, image rendering, exact
//! centerline targets.

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{Branch, Occluder, OccluderShape, SceneBundle, SynthError, TreeScene};
use crate::annotation::polyline_to_target;
use crate::mask::MaskImage;

/// Rendering options; the depth channel is off by default.
#[derive(Debug, Clone, Copy, Default)]
pub struct RasterOptions {
    pub depth: bool,
}

/// Fraction of reference pixels missing from `visible`.
pub fn occlusion_percentage(whole: &MaskImage, visible: &MaskImage) -> Result<f64, SynthError> {
    let total = whole.count();
    if total == 0 {
        return Err(SynthError::EmptyReference);
    }
    debug_assert!(visible.subset_of(whole), "visible must be a subset of whole");
    Ok(1.0 - visible.count() as f64 / total as f64)
}

/// Union of all branch strokes: every pixel within the linearly interpolated
/// radius of a centerline segment.
pub fn stroke_branches(branches: &[Branch], canvas: (usize, usize)) -> MaskImage {
    let (w, h) = canvas;
    let mut mask = MaskImage::new(w, h);
    for branch in branches {
        for i in 0..branch.points.len().saturating_sub(1) {
            let a = branch.points[i];
            let b = branch.points[i + 1];
            let ra = branch.radius[i];
            let rb = branch.radius[i + 1];
            stamp_segment(&mut mask, (a.x, a.y, ra), (b.x, b.y, rb));
        }
    }
    mask
}

fn stamp_segment(mask: &mut MaskImage, a: (f64, f64, f64), b: (f64, f64, f64)) {
    let rmax = a.2.max(b.2);
    let x0 = (a.0.min(b.0) - rmax - 1.0).floor().max(0.0) as usize;
    let x1 = (a.0.max(b.0) + rmax + 1.0).ceil().min((mask.width() - 1) as f64) as usize;
    let y0 = (a.1.min(b.1) - rmax - 1.0).floor().max(0.0) as usize;
    let y1 = (a.1.max(b.1) + rmax + 1.0).ceil().min((mask.height() - 1) as f64) as usize;
    let vx = b.0 - a.0;
    let vy = b.1 - a.1;
    let len2 = vx * vx + vy * vy;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 - a.0;
            let dy = py as f64 - a.1;
            let t = if len2 > 0.0 {
                ((dx * vx + dy * vy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let cx = a.0 + t * vx;
            let cy = a.1 + t * vy;
            let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
            let r = a.2 + t * (b.2 - a.2);
            if d2 <= r * r {
                mask.set(px, py, true);
            }
        }
    }
}

fn shape_hash(o: &Occluder) -> (f64, f64) {
    let mut z = o.center.x.to_bits() ^ o.center.y.to_bits().rotate_left(21) ^ o.size.to_bits();
    let mut next = || {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        let mut v = z;
        v = (v ^ (v >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        v = (v ^ (v >> 27)).wrapping_mul(0x94d049bb133111eb);
        v ^= v >> 31;
        (v >> 11) as f64 / (1u64 << 53) as f64
    };
    (next(), next())
}

/// True when pixel (px, py) is inside the occluder footprint. The ellipse
/// orientation and leaf lobe layout derive deterministically from the
/// occluder fields.
pub fn occluder_contains(o: &Occluder, px: f64, py: f64) -> bool {
    let dx = px - o.center.x;
    let dy = py - o.center.y;
    match o.shape {
        OccluderShape::Disk => dx * dx + dy * dy <= o.size * o.size,
        OccluderShape::Ellipse => {
            let (u1, u2) = shape_hash(o);
            let theta = std::f64::consts::PI * u1;
            let aspect = 0.45 + 0.4 * u2;
            let (s, c) = theta.sin_cos();
            let rx = c * dx + s * dy;
            let ry = -s * dx + c * dy;
            (rx / o.size).powi(2) + (ry / (o.size * aspect)).powi(2) <= 1.0
        }
        OccluderShape::LeafBlob => {
            if dx * dx + dy * dy <= (0.5 * o.size).powi(2) {
                return true;
            }
            let (u1, _) = shape_hash(o);
            let theta0 = std::f64::consts::TAU * u1;
            for k in 0..3 {
                let th = theta0 + k as f64 * std::f64::consts::TAU / 3.0;
                let lx = o.center.x + 0.5 * o.size * th.cos();
                let ly = o.center.y + 0.5 * o.size * th.sin();
                let r = 0.62 * o.size;
                if (px - lx).powi(2) + (py - ly).powi(2) <= r * r {
                    return true;
                }
            }
            false
        }
    }
}

/// OR the occluder footprint into `mask`, optionally restricted to pixels
/// set in `clip`.
pub fn stamp_occluder(o: &Occluder, mask: &mut MaskImage, clip: Option<&MaskImage>) {
    let reach = o.size * 1.2 + 1.0;
    let x0 = (o.center.x - reach).floor().max(0.0) as usize;
    let x1 = (o.center.x + reach)
        .ceil()
        .min((mask.width() - 1) as f64)
        .max(0.0) as usize;
    let y0 = (o.center.y - reach).floor().max(0.0) as usize;
    let y1 = (o.center.y + reach)
        .ceil()
        .min((mask.height() - 1) as f64)
        .max(0.0) as usize;
    if o.center.x + reach < 0.0 || o.center.y + reach < 0.0 {
        return;
    }
    for py in y0..=y1 {
        for px in x0..=x1 {
            if clip.map_or(true, |c| c.get(px, py)) && occluder_contains(o, px as f64, py as f64) {
                mask.set(px, py, true);
            }
        }
    }
}

/// Pixels the occluder would newly cover inside `whole` that are not yet in
/// `covered`.
pub fn count_new_coverage(o: &Occluder, whole: &MaskImage, covered: &MaskImage) -> usize {
    let reach = o.size * 1.2 + 1.0;
    if o.center.x + reach < 0.0 || o.center.y + reach < 0.0 {
        return 0;
    }
    let x0 = (o.center.x - reach).floor().max(0.0) as usize;
    let x1 = (o.center.x + reach)
        .ceil()
        .min((whole.width() - 1) as f64)
        .max(0.0) as usize;
    let y0 = (o.center.y - reach).floor().max(0.0) as usize;
    let y1 = (o.center.y + reach)
        .ceil()
        .min((whole.height() - 1) as f64)
        .max(0.0) as usize;
    let mut n = 0;
    for py in y0..=y1 {
        for px in x0..=x1 {
            if whole.get(px, py)
                && !covered.get(px, py)
                && occluder_contains(o, px as f64, py as f64)
            {
                n += 1;
            }
        }
    }
    n
}

/// Union footprint of all occluders.
pub fn occluder_region_mask(scene: &TreeScene) -> MaskImage {
    let mut m = MaskImage::new(scene.canvas.0, scene.canvas.1);
    for o in &scene.occluders {
        stamp_occluder(o, &mut m, None);
    }
    m
}

/// Rasterize with default options (no depth channel).
pub fn rasterize(scene: &TreeScene) -> SceneBundle {
    rasterize_with(scene, RasterOptions::default())
}

/// Rasterize a scene into image, masks and the exact sub-pixel target.
pub fn rasterize_with(scene: &TreeScene, opts: RasterOptions) -> SceneBundle {
    let (w, h) = scene.canvas;
    let whole_mask = stroke_branches(&scene.branches, scene.canvas);
    let occ_region = occluder_region_mask(scene);
    let visible_mask = whole_mask
        .and_not(&occ_region)
        .expect("masks share the canvas");
    let occlusion_fraction = match occlusion_percentage(&whole_mask, &visible_mask) {
        Ok(f) => f,
        Err(_) => 0.0,
    };

    // Exact centerline target from geometry, in scan convention.
    let polylines = scene.scan_polylines();
    let scan_canvas = scene.scan_canvas();
    let target = polyline_to_target(&polylines, scan_canvas, scene.kind.n_branches())
        .expect("valid scene geometry is scannable");

    // Deterministic per-scene tints.
    let tint = scene.seed.wrapping_mul(0x9e3779b97f4a7c15);
    let tr = ((tint >> 8) % 17) as i16 - 8;
    let tg = ((tint >> 16) % 17) as i16 - 8;
    let tb = ((tint >> 24) % 17) as i16 - 8;
    let shade = |v: i16, d: i16| (v + d).clamp(0, 255) as u8;

    let mut image = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let t = y as f64 / (h.max(2) - 1) as f64;
        let bg = [
            shade((205.0 + (176.0 - 205.0) * t) as i16, tr),
            shade((212.0 + (192.0 - 212.0) * t) as i16, tg),
            shade((222.0 + (167.0 - 222.0) * t) as i16, tb),
        ];
        for x in 0..w {
            let px = if whole_mask.get(x, y) {
                [shade(72, tr / 2), shade(48, tg / 2), shade(28, tb / 2)]
            } else {
                bg
            };
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    for o in &scene.occluders {
        let reach = o.size * 1.2 + 1.0;
        let x0 = (o.center.x - reach).floor().max(0.0) as usize;
        let x1 = (o.center.x + reach).ceil().min((w - 1) as f64).max(0.0) as usize;
        let y0 = (o.center.y - reach).floor().max(0.0) as usize;
        let y1 = (o.center.y + reach).ceil().min((h - 1) as f64).max(0.0) as usize;
        if o.center.x + reach < 0.0 || o.center.y + reach < 0.0 {
            continue;
        }
        for py in y0..=y1 {
            for px in x0..=x1 {
                if occluder_contains(o, px as f64, py as f64) {
                    image.put_pixel(px as u32, py as u32, Rgb(o.color));
                }
            }
        }
    }

    let depth = opts.depth.then(|| {
        let mut d = GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            // Background rendered as coarse inverse-distance bands.
            let band = 30 + ((y * 6 / h) % 2) as u8 * 12;
            for x in 0..w {
                let v = if occ_region.get(x, y) {
                    245
                } else if whole_mask.get(x, y) {
                    210
                } else {
                    band
                };
                d.put_pixel(x as u32, y as u32, Luma([v]));
            }
        }
        d
    });

    SceneBundle {
        image,
        depth,
        whole_mask,
        visible_mask,
        target,
        occlusion_fraction,
    }
}
