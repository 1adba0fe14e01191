//! Procedural 2D tree scenes with controllable structure and occlusion.
//!
//! Scenes come in three structural kinds: Y-shaped trees (trunk splitting
//! into two primary branches), single trunks, and horizontally growing vines.
//! Occlusion regimes are calibrated so that the rasterized fraction of hidden
//! branch pixels matches the target statistics (none → 0, medium →
//! 0.14 ± 0.15, heavy → 0.36 ± 0.09, clamped to [0, 1]).

mod raster;

pub use raster::{occluder_region_mask, occlusion_percentage, rasterize, rasterize_with, stroke_branches, RasterOptions};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Polyline, Pt};
use crate::mask::MaskImage;
use crate::target::PositionTarget;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("canvas {0}x{1} too small, need at least 32x32")]
    InvalidCanvas(usize, usize),
    #[error("occlusion percentage undefined for an empty reference mask")]
    EmptyReference,
}

/// Structural kind of a scene; determines the scan axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    YShaped,
    TrunkOnly,
    HorizontalVine,
}

impl SceneKind {
    /// Branch channels this kind produces.
    pub fn n_branches(self) -> usize {
        match self {
            SceneKind::YShaped => 2,
            SceneKind::TrunkOnly | SceneKind::HorizontalVine => 1,
        }
    }

    /// True when scan lines are image rows (branches monotone in y).
    pub fn scans_rows(self) -> bool {
        !matches!(self, SceneKind::HorizontalVine)
    }
}

/// Occlusion level, calibrated to seasonal statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionRegime {
    None,
    Medium,
    Heavy,
}

impl OcclusionRegime {
    /// (mean, std) of the occluded-pixel fraction this regime targets.
    pub fn stats(self) -> (f64, f64) {
        match self {
            OcclusionRegime::None => (0.0, 0.0),
            OcclusionRegime::Medium => (0.14, 0.15),
            OcclusionRegime::Heavy => (0.36, 0.09),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OcclusionRegime::None => "none",
            OcclusionRegime::Medium => "medium",
            OcclusionRegime::Heavy => "heavy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccluderShape {
    Disk,
    Ellipse,
    LeafBlob,
}

/// A foreground occluder. Occluders hide pixels in the rendered image and the
/// visible mask; they never alter the ground-truth geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub shape: OccluderShape,
    pub center: Pt,
    /// Characteristic radius in pixels, > 0.
    pub size: f64,
    pub color: [u8; 3],
}

/// A branch centerline with a per-vertex stroke radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub points: Polyline,
    /// Stroke radius at each vertex, pixels, >= 1.
    pub radius: Vec<f64>,
}

/// Ground-truth scene geometry before rasterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeScene {
    pub kind: SceneKind,
    pub branches: Vec<Branch>,
    /// Scan index where Y-branches join (y_shaped only).
    pub merge_row: Option<usize>,
    pub occluders: Vec<Occluder>,
    /// (width, height) in pixels.
    pub canvas: (usize, usize),
    pub seed: u64,
}

/// Structural features used for error-category tagging of hard samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFeatures {
    pub min_radius: f64,
    /// Largest turn angle between consecutive segments, degrees.
    pub max_bend_deg: f64,
}

impl TreeScene {
    /// Branch polylines in scan convention (for vines, x and y swapped so the
    /// scan axis maps to rows).
    pub fn scan_polylines(&self) -> Vec<Polyline> {
        self.branches
            .iter()
            .map(|b| {
                if self.kind.scans_rows() {
                    b.points.clone()
                } else {
                    b.points.iter().map(|p| Pt::new(p.y, p.x)).collect()
                }
            })
            .collect()
    }

    /// Canvas in scan convention: (coordinate extent, scan length).
    pub fn scan_canvas(&self) -> (usize, usize) {
        if self.kind.scans_rows() {
            self.canvas
        } else {
            (self.canvas.1, self.canvas.0)
        }
    }

    pub fn features(&self) -> SceneFeatures {
        let mut min_radius = f64::INFINITY;
        let mut max_bend = 0.0f64;
        for b in &self.branches {
            for &r in &b.radius {
                min_radius = min_radius.min(r);
            }
            for w in b.points.windows(3) {
                let d1 = (w[1].x - w[0].x, w[1].y - w[0].y);
                let d2 = (w[2].x - w[1].x, w[2].y - w[1].y);
                let n1 = (d1.0 * d1.0 + d1.1 * d1.1).sqrt();
                let n2 = (d2.0 * d2.0 + d2.1 * d2.1).sqrt();
                if n1 > 0.0 && n2 > 0.0 {
                    let cosang = ((d1.0 * d2.0 + d1.1 * d2.1) / (n1 * n2)).clamp(-1.0, 1.0);
                    max_bend = max_bend.max(cosang.acos().to_degrees());
                }
            }
        }
        SceneFeatures {
            min_radius,
            max_bend_deg: max_bend,
        }
    }
}

/// Everything rasterization produces for one scene.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub image: image::RgbImage,
    /// Synthetic inverse-distance depth channel, when requested.
    pub depth: Option<image::GrayImage>,
    pub whole_mask: MaskImage,
    pub visible_mask: MaskImage,
    /// Target in scan convention (see [`PositionTarget`]).
    pub target: PositionTarget,
    pub occlusion_fraction: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold structural parameters into the geometry stream. The regime is kept
/// out on purpose: the same (kind, canvas, seed) produces identical branches
/// under every occlusion regime, so regimes are directly comparable.
fn geometry_seed(kind: SceneKind, canvas: (usize, usize), seed: u64) -> u64 {
    let mut s = splitmix64(seed);
    s = splitmix64(s ^ (kind as u64));
    s = splitmix64(s ^ (canvas.0 as u64) ^ ((canvas.1 as u64) << 32));
    s
}

/// Generate a reproducible scene. Occluders are added until the rasterized
/// occluded fraction reaches a per-scene target drawn from the regime's
/// clamped normal distribution.
pub fn generate_scene(
    kind: SceneKind,
    canvas: (usize, usize),
    regime: OcclusionRegime,
    seed: u64,
) -> Result<TreeScene, SynthError> {
    let (w, h) = canvas;
    if w < 32 || h < 32 {
        return Err(SynthError::InvalidCanvas(w, h));
    }
    let geo_seed = geometry_seed(kind, canvas, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(geo_seed);

    let (branches, merge_row) = match kind {
        SceneKind::YShaped => gen_y_shaped(w, h, &mut rng),
        SceneKind::TrunkOnly => gen_trunk(w, h, &mut rng),
        SceneKind::HorizontalVine => gen_vine(w, h, &mut rng),
    };

    let mut scene = TreeScene {
        kind,
        branches,
        merge_row,
        occluders: Vec::new(),
        canvas,
        seed,
    };

    if !matches!(regime, OcclusionRegime::None) {
        let mut occ_rng =
            ChaCha8Rng::seed_from_u64(splitmix64(geo_seed ^ ((regime as u64) << 8 | 0x0cc1)));
        place_occluders(&mut scene, regime, &mut occ_rng);
    }
    Ok(scene)
}

fn gen_y_shaped(w: usize, h: usize, rng: &mut ChaCha8Rng) -> (Vec<Branch>, Option<usize>) {
    let (wf, hf) = (w as f64, h as f64);
    let merge = (hf * rng.gen_range(0.48..0.68)).round() as usize;
    let merge = merge.clamp(8, h - 8);
    let xm = wf * (0.5 + rng.gen_range(-0.06..0.06));
    let xb = (xm + wf * rng.gen_range(-0.05..0.05)).clamp(2.0, wf - 3.0);
    let bow = wf * rng.gen_range(-0.025..0.025);
    let r_trunk = rng.gen_range(1.6..2.4);

    // Trunk knots from the merge row down to the bottom edge.
    let mut trunk: Vec<(Pt, f64)> = Vec::new();
    let bottom = h - 1;
    let span = (bottom - merge) as f64;
    let mut y = merge;
    loop {
        let t = (y - merge) as f64 / span;
        let x = (xm + (xb - xm) * t + bow * (std::f64::consts::PI * t).sin()).clamp(1.0, wf - 2.0);
        trunk.push((Pt::new(x, y as f64), r_trunk * (1.0 + 0.12 * t)));
        if y == bottom {
            break;
        }
        y = (y + 5).min(bottom);
    }

    // Two arms from the top edge down to the merge point.
    let mut arms: Vec<Vec<(Pt, f64)>> = Vec::new();
    for side in [-1.0f64, 1.0] {
        let spread = wf * rng.gen_range(0.15..0.30);
        let p = rng.gen_range(1.15..2.0);
        let amp = wf * rng.gen_range(0.012..0.05);
        let freq = rng.gen_range(1.0..2.3);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let thin = rng.gen_bool(0.12);
        let r_tip: f64 = if thin {
            rng.gen_range(0.7..0.95)
        } else {
            rng.gen_range(0.9..1.3)
        };
        let r_tip = r_tip.max(1.0);
        let mut arm: Vec<(Pt, f64)> = Vec::new();
        let mut y = 0usize;
        loop {
            let t = y as f64 / merge as f64;
            let wiggle = amp * (std::f64::consts::TAU * freq * t + phase).sin() * 4.0 * t * (1.0 - t);
            let x = if y == merge {
                xm
            } else {
                (xm + side * spread * (1.0 - t).powf(p) + wiggle).clamp(1.0, wf - 2.0)
            };
            arm.push((Pt::new(x, y as f64), r_tip + (r_trunk - r_tip) * t));
            if y == merge {
                break;
            }
            y = (y + 5).min(merge);
        }
        arms.push(arm);
    }

    let mut branches = Vec::new();
    for arm in arms {
        let mut pts: Vec<Pt> = arm.iter().map(|(p, _)| *p).collect();
        let mut rad: Vec<f64> = arm.iter().map(|(_, r)| *r).collect();
        for (p, r) in trunk.iter().skip(1) {
            pts.push(*p);
            rad.push(*r);
        }
        branches.push(Branch {
            points: pts,
            radius: rad,
        });
    }
    (branches, Some(merge))
}

fn gen_trunk(w: usize, h: usize, rng: &mut ChaCha8Rng) -> (Vec<Branch>, Option<usize>) {
    let (wf, hf) = (w as f64, h as f64);
    let xc = wf * (0.5 + rng.gen_range(-0.15..0.15));
    let lean = wf * rng.gen_range(-0.08..0.08);
    let bow = wf * rng.gen_range(-0.04..0.04);
    let r_top = rng.gen_range(1.2..1.8);
    let r_bot = rng.gen_range(1.8..2.8);
    let mut pts = Vec::new();
    let mut rad = Vec::new();
    let mut y = 0usize;
    loop {
        let t = y as f64 / (hf - 1.0);
        let x = (xc + lean * (t - 0.5) + bow * (std::f64::consts::PI * t).sin()).clamp(1.0, wf - 2.0);
        pts.push(Pt::new(x, y as f64));
        rad.push(r_top + (r_bot - r_top) * t);
        if y == h - 1 {
            break;
        }
        y = (y + 5).min(h - 1);
    }
    (
        vec![Branch {
            points: pts,
            radius: rad,
        }],
        None,
    )
}

fn gen_vine(w: usize, h: usize, rng: &mut ChaCha8Rng) -> (Vec<Branch>, Option<usize>) {
    let (wf, hf) = (w as f64, h as f64);
    let yc = hf * (0.5 + rng.gen_range(-0.12..0.12));
    let amp = hf * rng.gen_range(0.04..0.10);
    let freq = rng.gen_range(0.8..1.6);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let slope = hf * rng.gen_range(-0.06..0.06);
    let r0 = rng.gen_range(1.4..2.2);
    let r1 = rng.gen_range(1.4..2.2);
    let mut pts = Vec::new();
    let mut rad = Vec::new();
    let mut x = 0usize;
    loop {
        let t = x as f64 / (wf - 1.0);
        let y = (yc + slope * (t - 0.5) + amp * (std::f64::consts::TAU * freq * t + phase).sin())
            .clamp(1.0, hf - 2.0);
        pts.push(Pt::new(x as f64, y));
        rad.push(r0 + (r1 - r0) * t);
        if x == w - 1 {
            break;
        }
        x = (x + 5).min(w - 1);
    }
    (
        vec![Branch {
            points: pts,
            radius: rad,
        }],
        None,
    )
}

/// Add occluders near the branches until the covered fraction of branch
/// pixels reaches the sampled per-scene target.
fn place_occluders(scene: &mut TreeScene, regime: OcclusionRegime, rng: &mut ChaCha8Rng) {
    let (w, h) = scene.canvas;
    let (mean, std) = regime.stats();
    let normal = Normal::new(mean, std).expect("valid regime stats");
    let target: f64 = normal.sample(rng).clamp(0.0, 1.0);
    if target <= 0.0 {
        return;
    }

    let whole = stroke_branches(&scene.branches, scene.canvas);
    let total = whole.count();
    if total == 0 {
        return;
    }

    let scan_lines = scene.scan_polylines();
    let scan_len = scene.scan_canvas().1;
    let min_dim = w.min(h) as f64;

    let mut covered = MaskImage::new(w, h);
    let mut covered_count = 0usize;
    let mut tries = 0;
    let mut last_hit: Option<(usize, f64, f64)> = None; // (branch, scan, size)
    while (covered_count as f64) / (total as f64) < target && tries < 400 {
        tries += 1;
        // Cluster follow-up occluders near a previous hit so heavy regimes
        // hide long contiguous branch stretches instead of scattered specks.
        let (branch_idx, scan) = match last_hit {
            Some((bi, prev_scan, prev_size)) if rng.gen_bool(0.55) => {
                let step = Normal::new(0.0, prev_size * 1.1).expect("positive std");
                let s = (prev_scan + step.sample(rng))
                    .clamp(0.04 * (scan_len - 1) as f64, 0.96 * (scan_len - 1) as f64);
                (bi, s)
            }
            _ => (
                rng.gen_range(0..scan_lines.len()),
                rng.gen_range(0.04..0.96) * (scan_len - 1) as f64,
            ),
        };
        let Some(coord) = crate::annotation::polyline_x_at(&scan_lines[branch_idx], scan) else {
            continue;
        };
        // Scan convention back to image coordinates.
        let (cx, cy) = if scene.kind.scans_rows() {
            (coord, scan)
        } else {
            (scan, coord)
        };
        // Size the occluder toward the remaining deficit so the final
        // fraction lands close to the sampled target.
        let deficit = target - covered_count as f64 / total as f64;
        let estimate = deficit * total as f64 / 8.0;
        let size = estimate.clamp(2.0, 0.18 * min_dim) * rng.gen_range(0.85..1.25);
        let jitter = Normal::new(0.0, size * 0.45).expect("positive std");
        let center = Pt::new(cx + jitter.sample(rng), cy + jitter.sample(rng));
        let shape = match rng.gen_range(0.0..1.0) {
            u if u < 0.45 => OccluderShape::Disk,
            u if u < 0.75 => OccluderShape::Ellipse,
            _ => OccluderShape::LeafBlob,
        };
        let color_pick: f64 = rng.gen_range(0.0..1.0);
        let color = if color_pick < 0.20 {
            // Fruit.
            [
                180 + rng.gen_range(0..40) as u8,
                40 + rng.gen_range(0..30) as u8,
                35 + rng.gen_range(0..20) as u8,
            ]
        } else if color_pick < 0.35 {
            // Bark-toned clutter, deliberately close to the branch color.
            [
                50 + rng.gen_range(0..40) as u8,
                35 + rng.gen_range(0..25) as u8,
                20 + rng.gen_range(0..20) as u8,
            ]
        } else {
            // Foliage.
            [
                40 + rng.gen_range(0..50) as u8,
                110 + rng.gen_range(0..70) as u8,
                40 + rng.gen_range(0..50) as u8,
            ]
        };
        let occ = Occluder {
            shape,
            center,
            size,
            color,
        };
        let marginal = raster::count_new_coverage(&occ, &whole, &covered);
        let new_frac = (covered_count + marginal) as f64 / total as f64;
        if marginal > 0 && new_frac > target + 0.02 && tries < 320 {
            // Would overshoot the sampled target; resample.
            continue;
        }
        raster::stamp_occluder(&occ, &mut covered, Some(&whole));
        covered_count += marginal;
        if marginal > 0 {
            last_hit = Some((branch_idx, scan, size));
        }
        scene.occluders.push(occ);
    }
}

/// Scene pixels hidden per regime target; convenience wrapper used by tests
/// and dataset generation.
pub fn generate_bundle(
    kind: SceneKind,
    canvas: (usize, usize),
    regime: OcclusionRegime,
    seed: u64,
    opts: RasterOptions,
) -> Result<(TreeScene, SceneBundle), SynthError> {
    let scene = generate_scene(kind, canvas, regime, seed)?;
    let bundle = rasterize_with(&scene, opts);
    Ok((scene, bundle))
}
