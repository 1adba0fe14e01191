//! On-disk dataset layout and loaders.
//!
//! ```text
//! <root>/manifest.json
//! <root>/samples/<id>/image.png      RGB scene
//!                     depth.png      optional synthetic depth channel
//!                     whole.png      1-bit whole-branch mask
//!                     visible.png    1-bit visible-branch mask
//!                     target.csv     row_index, branch_*_x..., valid_flag
//!                     meta.json      seed, regime, occlusion, features
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::SplitAssignment;
use crate::mask::MaskImage;
use crate::regressor::RegSample;
use crate::segbaseline::{SegSample, SegVariant};
use crate::synthdata::{OcclusionRegime, SceneBundle, SceneFeatures, SceneKind, TreeScene};
use crate::target::PositionTarget;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad dataset content at {path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Per-sample metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub seed: u64,
    pub kind: SceneKind,
    pub regime: OcclusionRegime,
    pub canvas: (usize, usize),
    pub occlusion_fraction: f64,
    pub features: SceneFeatures,
    pub has_depth: bool,
}

/// One manifest entry: sample id, its cross-validation group and headline
/// stats used by evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub group: usize,
    pub regime: OcclusionRegime,
    pub occlusion_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: SceneKind,
    pub canvas: (usize, usize),
    pub k: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids_in_group(&self, group: usize) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn ids_outside_group(&self, group: usize) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| s.group != group)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Condition label per sample (the regime name), for report grouping.
    pub fn condition_map(&self) -> BTreeMap<String, String> {
        self.samples
            .iter()
            .map(|s| (s.id.clone(), s.regime.label().to_string()))
            .collect()
    }

    pub fn from_split(
        kind: SceneKind,
        canvas: (usize, usize),
        split: &SplitAssignment,
        metas: &[SampleMeta],
    ) -> Manifest {
        let samples = metas
            .iter()
            .map(|m| ManifestEntry {
                id: m.id.clone(),
                group: split.group_of(&m.id).expect("id was split"),
                regime: m.regime,
                occlusion_fraction: m.occlusion_fraction,
                seed: m.seed,
            })
            .collect();
        Manifest {
            version: 1,
            kind,
            canvas,
            k: split.k,
            samples,
        }
    }
}

pub fn sample_dir(root: &Path, id: &str) -> PathBuf {
    root.join("samples").join(id)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

pub fn save_manifest(root: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    let path = manifest_path(root);
    let bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| fmt_err(&path, e.to_string()))?;
    std::fs::write(&path, bytes).map_err(io_err(&path))
}

pub fn load_manifest(root: &Path) -> Result<Manifest, DatasetError> {
    let path = manifest_path(root);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| fmt_err(&path, e.to_string()))
}

/// Write one rasterized sample to `<root>/samples/<id>/`.
pub fn write_sample(
    root: &Path,
    id: &str,
    scene: &TreeScene,
    bundle: &SceneBundle,
    regime: OcclusionRegime,
) -> Result<SampleMeta, DatasetError> {
    let dir = sample_dir(root, id);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let image_path = dir.join("image.png");
    bundle
        .image
        .save(&image_path)
        .map_err(|e| fmt_err(&image_path, e.to_string()))?;
    if let Some(depth) = &bundle.depth {
        let depth_path = dir.join("depth.png");
        depth
            .save(&depth_path)
            .map_err(|e| fmt_err(&depth_path, e.to_string()))?;
    }
    let whole_path = dir.join("whole.png");
    bundle
        .whole_mask
        .save_png(&whole_path)
        .map_err(|e| fmt_err(&whole_path, e.to_string()))?;
    let visible_path = dir.join("visible.png");
    bundle
        .visible_mask
        .save_png(&visible_path)
        .map_err(|e| fmt_err(&visible_path, e.to_string()))?;
    let target_path = dir.join("target.csv");
    bundle
        .target
        .save_csv(&target_path)
        .map_err(|e| fmt_err(&target_path, e.to_string()))?;

    let meta = SampleMeta {
        id: id.to_string(),
        seed: scene.seed,
        kind: scene.kind,
        regime,
        canvas: scene.canvas,
        occlusion_fraction: bundle.occlusion_fraction,
        features: scene.features(),
        has_depth: bundle.depth.is_some(),
    };
    let meta_path = dir.join("meta.json");
    let bytes = serde_json::to_vec_pretty(&meta).map_err(|e| fmt_err(&meta_path, e.to_string()))?;
    std::fs::write(&meta_path, bytes).map_err(io_err(&meta_path))?;
    Ok(meta)
}

/// A sample read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub meta: SampleMeta,
    pub image: RgbImage,
    pub depth: Option<GrayImage>,
    pub whole: MaskImage,
    pub visible: MaskImage,
    /// Target in scan convention, as written by the generator.
    pub target: PositionTarget,
}

pub fn read_sample(root: &Path, id: &str) -> Result<LoadedSample, DatasetError> {
    let dir = sample_dir(root, id);
    let meta_path = dir.join("meta.json");
    let bytes = std::fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let meta: SampleMeta =
        serde_json::from_slice(&bytes).map_err(|e| fmt_err(&meta_path, e.to_string()))?;

    let image_path = dir.join("image.png");
    let image = image::open(&image_path)
        .map_err(|e| fmt_err(&image_path, e.to_string()))?
        .to_rgb8();
    let depth = if meta.has_depth {
        let depth_path = dir.join("depth.png");
        Some(
            image::open(&depth_path)
                .map_err(|e| fmt_err(&depth_path, e.to_string()))?
                .to_luma8(),
        )
    } else {
        None
    };
    let whole_path = dir.join("whole.png");
    let whole =
        MaskImage::load_png(&whole_path).map_err(|e| fmt_err(&whole_path, e.to_string()))?;
    let visible_path = dir.join("visible.png");
    let visible =
        MaskImage::load_png(&visible_path).map_err(|e| fmt_err(&visible_path, e.to_string()))?;

    // Coordinate extent: canvas width for row-scanned kinds, height for
    // horizontally scanned ones.
    let coord_extent = if meta.kind.scans_rows() {
        meta.canvas.0
    } else {
        meta.canvas.1
    };
    let target_path = dir.join("target.csv");
    let target = PositionTarget::load_csv(&target_path, coord_extent)
        .map_err(|e| fmt_err(&target_path, e.to_string()))?;

    Ok(LoadedSample {
        meta,
        image,
        depth,
        whole,
        visible,
        target,
    })
}

/// RGB (+ optional depth) image as a CHW float tensor in [0, 1], transposed
/// into scan convention when the scene is scanned along columns.
pub fn image_tensor(sample: &LoadedSample) -> Array3<f64> {
    let (w, h) = (sample.image.width() as usize, sample.image.height() as usize);
    let channels = 3 + usize::from(sample.depth.is_some());
    let mut arr = Array3::zeros((channels, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = sample.image.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                arr[[c, y, x]] = px[c] as f64 / 255.0;
            }
            if let Some(d) = &sample.depth {
                arr[[3, y, x]] = d.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
            }
        }
    }
    if sample.meta.kind.scans_rows() {
        arr
    } else {
        arr.permuted_axes([0, 2, 1]).as_standard_layout().to_owned()
    }
}

/// Binary mask as (H, W) floats in scan convention.
pub fn mask_tensor(sample: &LoadedSample, variant: SegVariant) -> Array2<f64> {
    let mask = match variant {
        SegVariant::Visible => &sample.visible,
        SegVariant::Whole => &sample.whole,
    };
    let scan = if sample.meta.kind.scans_rows() {
        mask.clone()
    } else {
        mask.transposed()
    };
    Array2::from_shape_fn((scan.height(), scan.width()), |(y, x)| {
        if scan.get(x, y) {
            1.0
        } else {
            0.0
        }
    })
}

/// Mask in scan convention for the curve-fitting pipeline.
pub fn scan_mask(sample: &LoadedSample, mask: &MaskImage) -> MaskImage {
    if sample.meta.kind.scans_rows() {
        mask.clone()
    } else {
        mask.transposed()
    }
}

/// Regression sample: image tensor plus the normalized coordinate grid.
pub fn to_reg_sample(sample: &LoadedSample) -> RegSample {
    let image = image_tensor(sample);
    let t = &sample.target;
    let hi = (t.width - 1) as f64;
    let coords = Array2::from_shape_fn((t.n_branches(), t.height), |(b, r)| t.coords[b][r] / hi);
    RegSample {
        id: sample.meta.id.clone(),
        image,
        coords,
        valid: t.valid.clone(),
    }
}

pub fn to_seg_sample(sample: &LoadedSample, variant: SegVariant) -> SegSample {
    SegSample {
        id: sample.meta.id.clone(),
        image: image_tensor(sample),
        mask: mask_tensor(sample, variant),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_bundle, RasterOptions};

    #[test]
    fn sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, bundle) = generate_bundle(
            SceneKind::YShaped,
            (64, 64),
            OcclusionRegime::Medium,
            7,
            RasterOptions { depth: true },
        )
        .unwrap();
        let meta = write_sample(dir.path(), "s00001", &scene, &bundle, OcclusionRegime::Medium)
            .unwrap();
        assert_eq!(meta.occlusion_fraction, bundle.occlusion_fraction);

        let s = read_sample(dir.path(), "s00001").unwrap();
        assert_eq!(s.image, bundle.image);
        assert_eq!(s.whole, bundle.whole_mask);
        assert_eq!(s.visible, bundle.visible_mask);
        assert_eq!(s.target, bundle.target);
        assert!(s.depth.is_some());

        let reg = to_reg_sample(&s);
        assert_eq!(reg.image.dim(), (4, 64, 64));
        assert!(reg.coords.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let seg = to_seg_sample(&s, SegVariant::Whole);
        assert_eq!(seg.mask.sum() as usize, bundle.whole_mask.count());
    }

    #[test]
    fn vine_sample_transposes_to_scan_convention() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, bundle) = generate_bundle(
            SceneKind::HorizontalVine,
            (64, 48),
            OcclusionRegime::None,
            3,
            RasterOptions::default(),
        )
        .unwrap();
        write_sample(dir.path(), "v0", &scene, &bundle, OcclusionRegime::None).unwrap();
        let s = read_sample(dir.path(), "v0").unwrap();
        let reg = to_reg_sample(&s);
        // Scan convention: height = canvas width (64 scan lines).
        assert_eq!(reg.image.dim(), (3, 64, 48));
        assert_eq!(reg.coords.dim(), (1, 64));
        let seg = to_seg_sample(&s, SegVariant::Visible);
        assert_eq!(seg.mask.dim(), (64, 48));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            version: 1,
            kind: SceneKind::YShaped,
            canvas: (64, 64),
            k: 5,
            samples: vec![ManifestEntry {
                id: "s00000".into(),
                group: 3,
                regime: OcclusionRegime::Heavy,
                occlusion_fraction: 0.31,
                seed: 9,
            }],
        };
        save_manifest(dir.path(), &manifest).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 1);
        assert_eq!(back.samples[0].group, 3);
        assert_eq!(back.ids_in_group(3), vec!["s00000".to_string()]);
        assert!(back.ids_outside_group(3).is_empty());
    }
}
