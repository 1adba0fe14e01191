//! Run configuration: one JSON file drives dataset generation, training and
//! evaluation. All randomness flows from the explicit seeds below — there
//! are no entropy defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curvefit::CurveFitConfig;
use crate::nn::TrainConfig;
use crate::synthdata::SceneKind;

/// Fraction of scenes generated per occlusion regime.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegimeMix {
    pub none: f64,
    pub medium: f64,
    pub heavy: f64,
}

impl Default for RegimeMix {
    fn default() -> Self {
        Self {
            none: 0.5,
            medium: 0.25,
            heavy: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub canvas: (usize, usize),
    pub count: usize,
    #[serde(default)]
    pub regime_mix: RegimeMix,
    #[serde(default)]
    pub depth_channel: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HobConfig {
    #[serde(default = "default_backbone")]
    pub backbone: Vec<usize>,
    #[serde(default = "default_dense1")]
    pub dense1: Option<usize>,
    #[serde(default = "default_dense2")]
    pub dense2: Option<usize>,
}

fn default_backbone() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_dense1() -> Option<usize> {
    Some(2048)
}
fn default_dense2() -> Option<usize> {
    Some(512)
}

impl Default for HobConfig {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            dense1: default_dense1(),
            dense2: default_dense2(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            widths: default_widths(),
        }
    }
}

/// Explicit seeds for every random stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Seeds {
    /// Scene geometry and occluders (per-scene seeds derive from this).
    pub data: u64,
    /// Cross-validation shuffling and the train/validation carve-out.
    pub split: u64,
    /// Weight initialization (per-model streams derive from this).
    pub init: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub scene: SceneConfig,
    #[serde(default = "default_k")]
    pub split_k: usize,
    #[serde(default = "default_group")]
    pub cv_group: usize,
    #[serde(default)]
    pub hob: HobConfig,
    #[serde(default)]
    pub seg: SegConfig,
    pub train_hob: TrainConfig,
    pub train_seg: TrainConfig,
    #[serde(default)]
    pub curvefit: CurveFitConfig,
    pub seeds: Seeds,
    /// Fraction of the training pool held out for model selection.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_k() -> usize {
    5
}
fn default_group() -> usize {
    1
}
fn default_val_fraction() -> f64 {
    0.1
}

impl RunConfig {
    /// Load from JSON.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig =
            serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (w, h) = self.scene.canvas;
        if w < 32 || h < 32 {
            return Err(ConfigError::Invalid(format!(
                "canvas {w}x{h} below the 32x32 minimum"
            )));
        }
        if self.split_k < 2 {
            return Err(ConfigError::Invalid("split_k must be >= 2".into()));
        }
        if self.scene.count < self.split_k {
            return Err(ConfigError::Invalid(format!(
                "{} scenes cannot fill {} groups",
                self.scene.count, self.split_k
            )));
        }
        if self.cv_group < 1 || self.cv_group > self.split_k {
            return Err(ConfigError::Invalid(format!(
                "cv_group {} outside 1..={}",
                self.cv_group, self.split_k
            )));
        }
        let mix = self.scene.regime_mix;
        let sum = mix.none + mix.medium + mix.heavy;
        if (sum - 1.0).abs() > 1e-6 || mix.none < 0.0 || mix.medium < 0.0 || mix.heavy < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "regime mix must be nonnegative and sum to 1, got {sum}"
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(ConfigError::Invalid(
                "val_fraction must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }

    /// Number of image channels fed to the models.
    pub fn input_channels(&self) -> usize {
        3 + usize::from(self.scene.depth_channel)
    }

    /// Model input in scan convention: (channels, scan length, coordinate
    /// extent).
    pub fn model_input(&self) -> (usize, usize, usize) {
        let (w, h) = self.scene.canvas;
        if self.scene.kind.scans_rows() {
            (self.input_channels(), h, w)
        } else {
            (self.input_channels(), w, h)
        }
    }

    pub fn n_branches(&self) -> usize {
        self.scene.kind.n_branches()
    }

    /// A ready-to-edit example configuration rooted at `base`.
    pub fn example(base: &Path) -> RunConfig {
        RunConfig {
            dataset_root: base.join("dataset"),
            checkpoint_dir: base.join("checkpoints"),
            report_dir: base.join("reports"),
            scene: SceneConfig {
                kind: SceneKind::YShaped,
                canvas: (64, 64),
                count: 700,
                regime_mix: RegimeMix::default(),
                depth_channel: false,
            },
            split_k: 7,
            cv_group: 1,
            hob: HobConfig::default(),
            seg: SegConfig::default(),
            train_hob: TrainConfig {
                epochs: 60,
                patience: Some(12),
                ..TrainConfig::new(60, 1e-3, 40)
            },
            train_seg: TrainConfig {
                epochs: 16,
                patience: Some(6),
                ..TrainConfig::new(16, 2e-3, 41)
            },
            curvefit: CurveFitConfig::default(),
            seeds: Seeds {
                data: 1,
                split: 2,
                init: 3,
            },
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips_and_validates() {
        let cfg = RunConfig::example(Path::new("/tmp/x"));
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.model_input(), (3, 64, 64));
        assert_eq!(back.n_branches(), 2);
    }

    #[test]
    fn seeds_are_mandatory() {
        // A config without seeds must fail to parse: no entropy defaults.
        let cfg = RunConfig::example(Path::new("/tmp/x"));
        let mut v = serde_json::to_value(&cfg).unwrap();
        v.as_object_mut().unwrap().remove("seeds");
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
        // Same for the training seed.
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["train_hob"].as_object_mut().unwrap().remove("seed");
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn bad_mix_rejected() {
        let mut cfg = RunConfig::example(Path::new("/tmp/x"));
        cfg.scene.regime_mix.heavy = 0.9;
        assert!(cfg.validate().is_err());
    }
}
