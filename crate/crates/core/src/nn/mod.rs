//! From-scratch neural network machinery shared by the coordinate regressor
//! and the segmentation baseline: layers with explicit forward/backward
//! passes, the adaptive-moment optimizer, and a binary checkpoint container.
//!
//! Everything runs in f64 so analytic gradients can be validated against
//! central finite differences, and every source of randomness is an explicit
//! seed so training trajectories are bit-reproducible.

pub mod adam;
pub mod checkpoint;
pub mod layers;

pub use adam::{adam_step, AdamState};

use ndarray::{ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("loss undefined: no valid entries")]
    EmptyLoss,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("divergence detected: {detail}")]
    DivergenceDetected {
        epoch: Option<usize>,
        detail: String,
    },
    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Anything with a flat, ordered parameter list.
pub trait Network {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<ArrayViewD<'_, f64>>;
    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Optimization settings shared by both trainable models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    pub epochs: usize,
    #[serde(default = "default_hflip")]
    pub hflip: bool,
    /// Stop when the validation loss has not improved for this many epochs.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Seed for shuffling and augmentation. Explicit, never from entropy.
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_hflip() -> bool {
    true
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            batch_size: default_batch(),
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            epochs,
            hflip: default_hflip(),
            patience: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size < 1 {
            return Err(ModelError::SpecMismatch("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::SpecMismatch("learning rate must be > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(ModelError::SpecMismatch(format!("{name} must be in (0,1)")));
            }
        }
        Ok(())
    }
}

/// Per-epoch loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss history of a training run; the returned model is the snapshot from
/// `best_epoch` (lowest validation loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}
