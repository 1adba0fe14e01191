//! Branchline — complete 2D branch centerline prediction on synthetic orchard scenes.
//!
//! The library predicts the full (visible + occluded) centerline of tree
//! branches in an image as one horizontal coordinate per branch per pixel
//! row, and benchmarks that direct regression against the conventional
//! segmentation-plus-curve-fitting pipeline. Everything runs on procedurally
//! generated 2D scenes with exact ground truth, so the two approaches can be
//! compared under controlled occlusion levels.
//!
//! Pipeline stages:
//!
//! 1. [`synthdata`] – procedural tree scenes (Y-shaped, trunk, horizontal
//!    vine) with calibrated occlusion regimes, rasterized into images, masks
//!    and sub-pixel centerline targets.
//! 2. [`annotation`] – the label model: polyline → per-row coordinate grid,
//!    augmentations with exact label transforms, cross-validation splits.
//! 3. [`regressor`] – convolutional coordinate regressor (conv backbone +
//!    2048/512 dense layers + `n×h` linear head) trained with masked MSE.
//! 4. [`segbaseline`] – encoder-decoder segmentation network with skip
//!    connections (visible-mask and whole-mask variants), weighted dice loss.
//! 5. [`curvefit`] – mask → centerline conversion: blob filtering, per-row
//!    waypoints, left/right path splitting, polynomial least squares.
//! 6. [`metrics`] – per-image RMSE / Pearson r, occlusion-stratified
//!    aggregation, timing instrumentation.
//! 7. [`commands`] + the `branchline` binary – reproducible generate / train /
//!    evaluate / render workflows over a JSON config.

pub mod annotation;
pub mod commands;
pub mod config;
pub mod curvefit;
pub mod dataset;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod regressor;
pub mod segbaseline;
pub mod synthdata;
pub mod target;

pub use mask::MaskImage;
pub use target::PositionTarget;
