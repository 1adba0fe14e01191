//! Encoder-decoder segmentation baseline with skip connections.
//!
//! A small conv encoder (stride-2 stages) and a mirrored decoder (nearest
//! upsampling + skip concatenation) ending in a 1-channel sigmoid map. Two
//! variants share the architecture: one trained on visible-branch masks, one
//! trained to fill occlusions using whole-branch masks. Trained with a
//! weighted dice loss.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::MaskImage;
use crate::nn::adam::{adam_step, AdamState};
use crate::nn::checkpoint::{load_checkpoint, restore_network, save_checkpoint};
use crate::nn::layers::{
    concat_channels, relu, relu_backward, sigmoid, split_channels, upsample2x,
    upsample2x_backward, Conv2d,
};
use crate::nn::{EpochStats, ModelError, Network, TrainConfig, TrainHistory};

pub const CHECKPOINT_KIND: &str = "segmentation";

/// Which mask the model is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegVariant {
    Visible,
    Whole,
}

impl SegVariant {
    pub fn label(self) -> &'static str {
        match self {
            SegVariant::Visible => "visible",
            SegVariant::Whole => "whole",
        }
    }
}

/// Architecture configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegSpec {
    /// (channels, height, width).
    pub input: (usize, usize, usize),
    /// Stem width followed by one width per stride-2 encoder stage; the
    /// decoder mirrors these with skip concatenation.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    pub variant: SegVariant,
    pub seed: u64,
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

impl SegSpec {
    pub fn new(input: (usize, usize, usize), variant: SegVariant, seed: u64) -> Self {
        Self {
            input,
            widths: default_widths(),
            variant,
            seed,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::SpecMismatch("zero input dimension".into()));
        }
        if self.widths.len() < 2 {
            return Err(ModelError::SpecMismatch(
                "need a stem width and at least one encoder stage".into(),
            ));
        }
        if self.widths.iter().any(|&v| v == 0) {
            return Err(ModelError::SpecMismatch("zero stage width".into()));
        }
        let div = 1 << self.depth();
        if h % div != 0 || w % div != 0 {
            return Err(ModelError::SpecMismatch(format!(
                "input {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub stem: Conv2d,
    pub downs: Vec<Conv2d>,
    pub ups: Vec<Conv2d>,
    pub head: Conv2d,
}

impl Network for SegNet {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["stem.weight".into(), "stem.bias".into()];
        for i in 0..self.downs.len() {
            names.push(format!("down{i}.weight"));
            names.push(format!("down{i}.bias"));
        }
        for i in 0..self.ups.len() {
            names.push(format!("up{i}.weight"));
            names.push(format!("up{i}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = vec![self.stem.weight.view().into_dyn(), self.stem.bias.view().into_dyn()];
        for c in self.downs.iter().chain(&self.ups) {
            out.push(c.weight.view().into_dyn());
            out.push(c.bias.view().into_dyn());
        }
        out.push(self.head.weight.view().into_dyn());
        out.push(self.head.bias.view().into_dyn());
        out
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out: Vec<ArrayViewMutD<'_, f64>> = vec![
            self.stem.weight.view_mut().into_dyn(),
            self.stem.bias.view_mut().into_dyn(),
        ];
        for c in self.downs.iter_mut().chain(self.ups.iter_mut()) {
            out.push(c.weight.view_mut().into_dyn());
            out.push(c.bias.view_mut().into_dyn());
        }
        out.push(self.head.weight.view_mut().into_dyn());
        out.push(self.head.bias.view_mut().into_dyn());
        out
    }
}

#[derive(Debug, Clone)]
pub struct SegModelState {
    pub spec: SegSpec,
    pub net: SegNet,
    pub opt: AdamState,
}

/// Deterministic init, mirroring the regressor's scheme.
pub fn build_segmodel(spec: &SegSpec) -> Result<SegModelState, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let depth = spec.depth();
    let stem = Conv2d::init(&mut rng, spec.input.0, spec.widths[0], 3, 1, 1);
    let mut downs = Vec::new();
    for i in 0..depth {
        downs.push(Conv2d::init(&mut rng, spec.widths[i], spec.widths[i + 1], 3, 2, 1));
    }
    let mut ups = Vec::new();
    for j in 0..depth {
        // Deepest stage first: upsampled features concatenated with the
        // matching-resolution encoder activation.
        let deep = spec.widths[depth - j];
        let skip = spec.widths[depth - j - 1];
        ups.push(Conv2d::init(&mut rng, deep + skip, skip, 3, 1, 1));
    }
    let head = Conv2d::init(&mut rng, spec.widths[0], 1, 1, 1, 0);
    let net = SegNet {
        stem,
        downs,
        ups,
        head,
    };
    let opt = AdamState::new_like(&net.params());
    Ok(SegModelState {
        spec: spec.clone(),
        net,
        opt,
    })
}

struct SegCache {
    stem_cols: Array2<f64>,
    stem_z: Array4<f64>,
    down_cols: Vec<Array2<f64>>,
    down_z: Vec<Array4<f64>>,
    down_in_dims: Vec<(usize, usize, usize, usize)>,
    up_cols: Vec<Array2<f64>>,
    up_z: Vec<Array4<f64>>,
    up_cat_dims: Vec<(usize, usize, usize, usize)>,
    head_cols: Array2<f64>,
    head_in_dim: (usize, usize, usize, usize),
    probs: Array4<f64>,
}

fn check_input(spec: &SegSpec, x: &Array4<f64>) -> Result<(), ModelError> {
    let (_, c, h, w) = x.dim();
    if (c, h, w) != spec.input {
        return Err(ModelError::ShapeError(format!(
            "input {c}x{h}x{w} does not match spec {:?}",
            spec.input
        )));
    }
    Ok(())
}

fn forward_cached(state: &SegModelState, x: &Array4<f64>) -> Result<(Array4<f64>, SegCache), ModelError> {
    check_input(&state.spec, x)?;
    let (stem_z, stem_cols) = state.net.stem.forward(x);
    let mut acts = vec![relu(&stem_z)];
    let mut down_cols = Vec::new();
    let mut down_z = Vec::new();
    let mut down_in_dims = Vec::new();
    for d in &state.net.downs {
        let input = acts.last().expect("nonempty");
        down_in_dims.push(input.dim());
        let (z, cols) = d.forward(input);
        acts.push(relu(&z));
        down_cols.push(cols);
        down_z.push(z);
    }
    let depth = state.net.downs.len();
    let mut u = acts[depth].clone();
    let mut up_cols = Vec::new();
    let mut up_z = Vec::new();
    let mut up_cat_dims = Vec::new();
    for (j, upconv) in state.net.ups.iter().enumerate() {
        let upsampled = upsample2x(&u);
        let skip = &acts[depth - 1 - j];
        let cat = concat_channels(&upsampled, skip);
        up_cat_dims.push(cat.dim());
        let (z, cols) = upconv.forward(&cat);
        u = relu(&z);
        up_cols.push(cols);
        up_z.push(z);
    }
    let head_in_dim = u.dim();
    let (head_z, head_cols) = state.net.head.forward(&u);
    let probs = sigmoid(&head_z);
    Ok((
        probs.clone(),
        SegCache {
            stem_cols,
            stem_z,
            down_cols,
            down_z,
            down_in_dims,
            up_cols,
            up_z,
            up_cat_dims,
            head_cols,
            head_in_dim,
            probs,
        },
    ))
}

/// Probability map in [0, 1], shape (B, 1, H, W).
pub fn forward(state: &SegModelState, x: &Array4<f64>) -> Result<Array4<f64>, ModelError> {
    forward_cached(state, x).map(|(p, _)| p)
}

fn backward(state: &SegModelState, cache: &SegCache, dprobs: &Array4<f64>) -> Vec<ndarray::ArrayD<f64>> {
    // Through the sigmoid.
    let mut dz_head = dprobs.clone();
    ndarray::Zip::from(&mut dz_head)
        .and(&cache.probs)
        .for_each(|d, &p| *d *= p * (1.0 - p));
    let (mut du, dw_head, db_head) =
        state
            .net
            .head
            .backward(&cache.head_cols, cache.head_in_dim, &dz_head);

    let depth = state.net.downs.len();
    let mut d_acts: Vec<Option<Array4<f64>>> = vec![None; depth + 1];
    let mut up_grads: Vec<(Array4<f64>, Array1<f64>)> = Vec::new();
    for (j, upconv) in state.net.ups.iter().enumerate().rev() {
        let dz = relu_backward(&cache.up_z[j], &du);
        let (dcat, dw, db) = upconv.backward(&cache.up_cols[j], cache.up_cat_dims[j], &dz);
        up_grads.push((dw, db));
        let deep_channels = state.spec.widths[depth - j];
        let (dup, dskip) = split_channels(&dcat, deep_channels);
        let skip_idx = depth - 1 - j;
        d_acts[skip_idx] = Some(match d_acts[skip_idx].take() {
            Some(acc) => acc + &dskip,
            None => dskip,
        });
        du = upsample2x_backward(&dup);
    }
    up_grads.reverse();
    // `du` is now the gradient on the deepest encoder activation.
    d_acts[depth] = Some(match d_acts[depth].take() {
        Some(acc) => acc + &du,
        None => du,
    });

    let mut down_grads: Vec<(Array4<f64>, Array1<f64>)> = Vec::new();
    for (i, dconv) in state.net.downs.iter().enumerate().rev() {
        let da = d_acts[i + 1].take().expect("decoder filled this slot");
        let dz = relu_backward(&cache.down_z[i], &da);
        let (dx, dw, db) = dconv.backward(&cache.down_cols[i], cache.down_in_dims[i], &dz);
        down_grads.push((dw, db));
        d_acts[i] = Some(match d_acts[i].take() {
            Some(acc) => acc + &dx,
            None => dx,
        });
    }
    down_grads.reverse();

    let da = d_acts[0].take().expect("stem gradient");
    let dz = relu_backward(&cache.stem_z, &da);
    let x_dim = (
        cache.stem_z.dim().0,
        state.spec.input.0,
        state.spec.input.1,
        state.spec.input.2,
    );
    let (_, dw_stem, db_stem) = state.net.stem.backward(&cache.stem_cols, x_dim, &dz);

    let mut grads: Vec<ndarray::ArrayD<f64>> = vec![dw_stem.into_dyn(), db_stem.into_dyn()];
    for (dw, db) in down_grads.into_iter().chain(up_grads) {
        grads.push(dw.into_dyn());
        grads.push(db.into_dyn());
    }
    grads.push(dw_head.into_dyn());
    grads.push(db_head.into_dyn());
    grads
}

/// Weighted dice loss with smoothing 1:
/// `1 − (2·Σ w·p·g + 1) / (Σ w·p + Σ w·g + 1)`, where w is
/// `foreground_weight` on mask pixels and 1 elsewhere. When no weight is
/// given, the batch's background/foreground pixel ratio is used.
pub fn weighted_dice_loss(
    probs: &Array4<f64>,
    mask: &Array4<f64>,
    foreground_weight: Option<f64>,
) -> Result<f64, ModelError> {
    weighted_dice_loss_grad(probs, mask, foreground_weight).map(|(l, _)| l)
}

pub fn weighted_dice_loss_grad(
    probs: &Array4<f64>,
    mask: &Array4<f64>,
    foreground_weight: Option<f64>,
) -> Result<(f64, Array4<f64>), ModelError> {
    if probs.dim() != mask.dim() {
        return Err(ModelError::ShapeError(format!(
            "probabilities {:?} vs mask {:?}",
            probs.dim(),
            mask.dim()
        )));
    }
    let smooth = 1.0;
    let fg: f64 = mask.sum();
    let total = mask.len() as f64;
    let fw = foreground_weight.unwrap_or(if fg > 0.0 { (total - fg) / fg } else { 1.0 });

    let mut a = 0.0; // Σ w p g
    let mut b = 0.0; // Σ w p + Σ w g
    ndarray::Zip::from(probs).and(mask).for_each(|&p, &g| {
        let w = if g > 0.5 { fw } else { 1.0 };
        a += w * p * g;
        b += w * p + w * g;
    });
    let denom = b + smooth;
    let loss = 1.0 - (2.0 * a + smooth) / denom;

    let mut grad = Array4::zeros(probs.raw_dim());
    ndarray::Zip::from(&mut grad).and(mask).for_each(|d, &g| {
        let w = if g > 0.5 { fw } else { 1.0 };
        *d = -(2.0 * g * w * denom - (2.0 * a + smooth) * w) / (denom * denom);
    });
    Ok((loss, grad))
}

/// One segmentation training sample.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    /// CHW image in [0, 1].
    pub image: Array3<f64>,
    /// (H, W) binary mask as 0/1 floats.
    pub mask: Array2<f64>,
}

fn assemble_batch(
    samples: &[&SegSample],
    flips: &[bool],
    spec: &SegSpec,
) -> (Array4<f64>, Array4<f64>) {
    let b = samples.len();
    let (c, h, w) = spec.input;
    let mut x = Array4::zeros((b, c, h, w));
    let mut m = Array4::zeros((b, 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        let flip = flips[i];
        for ci in 0..c {
            for y in 0..h {
                for xi in 0..w {
                    let src = if flip { w - 1 - xi } else { xi };
                    x[[i, ci, y, xi]] = s.image[[ci, y, src]];
                }
            }
        }
        for y in 0..h {
            for xi in 0..w {
                let src = if flip { w - 1 - xi } else { xi };
                m[[i, 0, y, xi]] = s.mask[[y, src]];
            }
        }
    }
    (x, m)
}

fn eval_loss(state: &SegModelState, samples: &[SegSample], batch: usize) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in samples.chunks(batch) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let flips = vec![false; refs.len()];
        let (x, m) = assemble_batch(&refs, &flips, &state.spec);
        let p = forward(state, &x)?;
        let loss = weighted_dice_loss(&p, &m, None)?;
        sum += loss * refs.len() as f64;
        n += refs.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// Train a segmentation variant; target masks must match the variant
/// (visible or whole). Returns the lowest-validation-loss snapshot.
pub fn train_seg(
    spec: &SegSpec,
    train_set: &[SegSample],
    val_set: &[SegSample],
    cfg: &TrainConfig,
) -> Result<(SegModelState, TrainHistory), ModelError> {
    let mut progress = Vec::new();
    train_seg_with_progress(spec, train_set, val_set, cfg, &mut progress)
}

/// Like [`train_seg`], but streams per-epoch stats into `progress`.
pub fn train_seg_with_progress(
    spec: &SegSpec,
    train_set: &[SegSample],
    val_set: &[SegSample],
    cfg: &TrainConfig,
    progress: &mut Vec<EpochStats>,
) -> Result<(SegModelState, TrainHistory), ModelError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut state = build_segmodel(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, usize, SegNet, AdamState)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SegSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let flips: Vec<bool> = refs
                .iter()
                .map(|_| cfg.hflip && rng.gen_bool(0.5))
                .collect();
            let (x, m) = assemble_batch(&refs, &flips, spec);
            let (p, cache) = forward_cached(&state, &x)?;
            let (loss, dp) = weighted_dice_loss_grad(&p, &m, None)?;
            if !loss.is_finite() {
                return Err(ModelError::DivergenceDetected {
                    epoch: Some(epoch),
                    detail: format!("training loss became {loss}"),
                });
            }
            loss_sum += loss;
            batches += 1;
            let grads = backward(&state, &cache, &dp);
            adam_step(state.net.params_mut(), &grads, &mut state.opt, cfg).map_err(|e| match e {
                ModelError::DivergenceDetected { detail, .. } => ModelError::DivergenceDetected {
                    epoch: Some(epoch),
                    detail,
                },
                other => other,
            })?;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_loss = eval_loss(&state, val_set, cfg.batch_size)?;
        progress.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = best.as_ref().map_or(true, |(b, ..)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, state.net.clone(), state.opt.clone()));
        }
        if let (Some(patience), Some((_, be, ..))) = (cfg.patience, best.as_ref()) {
            if epoch - be >= patience {
                break;
            }
        }
    }

    let (best_val_loss, best_epoch, net, opt) = best.expect("at least one epoch");
    state.net = net;
    state.opt = opt;
    Ok((
        state,
        TrainHistory {
            epochs: progress.clone(),
            best_epoch,
            best_val_loss,
        },
    ))
}

/// Binarize a probability map: foreground where p > threshold.
pub fn threshold_mask(probs: &Array4<f64>, threshold: f64) -> MaskImage {
    let (_, _, h, w) = probs.dim();
    MaskImage::from_fn(w, h, |x, y| probs[[0, 0, y, x]] > threshold)
}

/// Run the network on one image and binarize at `threshold`.
pub fn segment(
    state: &SegModelState,
    image: &Array3<f64>,
    threshold: f64,
) -> Result<MaskImage, ModelError> {
    segment_batch(state, std::slice::from_ref(image), threshold).map(|mut v| v.remove(0))
}

/// Batched variant of [`segment`]: one forward pass, one mask per image.
pub fn segment_batch(
    state: &SegModelState,
    images: &[Array3<f64>],
    threshold: f64,
) -> Result<Vec<MaskImage>, ModelError> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (c, h, w) = state.spec.input;
    let mut x = ndarray::Array4::zeros((images.len(), c, h, w));
    for (i, image) in images.iter().enumerate() {
        if image.dim() != (c, h, w) {
            return Err(ModelError::ShapeError(format!(
                "image {i} is {:?}, spec wants {:?}",
                image.dim(),
                state.spec.input
            )));
        }
        x.index_axis_mut(ndarray::Axis(0), i).assign(image);
    }
    let p = forward(state, &x)?;
    let mut masks = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        masks.push(MaskImage::from_fn(w, h, |xx, yy| {
            p[[i, 0, yy, xx]] > threshold
        }));
    }
    Ok(masks)
}

pub fn save_model(path: &std::path::Path, state: &SegModelState) -> Result<(), ModelError> {
    let spec = serde_json::to_value(&state.spec).expect("spec serializes");
    let names = state.net.param_names();
    let mut tensors: Vec<(String, ArrayViewD<'_, f64>)> = Vec::new();
    for (name, view) in names.iter().zip(state.net.params()) {
        tensors.push((name.clone(), view));
    }
    for (name, m) in names.iter().zip(&state.opt.m) {
        tensors.push((format!("adam.m.{name}"), m.view()));
    }
    for (name, v) in names.iter().zip(&state.opt.v) {
        tensors.push((format!("adam.v.{name}"), v.view()));
    }
    save_checkpoint(path, CHECKPOINT_KIND, &spec, state.opt.step, &tensors)
}

pub fn load_model(path: &std::path::Path) -> Result<SegModelState, ModelError> {
    let loaded = load_checkpoint(path)?;
    if loaded.kind != CHECKPOINT_KIND {
        return Err(ModelError::Checkpoint {
            path: path.display().to_string(),
            message: format!("expected kind {CHECKPOINT_KIND}, found {}", loaded.kind),
        });
    }
    let spec: SegSpec =
        serde_json::from_value(loaded.spec.clone()).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: format!("spec: {e}"),
        })?;
    let mut state = build_segmodel(&spec)?;
    restore_network(path, &loaded, &mut state.net, &mut state.opt)?;
    Ok(state)
}
