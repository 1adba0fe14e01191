//! Convolutional coordinate regressor.
//!
//! A stack of stride-2 conv blocks feeds a flatten and three dense layers
//! (2048 → 512 → n×h by default); the linear head emits one normalized
//! horizontal coordinate per branch per scan line, so the predicted path is
//! connected by construction. Trained with masked MSE on coordinates
//! normalized by (width − 1).

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::adam::{adam_step, AdamState};
use crate::nn::checkpoint::{load_checkpoint, restore_network, save_checkpoint};
use crate::nn::layers::{relu, relu_backward, Conv2d, Dense};
use crate::nn::{EpochStats, ModelError, Network, TrainConfig, TrainHistory};
use crate::target::PositionTarget;

pub const CHECKPOINT_KIND: &str = "regressor";

/// Layer configuration of the regressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// (channels, height, width); height is the scan length, so the head
    /// emits `n_branches × height` values.
    pub input: (usize, usize, usize),
    /// Output channels of each 3x3 stride-2 ReLU conv block.
    #[serde(default = "default_backbone")]
    pub backbone: Vec<usize>,
    #[serde(default = "default_dense1")]
    pub dense1: Option<usize>,
    #[serde(default = "default_dense2")]
    pub dense2: Option<usize>,
    pub n_branches: usize,
    /// Weight initialization seed.
    pub seed: u64,
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

impl ModelSpec {
    pub fn new(input: (usize, usize, usize), n_branches: usize, seed: u64) -> Self {
        Self {
            input,
            backbone: default_backbone(),
            dense1: default_dense1(),
            dense2: default_dense2(),
            n_branches,
            seed,
        }
    }

    pub fn head_size(&self) -> usize {
        self.n_branches * self.input.1
    }

    /// Spatial size after the stride-2 stack.
    fn backbone_out(&self) -> (usize, usize, usize) {
        let (c, mut h, mut w) = self.input;
        for _ in &self.backbone {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        let ch = self.backbone.last().copied().unwrap_or(c);
        (ch, h, w)
    }

    pub fn flatten_dim(&self) -> usize {
        let (c, h, w) = self.backbone_out();
        c * h * w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::SpecMismatch("zero input dimension".into()));
        }
        if self.n_branches == 0 {
            return Err(ModelError::SpecMismatch("n_branches must be >= 1".into()));
        }
        if self.backbone.iter().any(|&ch| ch == 0) {
            return Err(ModelError::SpecMismatch("zero-width conv block".into()));
        }
        for d in [self.dense1, self.dense2] {
            if d == Some(0) {
                return Err(ModelError::SpecMismatch("zero-width dense layer".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorNet {
    pub convs: Vec<Conv2d>,
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

impl Network for RegressorNet {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        for i in 0..self.hidden.len() {
            names.push(format!("dense{}.weight", i + 1));
            names.push(format!("dense{}.bias", i + 1));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.weight.view().into_dyn());
            out.push(c.bias.view().into_dyn());
        }
        for d in &self.hidden {
            out.push(d.weight.view().into_dyn());
            out.push(d.bias.view().into_dyn());
        }
        out.push(self.head.weight.view().into_dyn());
        out.push(self.head.bias.view().into_dyn());
        out
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out: Vec<ArrayViewMutD<'_, f64>> = Vec::new();
        for c in &mut self.convs {
            out.push(c.weight.view_mut().into_dyn());
            out.push(c.bias.view_mut().into_dyn());
        }
        for d in &mut self.hidden {
            out.push(d.weight.view_mut().into_dyn());
            out.push(d.bias.view_mut().into_dyn());
        }
        out.push(self.head.weight.view_mut().into_dyn());
        out.push(self.head.bias.view_mut().into_dyn());
        out
    }
}

/// Learned parameters plus optimizer accumulators.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub net: RegressorNet,
    pub opt: AdamState,
}

/// Deterministic fan-in-uniform initialization; biases start at zero.
pub fn build_model(spec: &ModelSpec) -> Result<ModelState, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut convs = Vec::new();
    let mut in_c = spec.input.0;
    for &out_c in &spec.backbone {
        convs.push(Conv2d::init(&mut rng, in_c, out_c, 3, 2, 1));
        in_c = out_c;
    }
    let mut hidden = Vec::new();
    let mut dim = spec.flatten_dim();
    for d in [spec.dense1, spec.dense2].into_iter().flatten() {
        hidden.push(Dense::init(&mut rng, dim, d));
        dim = d;
    }
    let head = Dense::init(&mut rng, dim, spec.head_size());
    let net = RegressorNet {
        convs,
        hidden,
        head,
    };
    let opt = AdamState::new_like(&net.params());
    Ok(ModelState {
        spec: spec.clone(),
        net,
        opt,
    })
}

/// Activations cached by the training forward pass.
pub struct ForwardCache {
    conv_dims: Vec<(usize, usize, usize, usize)>,
    conv_cols: Vec<Array2<f64>>,
    conv_z: Vec<Array4<f64>>,
    /// acts[0] is the flattened backbone output; acts[i+1] = relu(z_i).
    acts: Vec<Array2<f64>>,
    hidden_z: Vec<Array2<f64>>,
}

fn check_input(spec: &ModelSpec, x: &Array4<f64>) -> Result<(), ModelError> {
    let (_, c, h, w) = x.dim();
    if (c, h, w) != spec.input {
        return Err(ModelError::ShapeError(format!(
            "input {c}x{h}x{w} does not match spec {:?}",
            spec.input
        )));
    }
    Ok(())
}

fn forward_cached(state: &ModelState, x: &Array4<f64>) -> Result<(Array3<f64>, ForwardCache), ModelError> {
    check_input(&state.spec, x)?;
    let b = x.dim().0;
    let mut conv_dims = Vec::new();
    let mut conv_cols = Vec::new();
    let mut conv_z = Vec::new();
    let mut cur = x.clone();
    for conv in &state.net.convs {
        conv_dims.push(cur.dim());
        let (z, cols) = conv.forward(&cur);
        cur = relu(&z);
        conv_cols.push(cols);
        conv_z.push(z);
    }
    let flat_dim = cur.len() / b;
    let flat = cur
        .into_shape_with_order((b, flat_dim))
        .expect("contiguous activations");
    let mut acts = vec![flat];
    let mut hidden_z = Vec::new();
    for d in &state.net.hidden {
        let z = d.forward(acts.last().expect("nonempty"));
        acts.push(relu(&z));
        hidden_z.push(z);
    }
    let out2 = state.net.head.forward(acts.last().expect("nonempty"));
    let out = out2
        .into_shape_with_order((b, state.spec.n_branches, state.spec.input.1))
        .expect("head output shape");
    Ok((
        out,
        ForwardCache {
            conv_dims,
            conv_cols,
            conv_z,
            acts,
            hidden_z,
        },
    ))
}

/// Batched forward pass: (B, C, H, W) → (B, n_branches, height) in the
/// normalized [0, 1] coordinate scale (linear head, no clamping).
pub fn forward(state: &ModelState, x: &Array4<f64>) -> Result<Array3<f64>, ModelError> {
    forward_cached(state, x).map(|(y, _)| y)
}

/// Backpropagate `dout` through the cached forward pass; gradients come back
/// in parameter order.
fn backward(state: &ModelState, cache: &ForwardCache, dout: &Array3<f64>) -> Vec<ndarray::ArrayD<f64>> {
    let b = dout.dim().0;
    let dz_head = dout
        .clone()
        .into_shape_with_order((b, state.spec.head_size()))
        .expect("contiguous dout");
    let (mut da, dw_head, db_head) = state
        .net
        .head
        .backward(cache.acts.last().expect("nonempty"), &dz_head);

    let mut hidden_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::new();
    for (i, d) in state.net.hidden.iter().enumerate().rev() {
        let dz = relu_backward(&cache.hidden_z[i], &da);
        let (dx, dw, db) = d.backward(&cache.acts[i], &dz);
        hidden_grads.push((dw, db));
        da = dx;
    }
    hidden_grads.reverse();

    let mut conv_grads: Vec<(Array4<f64>, Array1<f64>)> = Vec::new();
    if !state.net.convs.is_empty() {
        let last_dim = {
            let (bb, _, _, _) = cache.conv_dims[state.net.convs.len() - 1];
            debug_assert_eq!(bb, b);
            cache.conv_z[state.net.convs.len() - 1].dim()
        };
        let mut dcur = da
            .into_shape_with_order(last_dim)
            .expect("flatten inverse");
        for (i, conv) in state.net.convs.iter().enumerate().rev() {
            let dz = relu_backward(&cache.conv_z[i], &dcur);
            let (dx, dw, db) = conv.backward(&cache.conv_cols[i], cache.conv_dims[i], &dz);
            conv_grads.push((dw, db));
            dcur = dx;
        }
        conv_grads.reverse();
    }

    let mut grads: Vec<ndarray::ArrayD<f64>> = Vec::new();
    for (dw, db) in conv_grads {
        grads.push(dw.into_dyn());
        grads.push(db.into_dyn());
    }
    for (dw, db) in hidden_grads {
        grads.push(dw.into_dyn());
        grads.push(db.into_dyn());
    }
    grads.push(dw_head.into_dyn());
    grads.push(db_head.into_dyn());
    grads
}

/// Mean squared error over valid entries only. `valid` is per (sample, row)
/// and applies to every branch channel.
pub fn mse_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    valid: &Array2<bool>,
) -> Result<f64, ModelError> {
    mse_loss_grad(pred, target, valid).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to the predictions.
pub fn mse_loss_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    valid: &Array2<bool>,
) -> Result<(f64, Array3<f64>), ModelError> {
    if pred.dim() != target.dim() {
        return Err(ModelError::ShapeError(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (b, n, h) = pred.dim();
    if valid.dim() != (b, h) {
        return Err(ModelError::ShapeError(format!(
            "valid mask {:?} vs batch {:?}",
            valid.dim(),
            (b, h)
        )));
    }
    let mut count = 0usize;
    let mut ss = 0.0;
    for bi in 0..b {
        for r in 0..h {
            if !valid[[bi, r]] {
                continue;
            }
            for ch in 0..n {
                let d = pred[[bi, ch, r]] - target[[bi, ch, r]];
                ss += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyLoss);
    }
    let scale = 2.0 / count as f64;
    let mut grad = Array3::zeros((b, n, h));
    for bi in 0..b {
        for r in 0..h {
            if !valid[[bi, r]] {
                continue;
            }
            for ch in 0..n {
                grad[[bi, ch, r]] = scale * (pred[[bi, ch, r]] - target[[bi, ch, r]]);
            }
        }
    }
    Ok((ss / count as f64, grad))
}

/// One training sample: CHW image in [0, 1] and its normalized target.
#[derive(Debug, Clone)]
pub struct RegSample {
    pub id: String,
    pub image: Array3<f64>,
    /// (n_branches, height), coordinates divided by (width - 1).
    pub coords: Array2<f64>,
    pub valid: Vec<bool>,
}

fn assemble_batch(
    samples: &[&RegSample],
    flips: &[bool],
    spec: &ModelSpec,
) -> (Array4<f64>, Array3<f64>, Array2<bool>) {
    let b = samples.len();
    let (c, h, w) = spec.input;
    let n = spec.n_branches;
    let mut x = Array4::zeros((b, c, h, w));
    let mut t = Array3::zeros((b, n, h));
    let mut valid = Array2::from_elem((b, h), false);
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
        for ch in 0..n {
            let src_ch = if flip { n - 1 - ch } else { ch };
            for r in 0..h {
                let v = s.coords[[src_ch, r]];
                t[[i, ch, r]] = if flip { 1.0 - v } else { v };
            }
        }
        for (r, &v) in s.valid.iter().enumerate() {
            valid[[i, r]] = v;
        }
    }
    (x, t, valid)
}

/// Pooled validation MSE over all valid entries of the set.
fn eval_loss(state: &ModelState, samples: &[RegSample], batch: usize) -> Result<f64, ModelError> {
    let mut ss = 0.0;
    let mut count = 0usize;
    let n = state.spec.n_branches;
    for chunk in samples.chunks(batch) {
        let refs: Vec<&RegSample> = chunk.iter().collect();
        let flips = vec![false; refs.len()];
        let (x, t, valid) = assemble_batch(&refs, &flips, &state.spec);
        let pred = forward(state, &x)?;
        for bi in 0..refs.len() {
            for r in 0..state.spec.input.1 {
                if !valid[[bi, r]] {
                    continue;
                }
                for ch in 0..n {
                    let d = pred[[bi, ch, r]] - t[[bi, ch, r]];
                    ss += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyLoss);
    }
    Ok(ss / count as f64)
}

/// Train with seeded shuffling and optional horizontal-flip augmentation;
/// returns the snapshot from the epoch with the lowest validation loss.
pub fn train(
    spec: &ModelSpec,
    train_set: &[RegSample],
    val_set: &[RegSample],
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainHistory), ModelError> {
    let mut progress = Vec::new();
    train_with_progress(spec, train_set, val_set, cfg, &mut progress)
}

/// Like [`train`], but streams per-epoch stats into `progress` so callers
/// can dump the partial history when training aborts.
pub fn train_with_progress(
    spec: &ModelSpec,
    train_set: &[RegSample],
    val_set: &[RegSample],
    cfg: &TrainConfig,
    progress: &mut Vec<EpochStats>,
) -> Result<(ModelState, TrainHistory), ModelError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut state = build_model(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, usize, RegressorNet, AdamState)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&RegSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let flips: Vec<bool> = refs
                .iter()
                .map(|_| cfg.hflip && rng.gen_bool(0.5))
                .collect();
            let (x, t, valid) = assemble_batch(&refs, &flips, spec);
            let (pred, cache) = forward_cached(&state, &x)?;
            let (loss, dpred) = mse_loss_grad(&pred, &t, &valid)?;
            if !loss.is_finite() {
                return Err(ModelError::DivergenceDetected {
                    epoch: Some(epoch),
                    detail: format!("training loss became {loss}"),
                });
            }
            loss_sum += loss;
            batches += 1;
            let grads = backward(&state, &cache, &dpred);
            adam_step(state.net.params_mut(), &grads, &mut state.opt, cfg).map_err(|e| {
                match e {
                    ModelError::DivergenceDetected { detail, .. } => {
                        ModelError::DivergenceDetected {
                            epoch: Some(epoch),
                            detail,
                        }
                    }
                    other => other,
                }
            })?;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_loss = eval_loss(&state, val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(ModelError::DivergenceDetected {
                epoch: Some(epoch),
                detail: format!("validation loss became {val_loss}"),
            });
        }
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

/// Denormalized per-row prediction; every row is valid by construction.
pub fn predict_positions(
    state: &ModelState,
    image: &Array3<f64>,
) -> Result<PositionTarget, ModelError> {
    predict_positions_batch(state, std::slice::from_ref(image)).map(|mut v| v.remove(0))
}

/// Batched variant of [`predict_positions`]: one forward pass over all
/// images, one connected target per image.
pub fn predict_positions_batch(
    state: &ModelState,
    images: &[Array3<f64>],
) -> Result<Vec<PositionTarget>, ModelError> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (c, h, w) = state.spec.input;
    let mut x = Array4::zeros((images.len(), c, h, w));
    for (i, image) in images.iter().enumerate() {
        if image.dim() != (c, h, w) {
            return Err(ModelError::ShapeError(format!(
                "image {i} is {:?}, spec wants {:?}",
                image.dim(),
                state.spec.input
            )));
        }
        x.index_axis_mut(Axis(0), i).assign(image);
    }
    let out = forward(state, &x)?;
    let hi = (w - 1) as f64;
    let mut targets = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let mut target = PositionTarget::new(state.spec.n_branches, w, h);
        for ch in 0..state.spec.n_branches {
            for r in 0..h {
                target.coords[ch][r] = (out[[i, ch, r]] * hi).clamp(0.0, hi);
            }
        }
        target.valid = vec![true; h];
        targets.push(target);
    }
    Ok(targets)
}

/// Result of comparing analytic gradients against central finite
/// differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / denom
    }
}

/// Compare analytic gradients of the masked MSE against central finite
/// differences (step 1e-5): every head parameter plus a seeded sample of the
/// remaining tensors. Failures are reported, not thrown.
pub fn gradient_check(
    spec: &ModelSpec,
    sample: &RegSample,
    tolerance: f64,
) -> Result<GradCheckReport, ModelError> {
    let mut state = build_model(spec)?;
    if state.net.n_params() > 10_000 {
        return Err(ModelError::SpecMismatch(format!(
            "gradient check expects <= 1e4 parameters, spec has {}",
            state.net.n_params()
        )));
    }
    let refs = [sample];
    let (x, t, valid) = assemble_batch(&refs, &[false], spec);

    let (pred, cache) = forward_cached(&state, &x)?;
    let (_, dpred) = mse_loss_grad(&pred, &t, &valid)?;
    let grads = backward(&state, &cache, &dpred);

    let names = state.net.param_names();
    let n_tensors = names.len();
    let head_start = n_tensors - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9);
    let mut checks: Vec<(usize, usize)> = Vec::new();
    for ti in 0..n_tensors {
        let len = grads[ti].len();
        if ti >= head_start || len <= 48 {
            checks.extend((0..len).map(|i| (ti, i)));
        } else {
            for _ in 0..48 {
                checks.push((ti, rng.gen_range(0..len)));
            }
        }
    }

    let h_step = 1e-5;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let loss_at = |st: &ModelState| -> Result<f64, ModelError> {
        let p = forward(st, &x)?;
        mse_loss(&p, &t, &valid)
    };
    for &(ti, idx) in &checks {
        let analytic = grads[ti].as_slice().expect("standard layout")[idx];
        {
            let mut views = state.net.params_mut();
            views[ti].as_slice_mut().expect("standard layout")[idx] += h_step;
        }
        let up = loss_at(&state)?;
        {
            let mut views = state.net.params_mut();
            views[ti].as_slice_mut().expect("standard layout")[idx] -= 2.0 * h_step;
        }
        let down = loss_at(&state)?;
        {
            let mut views = state.net.params_mut();
            views[ti].as_slice_mut().expect("standard layout")[idx] += h_step;
        }
        let numeric = (up - down) / (2.0 * h_step);
        let e = rel_err(analytic, numeric);
        if e > max_rel {
            max_rel = e;
            worst = format!("{}[{idx}]", names[ti]);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        n_checked: checks.len(),
        tolerance,
        passed: max_rel < tolerance,
    })
}

/// Raw per-tensor gradients for one sample, in parameter order. Exposed for
/// the gradient-check suites.
pub fn loss_gradients(
    state: &ModelState,
    sample: &RegSample,
) -> Result<Vec<ndarray::ArrayD<f64>>, ModelError> {
    let refs = [sample];
    let (x, t, valid) = assemble_batch(&refs, &[false], &state.spec);
    let (pred, cache) = forward_cached(state, &x)?;
    let (_, dpred) = mse_loss_grad(&pred, &t, &valid)?;
    Ok(backward(state, &cache, &dpred))
}

/// Write spec, parameters, optimizer moments and step counter.
pub fn save_model(path: &std::path::Path, state: &ModelState) -> Result<(), ModelError> {
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

pub fn load_model(path: &std::path::Path) -> Result<ModelState, ModelError> {
    let loaded = load_checkpoint(path)?;
    if loaded.kind != CHECKPOINT_KIND {
        return Err(ModelError::Checkpoint {
            path: path.display().to_string(),
            message: format!("expected kind {CHECKPOINT_KIND}, found {}", loaded.kind),
        });
    }
    let spec: ModelSpec = serde_json::from_value(loaded.spec.clone()).map_err(|e| {
        ModelError::Checkpoint {
            path: path.display().to_string(),
            message: format!("spec: {e}"),
        }
    })?;
    let mut state = build_model(&spec)?;
    restore_network(path, &loaded, &mut state.net, &mut state.opt)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input: (1, 16, 16),
            backbone: vec![4, 8],
            dense1: Some(32),
            dense2: Some(16),
            n_branches: 1,
            seed: 11,
        }
    }

    fn smooth_sample(spec: &ModelSpec, id: &str, phase: f64) -> RegSample {
        let (c, h, w) = spec.input;
        let image = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            (0.3 + 0.1 * ci as f64 + (x as f64 * 0.4 + y as f64 * 0.2 + phase).sin() * 0.2).abs()
        });
        let coords = Array2::from_shape_fn((spec.n_branches, h), |(b, r)| {
            0.5 + 0.3 * ((r as f64 / h as f64) * std::f64::consts::PI + phase + b as f64).sin()
                * 0.5
        });
        RegSample {
            id: id.into(),
            image,
            coords,
            valid: vec![true; h],
        }
    }

    #[test]
    fn build_is_deterministic_with_zero_biases() {
        let spec = tiny_spec();
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        assert_eq!(a.net, b.net);
        for conv in &a.net.convs {
            assert!(conv.bias.iter().all(|&v| v == 0.0));
        }
        for d in &a.net.hidden {
            assert!(d.bias.iter().all(|&v| v == 0.0));
        }
        assert!(a.net.head.bias.iter().all(|&v| v == 0.0));
        let mut spec2 = spec;
        spec2.seed = 12;
        let c = build_model(&spec2).unwrap();
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn head_shape_matches_n_times_h() {
        let spec = ModelSpec {
            input: (3, 64, 64),
            backbone: vec![4, 8],
            dense1: Some(16),
            dense2: Some(8),
            n_branches: 2,
            seed: 0,
        };
        let st = build_model(&spec).unwrap();
        assert_eq!(st.net.head.weight.dim().0, 128);
        let x = Array4::zeros((8, 3, 64, 64));
        let y = forward(&st, &x).unwrap();
        assert_eq!(y.dim(), (8, 2, 64));
    }

    #[test]
    fn zero_weight_model_outputs_head_bias() {
        let spec = tiny_spec();
        let mut st = build_model(&spec).unwrap();
        for mut p in st.net.params_mut() {
            p.fill(0.0);
        }
        let x = Array4::from_elem((1, 1, 16, 16), 0.7);
        let y = forward(&st, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_head_weights_doubles_output() {
        // With zero biases the hidden activations are frozen features of the
        // input, so the linear head scales its output with its weights.
        let spec = tiny_spec();
        let mut st = build_model(&spec).unwrap();
        let x = Array4::from_shape_fn((1, 1, 16, 16), |(_, _, y, xi)| {
            ((y * 16 + xi) as f64 * 0.05).sin().abs()
        });
        let y1 = forward(&st, &x).unwrap();
        st.net.head.weight *= 2.0;
        let y2 = forward(&st, &x).unwrap();
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_examples() {
        let pred = Array3::from_shape_vec((1, 1, 2), vec![0.6, 0.3]).unwrap();
        let target = Array3::from_shape_vec((1, 1, 2), vec![0.5, 0.4]).unwrap();
        let valid = Array2::from_elem((1, 2), true);
        let loss = mse_loss(&pred, &target, &valid).unwrap();
        assert!((loss - 0.01).abs() < 1e-15);
        assert_eq!(mse_loss(&pred, &pred, &valid).unwrap(), 0.0);
        let none = Array2::from_elem((1, 2), false);
        assert!(matches!(
            mse_loss(&pred, &target, &none),
            Err(ModelError::EmptyLoss)
        ));
    }

    #[test]
    fn masking_worse_half_decreases_loss() {
        // Rows 0..4 carry error 0.1, rows 4..8 carry error 0.3. Brute force
        // both partitions.
        let h = 8;
        let target = Array3::zeros((1, 1, h));
        let mut pred = Array3::zeros((1, 1, h));
        for r in 0..h {
            pred[[0, 0, r]] = if r < 4 { 0.1 } else { 0.3 };
        }
        let all = Array2::from_elem((1, h), true);
        let full = mse_loss(&pred, &target, &all).unwrap();
        let good_half = Array2::from_shape_fn((1, h), |(_, r)| r < 4);
        let bad_half = Array2::from_shape_fn((1, h), |(_, r)| r >= 4);
        let good = mse_loss(&pred, &target, &good_half).unwrap();
        let bad = mse_loss(&pred, &target, &bad_half).unwrap();
        assert!(good < full && full < bad);
    }

    #[test]
    fn overfit_single_sample() {
        let spec = tiny_spec();
        let sample = smooth_sample(&spec, "s0", 0.0);
        let mut cfg = TrainConfig::new(300, 3e-3, 5);
        cfg.batch_size = 1;
        cfg.hflip = false;
        let (state, hist) = train(&spec, &[sample.clone()], &[sample.clone()], &cfg).unwrap();
        assert!(
            hist.best_val_loss < 1e-4,
            "memorization loss {}",
            hist.best_val_loss
        );
        // Memorized sample predicts within a pixel per row.
        let pred = predict_positions(&state, &sample.image).unwrap();
        let w = spec.input.2;
        for r in 0..spec.input.1 {
            let expect = sample.coords[[0, r]] * (w - 1) as f64;
            assert!(
                (pred.coords[0][r] - expect).abs() < 1.0,
                "row {r}: {} vs {expect}",
                pred.coords[0][r]
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = tiny_spec();
        let data: Vec<RegSample> = (0..6)
            .map(|i| smooth_sample(&spec, &format!("s{i}"), i as f64))
            .collect();
        let cfg = TrainConfig::new(3, 1e-3, 9);
        let (_, h1) = train(&spec, &data, &data[..2], &cfg).unwrap();
        let (_, h2) = train(&spec, &data, &data[..2], &cfg).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn hflip_changes_training_on_asymmetric_data() {
        let spec = tiny_spec();
        // Branch hugging the left edge → flipping matters.
        let data: Vec<RegSample> = (0..6)
            .map(|i| {
                let mut s = smooth_sample(&spec, &format!("s{i}"), i as f64);
                s.coords.mapv_inplace(|v| v * 0.2);
                s
            })
            .collect();
        let mut cfg = TrainConfig::new(3, 1e-3, 9);
        cfg.hflip = true;
        let (_, with) = train(&spec, &data, &data[..2], &cfg).unwrap();
        cfg.hflip = false;
        let (_, without) = train(&spec, &data, &data[..2], &cfg).unwrap();
        assert_ne!(with, without);
    }

    #[test]
    fn gradient_check_linear_only_model() {
        // No backbone, no hidden layers: the loss is exactly quadratic in
        // the head parameters, so central differences are exact to rounding.
        let spec = ModelSpec {
            input: (1, 4, 4),
            backbone: vec![],
            dense1: None,
            dense2: None,
            n_branches: 1,
            seed: 3,
        };
        let sample = smooth_sample(&spec, "s", 0.3);
        let report = gradient_check(&spec, &sample, 1e-7).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {}",
            report.max_rel_err, report.worst_param
        );
    }

    #[test]
    fn gradient_check_full_small_model() {
        let spec = ModelSpec {
            input: (2, 8, 8),
            backbone: vec![3, 4],
            dense1: Some(12),
            dense2: Some(8),
            n_branches: 1,
            seed: 21,
        };
        let sample = smooth_sample(&spec, "s", 1.1);
        let report = gradient_check(&spec, &sample, 1e-4).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {}",
            report.max_rel_err, report.worst_param
        );
    }

    #[test]
    fn zero_input_kills_deep_conv_gradients() {
        let spec = ModelSpec {
            input: (1, 8, 8),
            backbone: vec![3, 4],
            dense1: Some(8),
            dense2: None,
            n_branches: 1,
            seed: 2,
        };
        let sample = RegSample {
            id: "zero".into(),
            image: Array3::zeros((1, 8, 8)),
            coords: Array2::from_elem((1, 8), 0.5),
            valid: vec![true; 8],
        };
        let state = build_model(&spec).unwrap();
        let grads = loss_gradients(&state, &sample).unwrap();
        // With zero input and zero conv biases, every activation feeding the
        // second conv is zero, so its weight gradient vanishes.
        let conv1_w = &grads[2];
        assert!(conv1_w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_positions_connected_and_clamped() {
        let spec = tiny_spec();
        let st = build_model(&spec).unwrap();
        let noise = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| {
            ((x * 31 + y * 17) % 97) as f64 / 97.0
        });
        let t = predict_positions(&st, &noise).unwrap();
        assert!(t.valid.iter().all(|&v| v));
        for r in 0..16 {
            assert!(t.coords[0][r] >= 0.0 && t.coords[0][r] <= 15.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.ckpt");
        let spec = tiny_spec();
        let sample = smooth_sample(&spec, "s0", 0.0);
        let mut cfg = TrainConfig::new(2, 1e-3, 5);
        cfg.batch_size = 1;
        let (state, _) = train(&spec, &[sample.clone()], &[sample.clone()], &cfg).unwrap();
        save_model(&path, &state).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.spec, state.spec);
        assert_eq!(back.net, state.net);
        assert_eq!(back.opt, state.opt);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let st = build_model(&tiny_spec()).unwrap();
        let x = Array4::zeros((1, 1, 8, 8));
        assert!(matches!(
            forward(&st, &x),
            Err(ModelError::ShapeError(_))
        ));
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = tiny_spec();
        spec.dense1 = Some(0);
        assert!(matches!(
            build_model(&spec),
            Err(ModelError::SpecMismatch(_))
        ));
        let mut spec = tiny_spec();
        spec.n_branches = 0;
        assert!(build_model(&spec).is_err());
    }

    #[test]
    fn non_finite_loss_reports_divergence_with_epoch() {
        let spec = tiny_spec();
        let mut sample = smooth_sample(&spec, "s0", 0.0);
        sample.image[[0, 3, 3]] = f64::NAN;
        let mut cfg = TrainConfig::new(5, 1e-3, 5);
        cfg.batch_size = 1;
        cfg.hflip = false;
        match train(&spec, &[sample.clone()], &[sample], &cfg) {
            Err(ModelError::DivergenceDetected { epoch, .. }) => {
                assert_eq!(epoch, Some(0));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let spec = tiny_spec();
        let cfg = TrainConfig::new(1, 1e-3, 0);
        assert!(matches!(
            train(&spec, &[], &[], &cfg),
            Err(ModelError::EmptyDataset)
        ));
    }
}
