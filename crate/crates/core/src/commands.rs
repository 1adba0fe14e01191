//! Reproducible workflows over a shared [`RunConfig`]: dataset generation,
//! training, evaluation, prediction and overlay rendering.
//!
//! Every command is a pure function of (config, disk state, seeds): reruns
//! produce byte-identical manifests, checkpoints and metric reports. Stage
//! timings are the one unavoidable exception and therefore live in their own
//! `timing.json`, outside the determinism guarantee.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotation::split_cv_groups;
use crate::config::{ConfigError, RunConfig};
use crate::curvefit::{mask_to_positions_with, CurveFitError};
use crate::dataset::{
    self, image_tensor, load_manifest, read_sample, save_manifest, to_reg_sample, to_seg_sample,
    DatasetError, LoadedSample, Manifest,
};
use crate::metrics::{
    aggregate_report, rmse_with_gap_fill, stratify_by_occlusion, timed, BucketStat, EvalRecord,
    EvalReport, Method, MetricError, StageTimings,
};
use crate::nn::{EpochStats, ModelError, TrainHistory};
use crate::regressor::{self, predict_positions, predict_positions_batch, ModelSpec};
use crate::segbaseline::{self, segment, segment_batch, SegSpec, SegVariant};
use crate::synthdata::{generate_scene, rasterize_with, OcclusionRegime, RasterOptions, SynthError};
use crate::target::PositionTarget;

/// Errors surfaced by commands, classified for process exit codes:
/// 2 validation, 3 divergence, 4 I/O.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            DatasetError::Format { .. } => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::DivergenceDetected { .. } => CliError::Divergence(e.to_string()),
            ModelError::Checkpoint { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<crate::annotation::AnnotationError> for CliError {
    fn from(e: crate::annotation::AnnotationError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_cli(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Trainable model selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hob,
    SegVisible,
    SegWhole,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Hob, ModelKind::SegVisible, ModelKind::SegWhole];

    pub fn file_stem(self) -> &'static str {
        match self {
            ModelKind::Hob => "hob",
            ModelKind::SegVisible => "seg_visible",
            ModelKind::SegWhole => "seg_whole",
        }
    }

    pub fn method(self) -> Method {
        match self {
            ModelKind::Hob => Method::HobCnn,
            ModelKind::SegVisible => Method::VisibleCf,
            ModelKind::SegWhole => Method::WholeCf,
        }
    }
}

pub fn checkpoint_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.checkpoint_dir.join(format!("{}.ckpt", kind.file_stem()))
}

pub fn history_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.checkpoint_dir
        .join(format!("{}_history.json", kind.file_stem()))
}

/// Largest-remainder apportionment of `count` scenes over the regime mix.
fn regime_schedule(cfg: &RunConfig) -> Vec<OcclusionRegime> {
    let count = cfg.scene.count;
    let mix = cfg.scene.regime_mix;
    let regimes = [
        (OcclusionRegime::None, mix.none),
        (OcclusionRegime::Medium, mix.medium),
        (OcclusionRegime::Heavy, mix.heavy),
    ];
    let mut floors: Vec<(OcclusionRegime, usize, f64)> = regimes
        .iter()
        .map(|&(r, f)| {
            let exact = f * count as f64;
            (r, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = floors.iter().map(|(_, n, _)| n).sum();
    while assigned < count {
        // Stable order on ties: none, medium, heavy.
        let best = floors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .2.partial_cmp(&b.1 .2).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("three regimes");
        floors[best].1 += 1;
        floors[best].2 = -1.0;
        assigned += 1;
    }
    let mut schedule = Vec::with_capacity(count);
    for (regime, n, _) in floors {
        schedule.extend(std::iter::repeat(regime).take(n));
    }
    schedule
}

/// Generate the dataset and its cross-validation manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.dataset_root).map_err(io_cli(&cfg.dataset_root))?;
    let schedule = regime_schedule(cfg);
    let opts = RasterOptions {
        depth: cfg.scene.depth_channel,
    };
    let mut metas = Vec::with_capacity(cfg.scene.count);
    let mut ids = Vec::with_capacity(cfg.scene.count);
    for (i, &regime) in schedule.iter().enumerate() {
        let id = format!("s{i:05}");
        let seed = cfg.seeds.data.wrapping_add(i as u64);
        let scene = generate_scene(cfg.scene.kind, cfg.scene.canvas, regime, seed)?;
        let bundle = rasterize_with(&scene, opts);
        let meta = dataset::write_sample(&cfg.dataset_root, &id, &scene, &bundle, regime)?;
        metas.push(meta);
        ids.push(id);
    }
    let split = split_cv_groups(&ids, cfg.split_k, cfg.seeds.split)?;
    let manifest = Manifest::from_split(cfg.scene.kind, cfg.scene.canvas, &split, &metas);
    save_manifest(&cfg.dataset_root, &manifest)?;
    Ok(manifest)
}

/// Deterministic carve-out of a validation set from the training pool.
fn train_val_ids(cfg: &RunConfig, manifest: &Manifest) -> Result<(Vec<String>, Vec<String>), CliError> {
    let pool = manifest.ids_outside_group(cfg.cv_group);
    if pool.len() < 2 {
        return Err(CliError::Validation(format!(
            "training pool outside group {} has only {} samples",
            cfg.cv_group,
            pool.len()
        )));
    }
    let mut shuffled = pool.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.split ^ 0x5641_4c69);
    shuffled.shuffle(&mut rng);
    let n_val = ((shuffled.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, shuffled.len() - 1);
    let val = shuffled[..n_val].to_vec();
    let train = shuffled[n_val..].to_vec();
    Ok((train, val))
}

#[derive(Debug, Serialize)]
struct HistoryFile<'a> {
    model: &'a str,
    train_samples: &'a [String],
    val_samples: &'a [String],
    epochs: &'a [EpochStats],
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    error: Option<String>,
}

fn write_history(
    path: &Path,
    model: &str,
    train_ids: &[String],
    val_ids: &[String],
    epochs: &[EpochStats],
    history: Option<&TrainHistory>,
    error: Option<String>,
) -> Result<(), CliError> {
    let file = HistoryFile {
        model,
        train_samples: train_ids,
        val_samples: val_ids,
        epochs,
        best_epoch: history.map(|h| h.best_epoch),
        best_val_loss: history.map(|h| h.best_val_loss),
        error,
    };
    let bytes = serde_json::to_vec_pretty(&file)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    std::fs::write(path, bytes).map_err(io_cli(path))
}

/// Train one model on the four non-held-out groups; writes a checkpoint and
/// a history file (the history is dumped even when training diverges).
pub fn cmd_train(cfg: &RunConfig, kind: ModelKind) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(io_cli(&cfg.checkpoint_dir))?;
    let manifest = load_manifest(&cfg.dataset_root)?;
    let (train_ids, val_ids) = train_val_ids(cfg, &manifest)?;
    let load_all = |ids: &[String]| -> Result<Vec<LoadedSample>, CliError> {
        ids.iter()
            .map(|id| read_sample(&cfg.dataset_root, id).map_err(CliError::from))
            .collect()
    };
    let train_samples = load_all(&train_ids)?;
    let val_samples = load_all(&val_ids)?;

    let ckpt = checkpoint_path(cfg, kind);
    let hist_path = history_path(cfg, kind);
    let mut progress: Vec<EpochStats> = Vec::new();
    let outcome: Result<TrainHistory, ModelError> = match kind {
        ModelKind::Hob => {
            let spec = ModelSpec {
                input: cfg.model_input(),
                backbone: cfg.hob.backbone.clone(),
                dense1: cfg.hob.dense1,
                dense2: cfg.hob.dense2,
                n_branches: cfg.n_branches(),
                seed: cfg.seeds.init ^ 0x01,
            };
            let train_set: Vec<_> = train_samples.iter().map(to_reg_sample).collect();
            let val_set: Vec<_> = val_samples.iter().map(to_reg_sample).collect();
            regressor::train_with_progress(&spec, &train_set, &val_set, &cfg.train_hob, &mut progress)
                .and_then(|(state, hist)| {
                    regressor::save_model(&ckpt, &state)?;
                    Ok(hist)
                })
        }
        ModelKind::SegVisible | ModelKind::SegWhole => {
            let variant = if kind == ModelKind::SegVisible {
                SegVariant::Visible
            } else {
                SegVariant::Whole
            };
            let spec = SegSpec {
                input: cfg.model_input(),
                widths: cfg.seg.widths.clone(),
                variant,
                seed: cfg.seeds.init ^ if kind == ModelKind::SegVisible { 0x02 } else { 0x03 },
            };
            let train_set: Vec<_> = train_samples
                .iter()
                .map(|s| to_seg_sample(s, variant))
                .collect();
            let val_set: Vec<_> = val_samples
                .iter()
                .map(|s| to_seg_sample(s, variant))
                .collect();
            segbaseline::train_seg_with_progress(&spec, &train_set, &val_set, &cfg.train_seg, &mut progress)
                .and_then(|(state, hist)| {
                    segbaseline::save_model(&ckpt, &state)?;
                    Ok(hist)
                })
        }
    };
    match outcome {
        Ok(history) => {
            write_history(
                &hist_path,
                kind.file_stem(),
                &train_ids,
                &val_ids,
                &progress,
                Some(&history),
                None,
            )?;
            Ok(ckpt)
        }
        Err(e) => {
            // Dump whatever history exists before surfacing the error.
            write_history(
                &hist_path,
                kind.file_stem(),
                &train_ids,
                &val_ids,
                &progress,
                None,
                Some(e.to_string()),
            )?;
            Err(e.into())
        }
    }
}

/// Everything `cmd_evaluate` produces, in memory and on disk.
#[derive(Debug)]
pub struct EvalOutputs {
    pub report: EvalReport,
    pub records: Vec<EvalRecord>,
    pub buckets: Vec<BucketStat>,
    pub report_dir: PathBuf,
}

fn require_checkpoint(cfg: &RunConfig, kind: ModelKind) -> Result<PathBuf, CliError> {
    let path = checkpoint_path(cfg, kind);
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "checkpoint for method {} not found at {}; run `branchline train --model {}` first",
            kind.method(),
            path.display(),
            kind.file_stem()
        )));
    }
    Ok(path)
}

/// Constant-center fallback prediction used when the baseline pipeline
/// detects nothing; every ground-truth row counts as a coverage gap.
fn fallback_positions(n_branches: usize, width: usize, height: usize) -> PositionTarget {
    let mut t = PositionTarget::new(n_branches, width, height);
    let center = (width - 1) as f64 / 2.0;
    for ch in &mut t.coords {
        ch.fill(center);
    }
    t.valid = vec![true; height];
    t
}

/// Pearson r with gap filling; a constant prediction scores 0 instead of
/// erroring (the no-correlation penalty for degenerate baseline output).
fn pearson_lenient(gt: &PositionTarget, pred: &PositionTarget) -> Result<f64, CliError> {
    match crate::metrics::pearson_r_with_gap_fill(gt, pred) {
        Ok(r) => Ok(r),
        Err(MetricError::DegenerateVariance("prediction")) => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

fn error_tags(rmse: f64, sample: &LoadedSample, no_detection: bool) -> Vec<String> {
    if rmse <= 4.0 {
        return Vec::new();
    }
    let mut tags = Vec::new();
    if no_detection {
        tags.push("no_detection".to_string());
    }
    if sample.meta.occlusion_fraction >= 0.45 {
        tags.push("extremely_occluded".to_string());
    }
    if sample.meta.features.min_radius <= 1.05 {
        tags.push("thin_branch".to_string());
    }
    if sample.meta.features.max_bend_deg >= 28.0 {
        tags.push("sharp_bend".to_string());
    }
    if tags.is_empty() {
        tags.push("others".to_string());
    }
    tags
}

/// Evaluate all three methods on the held-out group and write the report
/// files.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalOutputs, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset_root)?;
    let held = manifest.ids_in_group(cfg.cv_group);
    if held.is_empty() {
        return Err(CliError::Validation(format!(
            "held-out group {} is empty",
            cfg.cv_group
        )));
    }
    let hob_path = require_checkpoint(cfg, ModelKind::Hob)?;
    let vis_path = require_checkpoint(cfg, ModelKind::SegVisible)?;
    let whole_path = require_checkpoint(cfg, ModelKind::SegWhole)?;
    let hob = regressor::load_model(&hob_path)?;
    let vis = segbaseline::load_model(&vis_path)?;
    let whole = segbaseline::load_model(&whole_path)?;
    for (state, expect) in [(&vis, SegVariant::Visible), (&whole, SegVariant::Whole)] {
        if state.spec.variant != expect {
            return Err(CliError::Validation(format!(
                "checkpoint variant mismatch: expected {}, found {}",
                expect.label(),
                state.spec.variant.label()
            )));
        }
    }

    let n_branches = cfg.n_branches();
    let (_, scan_len, coord_extent) = cfg.model_input();
    let batch = cfg.train_hob.batch_size.max(1);
    let mut records: Vec<EvalRecord> = Vec::new();
    // Inference runs batched for every method; the per-image model time is
    // the batch's wall clock divided by its size. Curve fitting is timed
    // per image.
    for chunk in held.chunks(batch) {
        let samples: Vec<LoadedSample> = chunk
            .iter()
            .map(|id| read_sample(&cfg.dataset_root, id).map_err(CliError::from))
            .collect::<Result<_, _>>()?;
        let images: Vec<_> = samples.iter().map(image_tensor).collect();
        let share = 1.0 / chunk.len() as f64;

        // Direct regression: connected by construction, no curve fitting.
        let (preds, hob_batch_ms) = timed(|| predict_positions_batch(&hob, &images));
        let preds = preds?;
        let hob_ms = hob_batch_ms * share;
        for (sample, pred) in samples.iter().zip(&preds) {
            let gt = &sample.target;
            let rmse = crate::metrics::rmse(gt, pred)?;
            let r = crate::metrics::pearson_r(gt, pred)?;
            records.push(EvalRecord {
                sample_id: sample.meta.id.clone(),
                method: Method::HobCnn,
                rmse,
                r,
                occlusion_fraction: sample.meta.occlusion_fraction,
                coverage_gaps: 0,
                timings: StageTimings {
                    model_ms: hob_ms,
                    curve_fit_ms: 0.0,
                    total_ms: hob_ms,
                },
                error_tags: error_tags(rmse, sample, false),
            });
        }

        // Segmentation + curve fitting baselines.
        for (method, state) in [(Method::VisibleCf, &vis), (Method::WholeCf, &whole)] {
            let (masks, seg_batch_ms) = timed(|| segment_batch(state, &images, 0.5));
            let masks = masks?;
            let model_ms = seg_batch_ms * share;
            for (sample, mask) in samples.iter().zip(&masks) {
                let gt = &sample.target;
                let (fit, curve_fit_ms) =
                    timed(|| mask_to_positions_with(mask, n_branches, scan_len, &cfg.curvefit));
                let (positions, gaps, no_detection) = match fit {
                    Ok((pos, diag)) => (pos, diag.gap_rows.min(gt.n_valid()), false),
                    Err(CurveFitError::NoBranchDetected) => (
                        fallback_positions(n_branches, coord_extent, scan_len),
                        gt.n_valid(),
                        true,
                    ),
                    Err(e) => return Err(CliError::Validation(e.to_string())),
                };
                let (rmse, fill_gaps) = rmse_with_gap_fill(gt, &positions)?;
                let r = pearson_lenient(gt, &positions)?;
                let coverage_gaps = if no_detection { gaps } else { fill_gaps };
                records.push(EvalRecord {
                    sample_id: sample.meta.id.clone(),
                    method,
                    rmse,
                    r,
                    occlusion_fraction: sample.meta.occlusion_fraction,
                    coverage_gaps,
                    timings: StageTimings {
                        model_ms,
                        curve_fit_ms,
                        total_ms: model_ms + curve_fit_ms,
                    },
                    error_tags: error_tags(rmse, sample, no_detection),
                });
            }
        }
    }
    // Keep records grouped per sample in manifest order.
    records.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then_with(|| a.method.cmp(&b.method))
    });

    let conditions = manifest.condition_map();
    let report = aggregate_report(&records, &conditions);
    let buckets = stratify_by_occlusion(&records, 0.05);
    write_eval_outputs(cfg, &report, &records, &buckets)?;
    Ok(EvalOutputs {
        report,
        records,
        buckets,
        report_dir: cfg.report_dir.clone(),
    })
}

#[derive(Serialize)]
struct ReportJson<'a> {
    cv_group: usize,
    held_out_count: usize,
    bucket_width: f64,
    report: &'a EvalReport,
    /// Total nearest-row gap fills per method over the held-out set.
    coverage_gap_totals: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct TimingAggregate {
    mean_model_ms: f64,
    mean_curve_fit_ms: f64,
    mean_total_ms: f64,
}

#[derive(Serialize)]
struct TimingRecord<'a> {
    sample_id: &'a str,
    method: Method,
    model_ms: f64,
    curve_fit_ms: f64,
    total_ms: f64,
}

#[derive(Serialize)]
struct TimingJson<'a> {
    note: &'static str,
    per_method: BTreeMap<String, TimingAggregate>,
    per_sample: Vec<TimingRecord<'a>>,
}

#[derive(Serialize)]
struct WorstSample<'a> {
    sample_id: &'a str,
    method: Method,
    rmse: f64,
    occlusion_fraction: f64,
    tags: &'a [String],
}

fn write_eval_outputs(
    cfg: &RunConfig,
    report: &EvalReport,
    records: &[EvalRecord],
    buckets: &[BucketStat],
) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.report_dir).map_err(io_cli(&cfg.report_dir))?;

    let mut gap_totals: BTreeMap<String, usize> = BTreeMap::new();
    for rec in records {
        *gap_totals.entry(rec.method.to_string()).or_default() += rec.coverage_gaps;
    }

    let report_json = cfg.report_dir.join("report.json");
    let body = ReportJson {
        cv_group: cfg.cv_group,
        held_out_count: records.len() / Method::ALL.len(),
        bucket_width: 0.05,
        report,
        coverage_gap_totals: gap_totals,
    };
    let bytes = serde_json::to_vec_pretty(&body)
        .map_err(|e| CliError::Io(format!("{}: {e}", report_json.display())))?;
    std::fs::write(&report_json, bytes).map_err(io_cli(&report_json))?;

    // Table-shaped CSV: metric x condition rows, method columns.
    let report_csv = cfg.report_dir.join("report.csv");
    {
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(&report_csv).map_err(io_cli(&report_csv))?);
        writeln!(out, "metric,condition,visible_cf,whole_cf,hob_cnn").map_err(io_cli(&report_csv))?;
        let mut conditions: Vec<&str> = Vec::new();
        for row in &report.rows {
            if !conditions.contains(&row.condition.as_str()) {
                conditions.push(&row.condition);
            }
        }
        for metric in ["rmse", "r"] {
            for cond in &conditions {
                let mut line = format!("{metric},{cond}");
                for method in [Method::VisibleCf, Method::WholeCf, Method::HobCnn] {
                    let cell = report
                        .rows
                        .iter()
                        .find(|r| r.method == method && r.condition == *cond)
                        .map(|r| {
                            if metric == "rmse" {
                                format!("{:.3}±{:.3}", r.mean_rmse, r.std_rmse)
                            } else {
                                format!("{:.3}±{:.3}", r.mean_r, r.std_r)
                            }
                        })
                        .unwrap_or_default();
                    line.push(',');
                    line.push_str(&cell);
                }
                writeln!(out, "{line}").map_err(io_cli(&report_csv))?;
            }
        }
    }

    let records_csv = cfg.report_dir.join("records.csv");
    {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(&records_csv).map_err(io_cli(&records_csv))?,
        );
        writeln!(
            out,
            "sample_id,method,rmse,r,occlusion_fraction,coverage_gaps,error_tags"
        )
        .map_err(io_cli(&records_csv))?;
        for rec in records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                rec.sample_id,
                rec.method,
                rec.rmse,
                rec.r,
                rec.occlusion_fraction,
                rec.coverage_gaps,
                rec.error_tags.join(";")
            )
            .map_err(io_cli(&records_csv))?;
        }
    }

    let buckets_csv = cfg.report_dir.join("buckets.csv");
    {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(&buckets_csv).map_err(io_cli(&buckets_csv))?,
        );
        writeln!(
            out,
            "bucket_lo,bucket_hi,method,count,mean_rmse,std_rmse,mean_r,std_r"
        )
        .map_err(io_cli(&buckets_csv))?;
        for b in buckets {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                b.bucket_lo,
                b.bucket_hi,
                b.method,
                b.count,
                b.mean_rmse,
                b.std_rmse,
                b.mean_r,
                b.std_r
            )
            .map_err(io_cli(&buckets_csv))?;
        }
    }

    // Worst predictions exported for error-category tagging.
    let worst_json = cfg.report_dir.join("worst_samples.json");
    {
        let mut worst: Vec<WorstSample<'_>> = records
            .iter()
            .filter(|r| r.rmse > 4.0)
            .map(|r| WorstSample {
                sample_id: &r.sample_id,
                method: r.method,
                rmse: r.rmse,
                occlusion_fraction: r.occlusion_fraction,
                tags: &r.error_tags,
            })
            .collect();
        worst.sort_by(|a, b| {
            b.rmse
                .partial_cmp(&a.rmse)
                .unwrap()
                .then_with(|| a.sample_id.cmp(b.sample_id))
                .then_with(|| a.method.cmp(&b.method))
        });
        let bytes = serde_json::to_vec_pretty(&worst)
            .map_err(|e| CliError::Io(format!("{}: {e}", worst_json.display())))?;
        std::fs::write(&worst_json, bytes).map_err(io_cli(&worst_json))?;
    }

    // Wall-clock timings: deliberately separate from the deterministic
    // reports.
    let timing_json = cfg.report_dir.join("timing.json");
    {
        let mut per_method = BTreeMap::new();
        for method in Method::ALL {
            let of: Vec<&EvalRecord> = records.iter().filter(|r| r.method == method).collect();
            if of.is_empty() {
                continue;
            }
            let n = of.len() as f64;
            per_method.insert(
                method.to_string(),
                TimingAggregate {
                    mean_model_ms: of.iter().map(|r| r.timings.model_ms).sum::<f64>() / n,
                    mean_curve_fit_ms: of.iter().map(|r| r.timings.curve_fit_ms).sum::<f64>() / n,
                    mean_total_ms: of.iter().map(|r| r.timings.total_ms).sum::<f64>() / n,
                },
            );
        }
        let body = TimingJson {
            note: "wall-clock measurements; excluded from the determinism guarantee",
            per_method,
            per_sample: records
                .iter()
                .map(|r| TimingRecord {
                    sample_id: &r.sample_id,
                    method: r.method,
                    model_ms: r.timings.model_ms,
                    curve_fit_ms: r.timings.curve_fit_ms,
                    total_ms: r.timings.total_ms,
                })
                .collect(),
        };
        let bytes = serde_json::to_vec_pretty(&body)
            .map_err(|e| CliError::Io(format!("{}: {e}", timing_json.display())))?;
        std::fs::write(&timing_json, bytes).map_err(io_cli(&timing_json))?;
    }
    Ok(())
}

/// Predict positions for one sample with the trained regressor; writes a
/// `target.csv`-format file and returns its path.
pub fn cmd_predict(
    cfg: &RunConfig,
    sample_id: &str,
    out: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let path = require_checkpoint(cfg, ModelKind::Hob)?;
    let state = regressor::load_model(&path)?;
    let sample = read_sample(&cfg.dataset_root, sample_id)?;
    let img = image_tensor(&sample);
    let pred = predict_positions(&state, &img)?;
    let out = out.unwrap_or_else(|| {
        cfg.report_dir
            .join("predictions")
            .join(format!("{sample_id}_hob_cnn.csv"))
    });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(io_cli(parent))?;
    }
    pred.save_csv(&out)
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(out)
}

/// Run the curve-fitting pipeline directly on a 1-bit mask PNG; writes the
/// positions CSV and the fit diagnostics JSON next to it.
pub fn cmd_curvefit_mask(
    cfg: &RunConfig,
    mask_path: &Path,
    out_dir: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let mask = crate::mask::MaskImage::load_png(mask_path)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let dir = out_dir.unwrap_or_else(|| cfg.report_dir.join("baseline"));
    std::fs::create_dir_all(&dir).map_err(io_cli(&dir))?;
    let stem = mask_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mask")
        .to_string();
    let (positions, diag) =
        mask_to_positions_with(&mask, cfg.n_branches(), mask.height(), &cfg.curvefit)
            .map_err(|e| CliError::Validation(e.to_string()))?;
    let pos_path = dir.join(format!("{stem}_positions.csv"));
    positions
        .save_csv(&pos_path)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let diag_path = dir.join(format!("{stem}_diagnostics.json"));
    let bytes = serde_json::to_vec_pretty(&diag)
        .map_err(|e| CliError::Io(format!("{}: {e}", diag_path.display())))?;
    std::fs::write(&diag_path, bytes).map_err(io_cli(&diag_path))?;
    Ok(dir)
}

/// Run one segmentation variant plus curve fitting on a sample; writes the
/// binary mask, the positions CSV and the fit diagnostics JSON.
pub fn cmd_baseline(
    cfg: &RunConfig,
    kind: ModelKind,
    sample_id: &str,
    out_dir: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    if kind == ModelKind::Hob {
        return Err(CliError::Validation(
            "baseline expects seg_visible or seg_whole".into(),
        ));
    }
    let path = require_checkpoint(cfg, kind)?;
    let state = segbaseline::load_model(&path)?;
    let sample = read_sample(&cfg.dataset_root, sample_id)?;
    let img = image_tensor(&sample);
    let (_, scan_len, _) = cfg.model_input();
    let mask = segment(&state, &img, 0.5)?;
    let dir = out_dir.unwrap_or_else(|| cfg.report_dir.join("baseline"));
    std::fs::create_dir_all(&dir).map_err(io_cli(&dir))?;
    let stem = format!("{sample_id}_{}", kind.file_stem());
    let mask_path = dir.join(format!("{stem}_mask.png"));
    mask.save_png(&mask_path)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let (positions, diag) =
        mask_to_positions_with(&mask, cfg.n_branches(), scan_len, &cfg.curvefit)
            .map_err(|e| CliError::Validation(e.to_string()))?;
    let pos_path = dir.join(format!("{stem}_positions.csv"));
    positions
        .save_csv(&pos_path)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let diag_path = dir.join(format!("{stem}_diagnostics.json"));
    let bytes = serde_json::to_vec_pretty(&diag)
        .map_err(|e| CliError::Io(format!("{}: {e}", diag_path.display())))?;
    std::fs::write(&diag_path, bytes).map_err(io_cli(&diag_path))?;
    Ok(dir)
}

fn draw_target(img: &mut RgbImage, t: &PositionTarget, scans_rows: bool, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut put = |x: f64, y: f64| {
        let (px, py) = if scans_rows { (x, y) } else { (y, x) };
        let (px, py) = (px.round() as i64, py.round() as i64);
        if px >= 0 && py >= 0 && px < w && py < h {
            img.put_pixel(px as u32, py as u32, Rgb(color));
        }
    };
    for ch in &t.coords {
        let mut prev: Option<(f64, f64)> = None;
        for r in 0..t.height {
            if !t.valid[r] {
                prev = None;
                continue;
            }
            let cur = (ch[r], r as f64);
            if let Some((px, py)) = prev {
                let steps = ((cur.0 - px).abs().max(cur.1 - py) as usize).max(1);
                for s in 0..=steps {
                    let f = s as f64 / steps as f64;
                    put(px + (cur.0 - px) * f, py + (cur.1 - py) * f);
                }
            } else {
                put(cur.0, cur.1);
            }
            prev = Some(cur);
        }
    }
}

/// Overlay ground truth (red) and predictions (yellow) on the sample image.
/// Ground truth is drawn last, so a perfect prediction shows pure red.
pub fn cmd_render(
    cfg: &RunConfig,
    sample_id: &str,
    prediction_csvs: &[PathBuf],
    out: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let sample = read_sample(&cfg.dataset_root, sample_id)?;
    let scans_rows = sample.meta.kind.scans_rows();
    let coord_extent = sample.target.width;
    let mut img = sample.image.clone();
    for csv in prediction_csvs {
        let pred = PositionTarget::load_csv(csv, coord_extent)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        draw_target(&mut img, &pred, scans_rows, [255, 255, 0]);
    }
    draw_target(&mut img, &sample.target, scans_rows, [255, 0, 0]);
    let out = out.unwrap_or_else(|| {
        cfg.report_dir
            .join("overlays")
            .join(format!("{sample_id}.png"))
    });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(io_cli(parent))?;
    }
    img.save(&out)
        .map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    Ok(out)
}

/// generate → train all three models → evaluate.
pub fn cmd_all(cfg: &RunConfig) -> Result<EvalOutputs, CliError> {
    cmd_generate(cfg)?;
    for kind in ModelKind::ALL {
        cmd_train(cfg, kind)?;
    }
    cmd_evaluate(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RegimeMix, SceneConfig, Seeds};
    use crate::nn::TrainConfig;
    use crate::synthdata::SceneKind;

    pub(crate) fn small_config(base: &Path) -> RunConfig {
        RunConfig {
            dataset_root: base.join("dataset"),
            checkpoint_dir: base.join("ckpt"),
            report_dir: base.join("reports"),
            scene: SceneConfig {
                kind: SceneKind::YShaped,
                canvas: (32, 32),
                count: 25,
                regime_mix: RegimeMix {
                    none: 0.4,
                    medium: 0.28,
                    heavy: 0.32,
                },
                depth_channel: false,
            },
            split_k: 5,
            cv_group: 1,
            hob: crate::config::HobConfig {
                backbone: vec![4, 8],
                dense1: Some(32),
                dense2: Some(16),
            },
            seg: crate::config::SegConfig {
                widths: vec![4, 8, 12],
            },
            train_hob: TrainConfig {
                batch_size: 4,
                hflip: true,
                ..TrainConfig::new(2, 1e-3, 7)
            },
            train_seg: TrainConfig {
                batch_size: 4,
                hflip: true,
                ..TrainConfig::new(2, 2e-3, 8)
            },
            curvefit: crate::curvefit::CurveFitConfig {
                min_blob_area: 20,
                ..Default::default()
            },
            seeds: Seeds {
                data: 100,
                split: 200,
                init: 300,
            },
            val_fraction: 0.15,
        }
    }

    #[test]
    fn regime_schedule_respects_mix() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.scene.count = 100;
        cfg.scene.regime_mix = RegimeMix {
            none: 0.5,
            medium: 0.25,
            heavy: 0.25,
        };
        let schedule = regime_schedule(&cfg);
        assert_eq!(schedule.len(), 100);
        let count = |r: OcclusionRegime| schedule.iter().filter(|&&x| x == r).count();
        assert_eq!(count(OcclusionRegime::None), 50);
        assert_eq!(count(OcclusionRegime::Medium), 25);
        assert_eq!(count(OcclusionRegime::Heavy), 25);
    }

    #[test]
    fn regime_schedule_rounds_within_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.scene.count = 23;
        let schedule = regime_schedule(&cfg);
        assert_eq!(schedule.len(), 23);
        let count = |r: OcclusionRegime| schedule.iter().filter(|&&x| x == r).count() as f64;
        assert!((count(OcclusionRegime::None) - 0.4 * 23.0).abs() <= 1.0);
        assert!((count(OcclusionRegime::Medium) - 0.28 * 23.0).abs() <= 1.0);
        assert!((count(OcclusionRegime::Heavy) - 0.32 * 23.0).abs() <= 1.0);
    }
}
