//! End-to-end pipeline tests on a small configuration: generate → train →
//! evaluate → render, plus CLI behavior.

use std::path::Path;
use std::process::Command;

use branchline::commands::{
    checkpoint_path, cmd_evaluate, cmd_generate, cmd_predict, cmd_render, cmd_train, history_path,
    ModelKind,
};
use branchline::config::{HobConfig, RegimeMix, RunConfig, SceneConfig, SegConfig, Seeds};
use branchline::dataset::load_manifest;
use branchline::metrics::Method;
use branchline::nn::TrainConfig;
use branchline::synthdata::SceneKind;

fn small_config(base: &Path) -> RunConfig {
    RunConfig {
        dataset_root: base.join("dataset"),
        checkpoint_dir: base.join("ckpt"),
        report_dir: base.join("reports"),
        scene: SceneConfig {
            kind: SceneKind::YShaped,
            canvas: (32, 32),
            count: 30,
            regime_mix: RegimeMix {
                none: 0.4,
                medium: 0.3,
                heavy: 0.3,
            },
            depth_channel: false,
        },
        split_k: 5,
        cv_group: 1,
        hob: HobConfig {
            backbone: vec![4, 8],
            dense1: Some(32),
            dense2: Some(16),
        },
        seg: SegConfig {
            widths: vec![4, 8, 12],
        },
        train_hob: TrainConfig {
            batch_size: 4,
            ..TrainConfig::new(3, 1e-3, 7)
        },
        train_seg: TrainConfig {
            batch_size: 4,
            ..TrainConfig::new(3, 2e-3, 8)
        },
        curvefit: branchline::curvefit::CurveFitConfig {
            min_blob_area: 12,
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
fn generate_partitions_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let manifest = cmd_generate(&cfg).unwrap();
    assert_eq!(manifest.samples.len(), 30);
    // 5 near-even groups.
    let mut sizes = vec![0usize; 5];
    for s in &manifest.samples {
        sizes[s.group - 1] += 1;
    }
    assert_eq!(sizes, vec![6, 6, 6, 6, 6]);
    // Regime mix honored within rounding.
    let count = |r: &str| {
        manifest
            .samples
            .iter()
            .filter(|s| s.regime.label() == r)
            .count()
    };
    assert_eq!(count("none"), 12);
    assert_eq!(count("medium"), 9);
    assert_eq!(count("heavy"), 9);
    // Every sample directory is complete.
    for s in &manifest.samples {
        let d = cfg.dataset_root.join("samples").join(&s.id);
        for f in ["image.png", "whole.png", "visible.png", "target.csv", "meta.json"] {
            assert!(d.join(f).exists(), "{}/{f} missing", d.display());
        }
    }
    // Rerun into a fresh root: byte-identical manifest.
    let manifest_bytes = std::fs::read(cfg.dataset_root.join("manifest.json")).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let mut cfg2 = small_config(dir2.path());
    cfg2.scene = cfg.scene.clone();
    cmd_generate(&cfg2).unwrap();
    let manifest_bytes2 = std::fs::read(cfg2.dataset_root.join("manifest.json")).unwrap();
    assert_eq!(manifest_bytes, manifest_bytes2);
}

#[test]
fn full_small_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let manifest = cmd_generate(&cfg).unwrap();
    for kind in ModelKind::ALL {
        cmd_train(&cfg, kind).unwrap();
        assert!(checkpoint_path(&cfg, kind).exists());
    }

    // Held-out audit: the history file lists exactly the samples outside the
    // held-out group, and none from inside it.
    let held: std::collections::BTreeSet<String> =
        manifest.ids_in_group(cfg.cv_group).into_iter().collect();
    for kind in ModelKind::ALL {
        let hist: serde_json::Value =
            serde_json::from_slice(&std::fs::read(history_path(&cfg, kind)).unwrap()).unwrap();
        let ids = |key: &str| -> Vec<String> {
            hist[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string())
                .collect()
        };
        let train_ids = ids("train_samples");
        let val_ids = ids("val_samples");
        assert_eq!(hist["epochs"].as_array().unwrap().len(), 3);
        assert!(train_ids.iter().all(|id| !held.contains(id)));
        assert!(val_ids.iter().all(|id| !held.contains(id)));
        let mut all: Vec<String> = train_ids.into_iter().chain(val_ids).collect();
        all.sort();
        let mut expect = manifest.ids_outside_group(cfg.cv_group);
        expect.sort();
        assert_eq!(all, expect);
    }

    let out = cmd_evaluate(&cfg).unwrap();
    // 6 held-out samples × 3 methods.
    assert_eq!(out.records.len(), held.len() * 3);
    let methods: std::collections::BTreeSet<Method> =
        out.records.iter().map(|r| r.method).collect();
    assert_eq!(methods.len(), 3);
    // Evaluation only touched held-out samples.
    assert!(out.records.iter().all(|r| held.contains(&r.sample_id)));

    // Timing structure: no curve-fit stage for the regressor, a positive one
    // for both baselines; totals are additive.
    for r in &out.records {
        match r.method {
            Method::HobCnn => {
                assert_eq!(r.timings.curve_fit_ms, 0.0);
                assert_eq!(r.timings.total_ms, r.timings.model_ms);
            }
            _ => {
                assert!(r.timings.curve_fit_ms > 0.0);
                assert!(
                    r.timings.total_ms >= r.timings.model_ms + r.timings.curve_fit_ms - 1e-9
                );
            }
        }
    }

    for f in [
        "report.json",
        "report.csv",
        "records.csv",
        "buckets.csv",
        "timing.json",
        "worst_samples.json",
    ] {
        assert!(cfg.report_dir.join(f).exists(), "missing report file {f}");
    }

    // The shaped CSV has method columns and rmse/r blocks.
    let report_csv = std::fs::read_to_string(cfg.report_dir.join("report.csv")).unwrap();
    assert!(report_csv.starts_with("metric,condition,visible_cf,whole_cf,hob_cnn"));
    assert!(report_csv.contains("rmse,total"));
    assert!(report_csv.contains("r,total"));

    // Prediction writes the sample CSV format.
    let sample_id = out.records[0].sample_id.clone();
    let pred_path = cmd_predict(&cfg, &sample_id, None).unwrap();
    let pred = branchline::PositionTarget::load_csv(&pred_path, 32).unwrap();
    assert_eq!(pred.n_valid(), 32);

    // Baseline artifacts.
    let base_dir =
        branchline::commands::cmd_baseline(&cfg, ModelKind::SegWhole, &sample_id, None).unwrap();
    assert!(base_dir
        .join(format!("{sample_id}_seg_whole_mask.png"))
        .exists());
    assert!(base_dir
        .join(format!("{sample_id}_seg_whole_diagnostics.json"))
        .exists());

    // Render: prediction in yellow under ground truth in red.
    let overlay = cmd_render(&cfg, &sample_id, &[pred_path], None).unwrap();
    let img = image::open(&overlay).unwrap().to_rgb8();
    assert_eq!((img.width(), img.height()), (32, 32));
    let gt = &branchline::dataset::read_sample(&cfg.dataset_root, &sample_id)
        .unwrap()
        .target;
    let r0 = gt.valid_rows().next().unwrap();
    let x0 = gt.coords[0][r0].round() as u32;
    let px = img.get_pixel(x0, r0 as u32);
    assert!(px[0] > px[1] && px[0] > px[2], "GT pixel not red-dominant: {px:?}");
}

#[test]
fn render_gt_over_itself_shows_only_red() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.scene.count = 5;
    cfg.scene.regime_mix = RegimeMix {
        none: 1.0,
        medium: 0.0,
        heavy: 0.0,
    };
    cmd_generate(&cfg).unwrap();
    let manifest = load_manifest(&cfg.dataset_root).unwrap();
    let id = &manifest.samples[0].id;
    // Use the ground-truth CSV itself as the "prediction".
    let gt_csv = cfg
        .dataset_root
        .join("samples")
        .join(id)
        .join("target.csv");
    let overlay = cmd_render(&cfg, id, &[gt_csv], None).unwrap();
    let img = image::open(&overlay).unwrap().to_rgb8();
    let yellow = img
        .pixels()
        .filter(|p| p[0] == 255 && p[1] == 255 && p[2] == 0)
        .count();
    assert_eq!(yellow, 0, "yellow pixels survived under coincident GT");
}

#[test]
fn missing_checkpoint_names_the_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_generate(&cfg).unwrap();
    let err = cmd_evaluate(&cfg).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("hob_cnn"), "error does not name the method: {msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn harder_regime_trains_to_higher_validation_loss() {
    // Paired run at equal budget: no-occlusion scenes are easier to fit
    // than heavily occluded ones.
    let run = |heavy: bool| -> f64 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.scene.count = 60;
        cfg.scene.regime_mix = if heavy {
            RegimeMix {
                none: 0.0,
                medium: 0.0,
                heavy: 1.0,
            }
        } else {
            RegimeMix {
                none: 1.0,
                medium: 0.0,
                heavy: 0.0,
            }
        };
        cfg.train_hob.epochs = 20;
        cmd_generate(&cfg).unwrap();
        cmd_train(&cfg, ModelKind::Hob).unwrap();
        let hist: serde_json::Value = serde_json::from_slice(
            &std::fs::read(history_path(&cfg, ModelKind::Hob)).unwrap(),
        )
        .unwrap();
        hist["best_val_loss"].as_f64().unwrap()
    };
    let easy = run(false);
    let hard = run(true);
    assert!(
        hard > easy,
        "expected heavy regime to be harder: none {easy} vs heavy {hard}"
    );
}

#[test]
fn cli_binary_runs_and_classifies_errors() {
    let bin = env!("CARGO_BIN_EXE_branchline");
    // Missing config → I/O exit code 4.
    let out = Command::new(bin)
        .args(["generate", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    // Invalid config (bad mix) → validation exit code 2.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.scene.regime_mix.heavy = 0.9;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let out = Command::new(bin)
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // A good config generates through the binary.
    let mut cfg = small_config(dir.path());
    cfg.scene.count = 10;
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let out = Command::new(bin)
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cfg.dataset_root.join("manifest.json").exists());
}
