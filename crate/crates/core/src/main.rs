//! `branchline` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use branchline::commands::{
    cmd_all, cmd_baseline, cmd_evaluate, cmd_generate, cmd_predict, cmd_render, cmd_train,
    CliError, ModelKind,
};
use branchline::config::{RunConfig, Seeds};

#[derive(Parser)]
#[command(
    name = "branchline",
    version,
    about = "Branch centerline prediction on synthetic orchard scenes: dataset generation, regression and segmentation training, curve-fitting baselines, evaluation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Derive all seeds (data, split, init, training) from this base value.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the held-out cross-validation group.
    #[arg(long)]
    cv_group: Option<usize>,
    /// Override the report output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModelArg {
    Hob,
    SegVisible,
    SegWhole,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Hob => ModelKind::Hob,
            ModelArg::SegVisible => ModelKind::SegVisible,
            ModelArg::SegWhole => ModelKind::SegWhole,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its cross-validation manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on the groups outside the held-out group.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Predict per-row positions for one sample with the trained regressor.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Run a segmentation variant plus curve fitting on one sample, or the
    /// curve-fitting stage alone on a 1-bit mask PNG.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, required_unless_present = "mask")]
        model: Option<ModelArg>,
        #[arg(long, required_unless_present = "mask")]
        sample: Option<String>,
        /// Skip segmentation and fit curves directly to this mask PNG.
        #[arg(long, conflicts_with_all = ["model", "sample"])]
        mask: Option<PathBuf>,
    },
    /// Evaluate all three methods on the held-out group.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Overlay ground truth (red) and predictions (yellow) on a sample.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sample: String,
        /// Prediction CSV files to overlay; may be given multiple times.
        #[arg(long = "pred")]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// generate, then train every model, then evaluate.
    All {
        #[command(flatten)]
        common: Common,
    },
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(base) = common.seed {
        cfg.seeds = Seeds {
            data: splitmix64(base ^ 1),
            split: splitmix64(base ^ 2),
            init: splitmix64(base ^ 3),
        };
        cfg.train_hob.seed = splitmix64(base ^ 4);
        cfg.train_seg.seed = splitmix64(base ^ 5);
    }
    if let Some(g) = common.cv_group {
        cfg.cv_group = g;
    }
    if let Some(out) = &common.out {
        cfg.report_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let manifest = cmd_generate(&cfg)?;
            println!(
                "generated {} samples into {} ({} groups)",
                manifest.samples.len(),
                cfg.dataset_root.display(),
                manifest.k
            );
        }
        Command::Train { common, model } => {
            let cfg = load_config(&common)?;
            let kind = ModelKind::from(model);
            let path = cmd_train(&cfg, kind)?;
            println!("trained {} -> {}", kind.file_stem(), path.display());
        }
        Command::Predict {
            common,
            sample,
            out_file,
        } => {
            let cfg = load_config(&common)?;
            let path = cmd_predict(&cfg, &sample, out_file)?;
            println!("prediction -> {}", path.display());
        }
        Command::Baseline {
            common,
            model,
            sample,
            mask,
        } => {
            let cfg = load_config(&common)?;
            let dir = match mask {
                Some(mask_path) => {
                    branchline::commands::cmd_curvefit_mask(&cfg, &mask_path, None)?
                }
                None => {
                    let (model, sample) = (model.expect("clap enforces"), sample.expect("clap enforces"));
                    cmd_baseline(&cfg, ModelKind::from(model), &sample, None)?
                }
            };
            println!("baseline outputs -> {}", dir.display());
        }
        Command::Evaluate { common } => {
            let cfg = load_config(&common)?;
            let out = cmd_evaluate(&cfg)?;
            println!(
                "evaluated {} held-out samples; reports -> {}",
                out.records.len() / 3,
                out.report_dir.display()
            );
            for row in &out.report.rows {
                println!(
                    "  {:<11} {:<7} rmse {:.3}±{:.3}  r {:.3}±{:.3}  (n={})",
                    row.method.to_string(),
                    row.condition,
                    row.mean_rmse,
                    row.std_rmse,
                    row.mean_r,
                    row.std_r,
                    row.count
                );
            }
        }
        Command::Render {
            common,
            sample,
            preds,
            out_file,
        } => {
            let cfg = load_config(&common)?;
            let path = cmd_render(&cfg, &sample, &preds, out_file)?;
            println!("overlay -> {}", path.display());
        }
        Command::All { common } => {
            let cfg = load_config(&common)?;
            let out = cmd_all(&cfg)?;
            println!("pipeline complete; reports -> {}", out.report_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
