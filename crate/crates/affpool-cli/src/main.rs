//! `affpool` — pool detection datasets, train a detector with a dataset
//! affinity head, and use the affinity of true positives to decide which
//! datasets the pool actually needs.
//!
//! The workflow is `synth` (or bring your own COCO-style sources) → `align`
//! → `train` → `detect` → `eval`/`analyze` → `prune` → retrain → `report`.
//! Every artifact embeds the sha256 digest of its inputs, so a report is
//! traceable to the exact manifests and checkpoints behind it.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad flags, configs, or
//! file contents), 3 on runtime failures (I/O, non-finite loss). Failures
//! print a single-line JSON error record to stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Globals;
use config::AppConfig;

#[derive(Debug, Parser)]
#[command(
    name = "affpool",
    version,
    about = "Dataset pooling for detection training, with per-detection dataset affinity"
)]
struct Cli {
    /// TOML config file with per-command sections; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed for every seeded stage (synthesis, slicing, training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Strictly serial execution for bit-reproducible artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic demo corpus: pool sources, a target-style
    /// eval set, per-source holdouts, descriptor lists, and a taxonomy.
    Synth {
        /// Output directory for datasets and descriptor files.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Training images per pool source.
        #[arg(long)]
        per_source: Option<usize>,
        /// Target-style eval images.
        #[arg(long)]
        eval_size: Option<usize>,
        /// Held-out images per source (for affinity recovery checks).
        #[arg(long)]
        holdout_size: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        image_size: Option<u32>,
    },
    /// Build an aligned manifest from dataset descriptors: taxonomy
    /// mapping, video subsampling, ignore masking, and patch slicing.
    Align {
        /// JSON file holding an array of dataset descriptors.
        #[arg(long, value_name = "PATH")]
        sources: PathBuf,
        /// Taxonomy TOML mapping (dataset, label) pairs to super-categories.
        #[arg(long, value_name = "PATH")]
        taxonomy: PathBuf,
        /// Where to write the aligned manifest (JSONL).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Directory for rewritten pixels (masked images, patches).
        #[arg(long, value_name = "DIR")]
        images_dir: Option<PathBuf>,
        /// Keep every Nth frame of video datasets.
        #[arg(long)]
        video_stride: Option<u64>,
        /// Smallest slice patch side in pixels.
        #[arg(long)]
        patch_min: Option<u32>,
        /// Largest slice patch side in pixels.
        #[arg(long)]
        patch_max: Option<u32>,
        /// Fraction of the patch side shared between neighbors, in [0, 1).
        #[arg(long)]
        overlap: Option<f64>,
        /// Keep a clipped box only if clipped/original area reaches this.
        #[arg(long)]
        min_box_visibility: Option<f64>,
    },
    /// Train the detector on a manifest and save a checkpoint.
    Train {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Where to write the checkpoint (JSON).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Oversample minority datasets so each epoch visits all equally.
        #[arg(long)]
        balanced_sampling: bool,
    },
    /// Run a checkpoint over a manifest's images and write detections
    /// (boxes, class scores, and dataset affinity vectors).
    Detect {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Manifest whose images to run on (its labels are not used).
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Where to write the detections file (JSONL).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Keep detections with objectness at or above this.
        #[arg(long)]
        conf_threshold: Option<f64>,
        /// IoU above which a lower-scoring overlapping box is suppressed.
        #[arg(long)]
        nms_iou: Option<f64>,
    },
    /// Score a detections file against a manifest's ground truth
    /// (mAP@.5 and mAP@.5:.95).
    Eval {
        #[arg(long, value_name = "PATH")]
        detections: PathBuf,
        /// Ground-truth manifest the detections were produced on.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Where to write the scores artifact (JSON).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Build the dataset-affinity histogram over true positives and the
    /// top-k / remainder split it implies.
    Analyze {
        #[arg(long, value_name = "PATH")]
        detections: PathBuf,
        /// Ground-truth manifest the detections were produced on.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Where to write the analysis artifact (JSON).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also render the histogram as an SVG bar chart.
        #[arg(long, value_name = "PATH")]
        svg: Option<PathBuf>,
        /// Matching IoU threshold for counting true positives.
        #[arg(long)]
        iou_threshold: Option<f64>,
        /// How many datasets count as the "top" of the pool.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Split a pool manifest into top-k and remainder sub-manifests,
    /// ready for retraining.
    Prune {
        /// Analysis artifact produced by `analyze`.
        #[arg(long, value_name = "PATH")]
        analysis: PathBuf,
        /// The pool manifest the analysis refers to.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Keep the k datasets with the largest TP affinity share.
        #[arg(long)]
        k: Option<usize>,
        /// Where to write the kept-datasets manifest.
        #[arg(long, value_name = "PATH")]
        out_top: PathBuf,
        /// Where to write the remainder manifest.
        #[arg(long, value_name = "PATH")]
        out_rest: PathBuf,
    },
    /// Compare runs side by side: affinity share per dataset plus both
    /// mAP scores, as CSV.
    Report {
        /// Run spec `label=eval.json,analysis.json`; repeat per run.
        #[arg(long = "run", value_name = "SPEC", required = true)]
        runs: Vec<String>,
        /// Where to write the CSV; prints to stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> affpool::Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    let globals = Globals {
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        deterministic: cli.deterministic || cfg.deterministic.unwrap_or(false),
    };
    match cli.command {
        Command::Synth { out, per_source, eval_size, holdout_size, image_size } => {
            commands::synth(
                &cfg,
                &globals,
                commands::SynthArgs { out, per_source, eval_size, holdout_size, image_size },
            )
        }
        Command::Align {
            sources,
            taxonomy,
            out,
            images_dir,
            video_stride,
            patch_min,
            patch_max,
            overlap,
            min_box_visibility,
        } => commands::align(
            &cfg,
            &globals,
            commands::AlignArgs {
                sources,
                taxonomy,
                out,
                images_dir,
                video_stride,
                patch_min,
                patch_max,
                overlap,
                min_box_visibility,
            },
        ),
        Command::Train {
            manifest,
            out,
            epochs,
            batch_size,
            learning_rate,
            weight_decay,
            balanced_sampling,
        } => commands::train_cmd(
            &cfg,
            &globals,
            commands::TrainArgs {
                manifest,
                out,
                epochs,
                batch_size,
                learning_rate,
                weight_decay,
                balanced_sampling,
            },
        ),
        Command::Detect { checkpoint, manifest, out, conf_threshold, nms_iou } => {
            commands::detect(
                &cfg,
                commands::DetectArgs { checkpoint, manifest, out, conf_threshold, nms_iou },
            )
        }
        Command::Eval { detections, manifest, out } => {
            commands::eval(commands::EvalArgs { detections, manifest, out })
        }
        Command::Analyze { detections, manifest, out, svg, iou_threshold, top_k } => {
            commands::analyze(
                &cfg,
                commands::AnalyzeArgs { detections, manifest, out, svg, iou_threshold, top_k },
            )
        }
        Command::Prune { analysis, manifest, k, out_top, out_rest } => {
            commands::prune(&cfg, commands::PruneArgs { analysis, manifest, k, out_top, out_rest })
        }
        Command::Report { runs, out } => commands::report(commands::ReportArgs { runs, out }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": {
                    "message": err.to_string(),
                    "validation": err.is_validation(),
                }
            });
            eprintln!("{record}");
            if err.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
