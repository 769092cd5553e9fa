//! One function per subcommand. Every command validates its inputs before
//! touching the filesystem, prints the artifact digests it produced, and
//! leaves all file formats to the owning library modules.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use affpool::alignment::{AlignOptions, SliceConfig};
use affpool::corpus::{read_manifest, write_manifest, DatasetDescriptor, PooledManifest};
use affpool::evaluator::{
    affinity_distribution, affinity_svg, group_by_image, map_range, prune_pool,
    read_analysis_artifact, read_detections, read_eval_artifact, write_detections,
    write_json_artifact, AnalysisArtifact, DetectionRecord, EvalArtifact, RunSummary,
    ANALYSIS_KIND, EVAL_KIND, REPORT_VERSION,
};
use affpool::model::{Detection, DetectorConfig};
use affpool::synth::{generate_demo_corpus, CorpusSpec};
use affpool::taxonomy::load_taxonomy;
use affpool::trainer::{
    detect_record, load_checkpoint, make_subpool, save_checkpoint, train, RunConfig,
};
use affpool::{Error, Result};
use sha2::{Digest, Sha256};

use crate::config::{pick, AppConfig};

/// Effective global settings after merging flags with the config file.
pub struct Globals {
    pub seed: u64,
    pub deterministic: bool,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn read_descriptors(path: &Path) -> Result<Vec<DatasetDescriptor>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: path.to_path_buf(),
        message: format!("descriptor list: {e}"),
    })
}

fn write_descriptors(path: &Path, descriptors: &[DatasetDescriptor]) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(descriptors)?;
    bytes.push(b'\n');
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

pub struct SynthArgs {
    pub out: Option<PathBuf>,
    pub per_source: Option<usize>,
    pub eval_size: Option<usize>,
    pub holdout_size: Option<usize>,
    pub image_size: Option<u32>,
}

pub fn synth(cfg: &AppConfig, globals: &Globals, args: SynthArgs) -> Result<()> {
    let out = pick(args.out, cfg.synth.out_dir.clone(), PathBuf::from("data"));
    let spec = CorpusSpec {
        per_source: pick(args.per_source, cfg.synth.per_source, 120),
        eval_size: pick(args.eval_size, cfg.synth.eval_size, 40),
        holdout_size: pick(args.holdout_size, cfg.synth.holdout_size, 20),
        image_size: pick(args.image_size, cfg.synth.image_size, 320),
        seed: globals.seed,
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    log::info!(
        "synthesizing corpus: {} per source, {} eval, {} holdout, {}px",
        spec.per_source,
        spec.eval_size,
        spec.holdout_size,
        spec.image_size
    );
    let layout = generate_demo_corpus(&spec, &out)?;

    let taxonomy_path = out.join("taxonomy.toml");
    std::fs::write(&taxonomy_path, &layout.taxonomy_text)
        .map_err(|e| Error::io(&taxonomy_path, e))?;
    write_descriptors(&out.join("pool_sources.json"), &layout.pool)?;
    write_descriptors(&out.join("eval_sources.json"), std::slice::from_ref(&layout.eval))?;
    write_descriptors(&out.join("holdout_sources.json"), &layout.holdouts)?;

    let pool_ids: Vec<&str> = layout.pool.iter().map(|d| d.dataset_id.as_str()).collect();
    println!(
        "synth: {} pool sources ({}) x{} images, eval x{}, holdouts x{} -> {}",
        layout.pool.len(),
        pool_ids.join(", "),
        spec.per_source,
        spec.eval_size,
        spec.holdout_size,
        out.display()
    );
    Ok(())
}

pub struct AlignArgs {
    pub sources: PathBuf,
    pub taxonomy: PathBuf,
    pub out: PathBuf,
    pub images_dir: Option<PathBuf>,
    pub video_stride: Option<u64>,
    pub patch_min: Option<u32>,
    pub patch_max: Option<u32>,
    pub overlap: Option<f64>,
    pub min_box_visibility: Option<f64>,
}

pub fn align(cfg: &AppConfig, globals: &Globals, args: AlignArgs) -> Result<()> {
    let descriptors = read_descriptors(&args.sources)?;
    let taxonomy_text =
        std::fs::read_to_string(&args.taxonomy).map_err(|e| Error::io(&args.taxonomy, e))?;
    let taxonomy = load_taxonomy(&taxonomy_text)?;

    let defaults = SliceConfig::default();
    let images_dir = pick(args.images_dir, cfg.align.images_dir.clone(), {
        let parent = args
            .out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        parent.join("aligned_images")
    });
    let opts = AlignOptions {
        slice: SliceConfig {
            patch_min: pick(args.patch_min, cfg.align.patch_min, defaults.patch_min),
            patch_max: pick(args.patch_max, cfg.align.patch_max, defaults.patch_max),
            overlap_ratio: pick(args.overlap, cfg.align.overlap, defaults.overlap_ratio),
            min_box_visibility: pick(
                args.min_box_visibility,
                cfg.align.min_box_visibility,
                defaults.min_box_visibility,
            ),
            seed: globals.seed,
        },
        video_stride: pick(args.video_stride, cfg.align.video_stride, 20),
        images_dir,
        deterministic: globals.deterministic,
    };

    let raw = affpool::corpus::build_manifest(&descriptors, &taxonomy)?;
    let aligned = affpool::alignment::align_manifest(&raw, &opts)?;
    ensure_parent(&args.out)?;
    let digest = write_manifest(&aligned, &args.out)?;
    println!(
        "align: {} datasets, {} records -> {} ({digest})",
        aligned.num_datasets(),
        aligned.records.len(),
        args.out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub balanced_sampling: bool,
}

fn detector_config(cfg: &AppConfig, manifest: &PooledManifest) -> DetectorConfig {
    let defaults = DetectorConfig::default();
    DetectorConfig {
        input_size: pick(None, cfg.model.input_size, defaults.input_size),
        grid_stride: pick(None, cfg.model.grid_stride, defaults.grid_stride),
        num_classes: pick(None, cfg.model.num_classes, defaults.num_classes),
        num_datasets: manifest.num_datasets(),
        channel_widths: pick(None, cfg.model.channel_widths.clone(), defaults.channel_widths),
        ..defaults
    }
}

pub fn train_cmd(cfg: &AppConfig, globals: &Globals, args: TrainArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let detector_cfg = detector_config(cfg, &manifest);
    let run_defaults = RunConfig::default();
    let run = RunConfig {
        epochs: pick(args.epochs, cfg.train.epochs, run_defaults.epochs),
        batch_size: pick(args.batch_size, cfg.train.batch_size, run_defaults.batch_size),
        learning_rate: pick(args.learning_rate, cfg.train.learning_rate, run_defaults.learning_rate),
        weight_decay: pick(args.weight_decay, cfg.train.weight_decay, run_defaults.weight_decay),
        seed: globals.seed,
        deterministic: globals.deterministic,
        balanced_sampling: args.balanced_sampling || cfg.train.balanced_sampling.unwrap_or(false),
    };

    let outcome = train::<f32>(&manifest, &detector_cfg, &run)?;
    ensure_parent(&args.out)?;
    let digest = save_checkpoint(&outcome.detector, &outcome.meta, &args.out)?;
    let final_total = outcome.meta.final_total.unwrap_or(f64::NAN);
    println!(
        "train: {} steps over {} epochs, final loss {:.4} -> {} ({digest})",
        outcome.meta.steps,
        outcome.meta.epochs,
        final_total,
        args.out.display()
    );
    Ok(())
}

pub struct DetectArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub conf_threshold: Option<f64>,
    pub nms_iou: Option<f64>,
}

pub fn detect(cfg: &AppConfig, args: DetectArgs) -> Result<()> {
    let conf = pick(args.conf_threshold, cfg.detect.conf_threshold, 0.25);
    let nms = pick(args.nms_iou, cfg.detect.nms_iou, 0.45);
    if !(0.0..=1.0).contains(&conf) || !(0.0..=1.0).contains(&nms) {
        return Err(Error::InvalidArgument(
            "conf_threshold and nms_iou must lie in [0, 1]".into(),
        ));
    }
    let (detector, meta) = load_checkpoint::<f32>(&args.checkpoint)?;
    let checkpoint_digest = file_digest(&args.checkpoint)?;
    let manifest = read_manifest(&args.manifest)?;

    let mut records: Vec<DetectionRecord> = Vec::new();
    for record in &manifest.records {
        for det in detect_record(&detector, record, conf, nms)? {
            records.push(DetectionRecord::from_detection(&record.image_id, &det));
        }
    }
    ensure_parent(&args.out)?;
    let digest = write_detections(
        &args.out,
        &checkpoint_digest,
        &manifest.digest(),
        &meta.dataset_ids,
        &records,
    )?;
    println!(
        "detect: {} detections over {} images -> {} ({digest})",
        records.len(),
        manifest.records.len(),
        args.out.display()
    );
    Ok(())
}

/// Arrange grouped detections in ground-truth record order. Detections for
/// unknown image ids, or produced on a different manifest than the ground
/// truth given, are validation errors.
fn per_image_detections(
    manifest: &PooledManifest,
    detections_manifest_digest: &str,
    records: &[DetectionRecord],
) -> Result<Vec<Vec<Detection>>> {
    let expected = manifest.digest();
    if detections_manifest_digest != expected {
        return Err(Error::InvalidArgument(format!(
            "detections were produced on manifest {detections_manifest_digest} \
             but ground truth is {expected}"
        )));
    }
    let mut grouped = group_by_image(records);
    let dets: Vec<Vec<Detection>> = manifest
        .records
        .iter()
        .map(|r| grouped.remove(&r.image_id).unwrap_or_default())
        .collect();
    if !grouped.is_empty() {
        let stray: Vec<String> = grouped.keys().take(3).cloned().collect();
        return Err(Error::InvalidArgument(format!(
            "detections reference image ids missing from the manifest (e.g. {})",
            stray.join(", ")
        )));
    }
    Ok(dets)
}

pub struct EvalArgs {
    pub detections: PathBuf,
    pub manifest: PathBuf,
    pub out: PathBuf,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (header, records) = read_detections(&args.detections)?;
    let detections_digest = file_digest(&args.detections)?;
    let manifest = read_manifest(&args.manifest)?;
    let dets = per_image_detections(&manifest, &header.manifest_digest, &records)?;
    let scores = map_range(&dets, &manifest.records);

    let artifact = EvalArtifact {
        kind: EVAL_KIND.to_string(),
        version: REPORT_VERSION,
        detections_digest,
        manifest_digest: manifest.digest(),
        num_images: manifest.records.len(),
        scores,
    };
    ensure_parent(&args.out)?;
    let digest = write_json_artifact(&args.out, &artifact)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    println!(
        "eval: mAP@.5 {} mAP@.5:.95 {} over {} images -> {} ({digest})",
        fmt(scores.map50),
        fmt(scores.map50_95),
        artifact.num_images,
        args.out.display()
    );
    Ok(())
}

pub struct AnalyzeArgs {
    pub detections: PathBuf,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub svg: Option<PathBuf>,
    pub iou_threshold: Option<f64>,
    pub top_k: Option<usize>,
}

pub fn analyze(cfg: &AppConfig, args: AnalyzeArgs) -> Result<()> {
    let iou = pick(args.iou_threshold, cfg.analyze.iou_threshold, 0.5);
    let k = pick(args.top_k, cfg.analyze.top_k, 2);
    let (header, records) = read_detections(&args.detections)?;
    if k == 0 || k > header.num_datasets {
        return Err(Error::InvalidArgument(format!(
            "top_k must lie in 1..={}, got {k}",
            header.num_datasets
        )));
    }
    let detections_digest = file_digest(&args.detections)?;
    let manifest = read_manifest(&args.manifest)?;
    let dets = per_image_detections(&manifest, &header.manifest_digest, &records)?;
    let report = affinity_distribution(&dets, &manifest.records, header.num_datasets, iou, k);

    let artifact = AnalysisArtifact {
        kind: ANALYSIS_KIND.to_string(),
        version: REPORT_VERSION,
        detections_digest,
        checkpoint_digest: header.checkpoint_digest.clone(),
        dataset_ids: header.dataset_ids.clone(),
        iou_threshold: iou,
        report,
    };
    ensure_parent(&args.out)?;
    let digest = write_json_artifact(&args.out, &artifact)?;
    if let Some(svg_path) = &args.svg {
        ensure_parent(svg_path)?;
        let svg = affinity_svg(&artifact.report, &artifact.dataset_ids);
        std::fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    }

    let shares: Vec<String> = artifact
        .report
        .histogram
        .iter()
        .zip(&artifact.dataset_ids)
        .map(|(frac, id)| format!("{id} {:.1}%", frac * 100.0))
        .collect();
    let top_ids: Vec<&str> = artifact
        .report
        .top_k
        .iter()
        .map(|&i| artifact.dataset_ids[i].as_str())
        .collect();
    println!(
        "analyze: {} TPs [{}], top-{k}: {} -> {} ({digest})",
        artifact.report.tp_count,
        shares.join(", "),
        top_ids.join(", "),
        args.out.display()
    );
    Ok(())
}

pub struct PruneArgs {
    pub analysis: PathBuf,
    pub manifest: PathBuf,
    pub k: Option<usize>,
    pub out_top: PathBuf,
    pub out_rest: PathBuf,
}

pub fn prune(cfg: &AppConfig, args: PruneArgs) -> Result<()> {
    let analysis = read_analysis_artifact(&args.analysis)?;
    let manifest = read_manifest(&args.manifest)?;
    if analysis.dataset_ids != manifest.dataset_ids() {
        return Err(Error::InvalidArgument(format!(
            "analysis covers datasets {:?} but the manifest has {:?}",
            analysis.dataset_ids,
            manifest.dataset_ids()
        )));
    }
    let k = pick(args.k, cfg.analyze.top_k, analysis.report.top_k.len().max(1));
    if k == 0 || k >= manifest.num_datasets() {
        return Err(Error::InvalidArgument(format!(
            "k must lie in 1..{} so both subpools are nonempty, got {k}",
            manifest.num_datasets()
        )));
    }
    if analysis.report.tp_count == 0 {
        return Err(Error::InvalidArgument(
            "analysis has zero true positives; the affinity histogram is meaningless".into(),
        ));
    }
    let (top, rest) = prune_pool(&analysis.report, k);

    let top_pool = make_subpool(&manifest, &top.iter().copied().collect::<BTreeSet<_>>())?;
    let rest_pool = make_subpool(&manifest, &rest.iter().copied().collect::<BTreeSet<_>>())?;
    ensure_parent(&args.out_top)?;
    ensure_parent(&args.out_rest)?;
    let top_digest = write_manifest(&top_pool, &args.out_top)?;
    let rest_digest = write_manifest(&rest_pool, &args.out_rest)?;
    println!(
        "prune: top-{k} [{}] -> {} ({top_digest}); remainder [{}] -> {} ({rest_digest})",
        top_pool.dataset_ids().join(", "),
        args.out_top.display(),
        rest_pool.dataset_ids().join(", "),
        args.out_rest.display()
    );
    Ok(())
}

pub struct ReportArgs {
    pub runs: Vec<String>,
    pub out: Option<PathBuf>,
}

fn parse_run_spec(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let bad = || {
        Error::InvalidArgument(format!(
            "run spec {spec:?}; expected label=eval.json,analysis.json"
        ))
    };
    let (label, paths) = spec.split_once('=').ok_or_else(bad)?;
    let (eval_path, analysis_path) = paths.split_once(',').ok_or_else(bad)?;
    if label.is_empty() || eval_path.is_empty() || analysis_path.is_empty() {
        return Err(bad());
    }
    Ok((
        label.to_string(),
        PathBuf::from(eval_path),
        PathBuf::from(analysis_path),
    ))
}

pub fn report(args: ReportArgs) -> Result<()> {
    let mut runs = Vec::with_capacity(args.runs.len());
    for spec in &args.runs {
        let (label, eval_path, analysis_path) = parse_run_spec(spec)?;
        let eval = read_eval_artifact(&eval_path)?;
        let analysis = read_analysis_artifact(&analysis_path)?;
        runs.push(RunSummary {
            label,
            dataset_ids: analysis.dataset_ids,
            report: analysis.report,
            scores: eval.scores,
        });
    }
    let csv = affpool::evaluator::compare_runs(&runs)?;
    match &args.out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
            println!("report: {} runs -> {}", runs.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
