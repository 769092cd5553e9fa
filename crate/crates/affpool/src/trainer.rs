//! Optimization loop joining the pooled manifest, alignment, and the model.
//!
//! [`train`] runs seeded epochs of AdamW over the detector parameters and
//! returns the trained weights plus a per-step loss log. Checkpoints are
//! JSON documents carrying the config, run metadata, and named parameter
//! arrays; [`make_subpool`] filters a manifest down to a kept set of
//! datasets and re-densifies affinity indices so a smaller model can be
//! retrained on the reduced pool.
//!
//! Reproducibility contract: `(seed, manifest digest, config)` fully
//! determine the checkpoint. Per-sample gradients are combined in manifest
//! order regardless of how many threads computed them, so parallel and
//! serial runs agree bit for bit; `deterministic` additionally forces
//! serial execution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::load_rgb;
use crate::corpus::{AnnotatedImage, PooledManifest};
use crate::error::{Error, Result};
use crate::geometry::Letterbox;
use crate::model::{assign_targets, total_loss_grad, Detector, DetectorConfig, TargetAssignment};
use crate::scalar::Scalar;

/// Checkpoint format marker.
pub const CHECKPOINT_KIND: &str = "affpool-checkpoint";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Loop and optimizer settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Force fully serial execution (bit-reproducibility belt-and-braces;
    /// the parallel path is already order-stable).
    pub deterministic: bool,
    /// Oversample smaller datasets so every dataset contributes equally
    /// often per epoch. Off by default: the pool is used as-is.
    pub balanced_sampling: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            seed: 0,
            deterministic: false,
            balanced_sampling: false,
        }
    }
}

/// One optimizer step in the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub obj: f64,
    pub cls: f64,
    pub loc: f64,
    pub aff: f64,
    pub total: f64,
}

/// Result of [`train`]: the fitted detector plus provenance and the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub detector: Detector<S>,
    pub meta: CheckpointMeta,
    pub log: Vec<StepRecord>,
}

/// A decoded, letterboxed training sample.
pub struct TrainSample<S> {
    pub input: Array3<S>,
    pub assignment: TargetAssignment,
}

/// Load one manifest record, letterbox it to the model input size, and
/// assign its boxes to grid cells.
pub fn load_sample<S: Scalar>(record: &AnnotatedImage, cfg: &DetectorConfig) -> Result<TrainSample<S>> {
    let img = load_rgb(&record.path)?;
    if (img.width(), img.height()) != (record.width, record.height) {
        return Err(Error::Image {
            path: record.path.clone(),
            message: format!(
                "manifest says {}x{} but file is {}x{}",
                record.width,
                record.height,
                img.width(),
                img.height()
            ),
        });
    }
    let side = cfg.input_size;
    let lb = Letterbox::fit(record.width, record.height, side);
    let canvas = if (record.width, record.height) == (side, side) {
        img
    } else {
        let sw = ((record.width as f64 * lb.scale).round() as u32).max(1);
        let sh = ((record.height as f64 * lb.scale).round() as u32).max(1);
        let resized = image::imageops::resize(&img, sw, sh, image::imageops::FilterType::Triangle);
        let mut canvas = image::RgbImage::from_pixel(side, side, image::Rgb(crate::alignment::IGNORE_GRAY));
        image::imageops::overlay(&mut canvas, &resized, lb.pad_x.round() as i64, lb.pad_y.round() as i64);
        canvas
    };

    let side = side as usize;
    let mut input = Array3::zeros((3, side, side));
    for (x, y, pixel) in canvas.enumerate_pixels() {
        for c in 0..3 {
            input[[c, y as usize, x as usize]] = S::from_f64(pixel.0[c] as f64 / 255.0);
        }
    }

    let scaled = AnnotatedImage {
        width: cfg.input_size,
        height: cfg.input_size,
        boxes: record.boxes.iter().map(|b| lb.apply(b)).collect(),
        ..record.clone()
    };
    Ok(TrainSample { input, assignment: assign_targets(&scaled, cfg) })
}

/// Run the detector on one manifest record: letterbox in, decode and NMS,
/// then map boxes back to the original image frame (clipped to it).
pub fn detect_record<S: Scalar>(
    detector: &Detector<S>,
    record: &AnnotatedImage,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<crate::model::Detection>> {
    let sample = load_sample::<S>(record, &detector.config)?;
    let outputs = detector.forward(&sample.input);
    let lb = Letterbox::fit(record.width, record.height, detector.config.input_size);
    let dets = crate::model::decode(&outputs, &detector.config, conf_threshold, nms_iou);
    Ok(dets
        .into_iter()
        .filter_map(|mut d| {
            let original = lb.invert(&d.bbox);
            original
                .clipped(record.width as f64, record.height as f64)
                .map(|clipped| {
                    d.bbox = clipped;
                    d
                })
        })
        .collect())
}

/// AdamW: Adam moments plus decoupled weight decay.
struct AdamW<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    weight_decay: S,
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
}

impl<S: Scalar> AdamW<S> {
    fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            weight_decay: S::from_f64(weight_decay),
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [S], grads: &[S]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Image visit order for one epoch.
fn epoch_order(
    sample_datasets: &[usize],
    num_datasets: usize,
    balanced: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if !balanced {
        let mut order: Vec<usize> = (0..sample_datasets.len()).collect();
        order.shuffle(rng);
        return order;
    }
    let mut per_dataset: Vec<Vec<usize>> = vec![Vec::new(); num_datasets];
    for (i, &d) in sample_datasets.iter().enumerate() {
        per_dataset[d].push(i);
    }
    per_dataset.retain(|v| !v.is_empty());
    for list in &mut per_dataset {
        list.shuffle(rng);
    }
    let max = per_dataset.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(max * per_dataset.len());
    for round in 0..max {
        for list in &per_dataset {
            order.push(list[round % list.len()]);
        }
    }
    order.shuffle(rng);
    order
}

/// Run the optimization loop over an aligned manifest.
pub fn train<S: Scalar>(
    manifest: &PooledManifest,
    cfg: &DetectorConfig,
    run: &RunConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::EmptyPool);
    }
    if cfg.num_datasets != manifest.num_datasets() {
        return Err(Error::DatasetCountMismatch {
            model: cfg.num_datasets,
            pool: manifest.num_datasets(),
        });
    }

    log::info!(
        "loading {} training images at {}x{}",
        manifest.records.len(),
        cfg.input_size,
        cfg.input_size
    );
    let samples: Vec<TrainSample<S>> = if run.deterministic {
        manifest.records.iter().map(|r| load_sample(r, cfg)).collect::<Result<_>>()?
    } else {
        manifest.records.par_iter().map(|r| load_sample(r, cfg)).collect::<Result<_>>()?
    };
    let sample_datasets: Vec<usize> = manifest.records.iter().map(|r| r.source_dataset).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut detector = Detector::<S>::init(cfg.clone(), &mut rng)?;
    let mut flat = Vec::new();
    detector.layers.copy_flat_into(&mut flat);
    let mut optimizer = AdamW::<S>::new(flat.len(), run.learning_rate, run.weight_decay);

    let mut log_records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..run.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(run.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let order = epoch_order(&sample_datasets, cfg.num_datasets, run.balanced_sampling, &mut epoch_rng);
        for batch in order.chunks(run.batch_size.max(1)) {
            let per_sample = |&idx: &usize| -> Result<([f64; 5], Vec<S>)> {
                let sample = &samples[idx];
                let (outputs, cache) = detector.forward_cached(&sample.input);
                let (c, d_heads) = total_loss_grad(&outputs, &sample.assignment, cfg)?;
                let grads = detector.backward(&sample.input, &cache, &d_heads);
                let mut flat_grads = Vec::new();
                grads.copy_flat_into(&mut flat_grads);
                Ok((
                    [c.obj.to_f64(), c.cls.to_f64(), c.loc.to_f64(), c.aff.to_f64(), c.total.to_f64()],
                    flat_grads,
                ))
            };
            let results: Vec<([f64; 5], Vec<S>)> = if run.deterministic {
                batch.iter().map(per_sample).collect::<Result<_>>()?
            } else {
                batch.par_iter().map(per_sample).collect::<Result<_>>()?
            };

            // Order-stable mean over the batch.
            let inv = S::from_f64(1.0 / results.len() as f64);
            let mut grad_mean = vec![S::zero(); flat.len()];
            let mut comp_mean = [0.0f64; 5];
            for (comps, grads) in &results {
                for (acc, g) in grad_mean.iter_mut().zip(grads) {
                    *acc += *g * inv;
                }
                for (acc, c) in comp_mean.iter_mut().zip(comps) {
                    *acc += c / results.len() as f64;
                }
            }
            if comp_mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    obj: comp_mean[0],
                    cls: comp_mean[1],
                    loc: comp_mean[2],
                    aff: comp_mean[3],
                });
            }

            optimizer.step(&mut flat, &grad_mean);
            detector.layers.set_from_flat(&flat);
            log_records.push(StepRecord {
                step,
                epoch,
                obj: comp_mean[0],
                cls: comp_mean[1],
                loc: comp_mean[2],
                aff: comp_mean[3],
                total: comp_mean[4],
            });
            step += 1;
        }
        if let Some(last) = log_records.last() {
            log::info!("epoch {epoch}: step {} total {:.4}", last.step, last.total);
        }
    }

    let meta = CheckpointMeta {
        seed: run.seed,
        epochs: run.epochs,
        steps: step,
        manifest_digest: manifest.digest(),
        dataset_ids: manifest.dataset_ids(),
        scalar: S::DTYPE.to_string(),
        index_map: manifest.index_map.clone(),
        final_total: log_records.last().map(|r| r.total),
    };
    Ok(TrainOutcome { detector, meta, log: log_records })
}

/// Restrict a manifest to `keep` (affinity indices of the parent pool),
/// re-densifying indices to `0..keep.len()` in ascending original order.
/// The old→new pairs are recorded in `index_map` so affinity reports on a
/// retrained model stay interpretable.
pub fn make_subpool(manifest: &PooledManifest, keep: &BTreeSet<usize>) -> Result<PooledManifest> {
    if keep.is_empty() {
        return Err(Error::EmptySubpool);
    }
    if let Some(&bad) = keep.iter().find(|&&i| i >= manifest.num_datasets()) {
        return Err(Error::InvalidArgument(format!(
            "keep index {bad} out of range for a {}-dataset pool",
            manifest.num_datasets()
        )));
    }
    let index_map: Vec<(usize, usize)> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let remap: BTreeMap<usize, usize> = index_map.iter().map(|&(old, new)| (old, new)).collect();

    let datasets = manifest
        .datasets
        .iter()
        .filter(|d| remap.contains_key(&d.affinity_index))
        .map(|d| {
            let mut d = d.clone();
            d.affinity_index = remap[&d.affinity_index];
            d
        })
        .collect();
    let records: Vec<AnnotatedImage> = manifest
        .records
        .iter()
        .filter(|r| remap.contains_key(&r.source_dataset))
        .map(|r| {
            let mut r = r.clone();
            r.source_dataset = remap[&r.source_dataset];
            r
        })
        .collect();
    if records.is_empty() {
        return Err(Error::EmptySubpool);
    }
    Ok(PooledManifest {
        datasets,
        taxonomy_digest: manifest.taxonomy_digest.clone(),
        index_map: Some(index_map),
        records,
    })
}

/// Run provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub manifest_digest: String,
    pub dataset_ids: Vec<String>,
    /// Scalar type the run used ("f32"/"f64"); informative only, weights
    /// are stored as f64 and load into either.
    pub scalar: String,
    /// Present when trained on a subpool: `(parent index, local index)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_map: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_total: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    kind: String,
    version: u32,
    config: DetectorConfig,
    meta: CheckpointMeta,
    /// Named parameter arrays in the fixed layer order.
    params: BTreeMap<String, Vec<f64>>,
}

/// Serialize a checkpoint to `path`; returns the file's sha256 digest.
pub fn save_checkpoint<S: Scalar>(
    detector: &Detector<S>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<String> {
    let params: BTreeMap<String, Vec<f64>> = detector
        .layers
        .named_arrays()
        .into_iter()
        .map(|(name, values)| (name, values.iter().map(|&v| v.to_f64()).collect()))
        .collect();
    let file = CheckpointFile {
        kind: CHECKPOINT_KIND.to_string(),
        version: CHECKPOINT_VERSION,
        config: detector.config.clone(),
        meta: meta.clone(),
        params,
    };
    let bytes = serde_json::to_vec(&file)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

/// Load a checkpoint, validating format, config, and parameter shapes.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Detector<S>, CheckpointMeta)> {
    let malformed = |message: String| Error::MalformedCheckpoint { path: path.to_path_buf(), message };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_slice(&bytes).map_err(|e| malformed(e.to_string()))?;
    if file.kind != CHECKPOINT_KIND {
        return Err(malformed(format!("kind {:?}, expected {CHECKPOINT_KIND:?}", file.kind)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(malformed(format!("version {}, expected {CHECKPOINT_VERSION}", file.version)));
    }
    let mut detector = Detector::<S>::zeroed(file.config)?;
    let mut params = file.params;
    for (name, values) in detector.layers.named_arrays_mut() {
        let stored = params
            .remove(&name)
            .ok_or_else(|| malformed(format!("missing parameter array {name:?}")))?;
        if stored.len() != values.len() {
            return Err(malformed(format!(
                "parameter {name:?} has {} values, expected {}",
                stored.len(),
                values.len()
            )));
        }
        for (slot, v) in values.iter_mut().zip(stored) {
            *slot = S::from_f64(v);
        }
    }
    if let Some(extra) = params.into_keys().next() {
        return Err(malformed(format!("unknown parameter array {extra:?}")));
    }
    Ok((detector, file.meta))
}
