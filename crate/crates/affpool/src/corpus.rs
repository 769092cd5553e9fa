//! Dataset ingestion and pooled-manifest construction.
//!
//! COCO-style annotation JSON goes in, one line-delimited manifest comes
//! out. Every pooled image carries the affinity index of the dataset it was
//! ingested from — that index is the label the dataset-affinity head trains
//! against.
//!
//! Manifest layout: first line is a header record (kind, version, taxonomy
//! digest, dataset descriptors), each following line is one image. Streaming
//! keeps epoch iteration cheap for large pools; nothing ever needs random
//! access.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{BoxCxcywh, PixelRect};
use crate::taxonomy::{map_label, LabelOutcome, TaxonomyMapping};

pub const MANIFEST_KIND: &str = "affpool-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// How a source dataset's media is organized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    ImageCollection,
    VideoFrames,
}

/// One source dataset of the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub annotation_path: PathBuf,
    pub image_root: PathBuf,
    pub media_kind: MediaKind,
    /// Position of this dataset in the affinity head's output vector.
    pub affinity_index: usize,
    /// Above-ground-level imagery: alignment slices these images into
    /// overlapping patches.
    #[serde(default)]
    pub slice: bool,
}

/// One pooled image with its aligned annotations.
///
/// Boxes are center-form `(cx, cy, w, h)` in pixels, clamped to the image;
/// `class_ids` runs parallel to `boxes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    /// Affinity index of the dataset this image came from.
    pub source_dataset: usize,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoxCxcywh<f64>>,
    pub class_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignore_regions: Vec<PixelRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u64>,
}

impl AnnotatedImage {
    pub fn num_instances(&self) -> usize {
        self.boxes.len()
    }
}

/// The unified training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledManifest {
    /// Sorted by `affinity_index`, which is contiguous from 0.
    pub datasets: Vec<DatasetDescriptor>,
    pub taxonomy_digest: String,
    /// For subpools: `(index in the parent pool, index here)` pairs, so
    /// affinity reports on retrained models stay interpretable.
    pub index_map: Option<Vec<(usize, usize)>>,
    pub records: Vec<AnnotatedImage>,
}

impl PooledManifest {
    pub fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.dataset_id.clone()).collect()
    }

    /// Serialized form: header line followed by one record per line.
    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let header = ManifestHeader {
            kind: MANIFEST_KIND.to_string(),
            version: MANIFEST_VERSION,
            taxonomy_digest: self.taxonomy_digest.clone(),
            datasets: self.datasets.clone(),
            index_map: self.index_map.clone(),
            num_records: self.records.len(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(serde_json::to_string(&header).expect("header").as_bytes());
        out.push(b'\n');
        for record in &self.records {
            out.extend_from_slice(serde_json::to_string(record).expect("record").as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// Content digest; checkpoints and detection files reference it.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_jsonl_bytes());
        format!("sha256:{:x}", hasher.finalize())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    kind: String,
    version: u32,
    taxonomy_digest: String,
    datasets: Vec<DatasetDescriptor>,
    #[serde(default)]
    index_map: Option<Vec<(usize, usize)>>,
    num_records: usize,
}

// --- COCO-style annotation JSON ---
// The interchange format every source must provide (and that the synthetic
// generator emits). Only the fields used here are modeled.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImageEntry {
    pub id: i64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotationEntry {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    /// Corner form `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub iscrowd: u8,
    /// Marks an ignore region rather than an instance.
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategoryEntry {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImageEntry>,
    pub annotations: Vec<CocoAnnotationEntry>,
    pub categories: Vec<CocoCategoryEntry>,
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::MalformedAnnotations {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Integer rectangle covering `bbox`, clamped to the image. `None` if the
/// clamped region is empty.
fn rect_from_bbox(bbox: [f64; 4], width: u32, height: u32) -> Option<PixelRect> {
    let x0 = bbox[0].max(0.0).floor() as u32;
    let y0 = bbox[1].max(0.0).floor() as u32;
    let x1 = (bbox[0] + bbox[2]).max(0.0).ceil() as u32;
    let y1 = (bbox[1] + bbox[3]).max(0.0).ceil() as u32;
    PixelRect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0)).clamped(width, height)
}

/// Read one dataset's COCO-style annotations and emit aligned images.
///
/// Boxes are converted to center form and clamped to the image; annotations
/// whose label maps to `DROP` are removed; boxes degenerate after clamping
/// (side ≤ 1 px) are dropped with a warning. Images left without boxes are
/// retained as negatives. `iscrowd`/`ignore` annotations become ignore
/// regions instead of instances. Output is sorted by `image_id`.
pub fn ingest_dataset(
    descriptor: &DatasetDescriptor,
    taxonomy: &TaxonomyMapping,
) -> Result<Vec<AnnotatedImage>> {
    let path = descriptor.annotation_path.as_path();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoDataset =
        serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;

    let mut category_names = BTreeMap::new();
    for cat in &coco.categories {
        if category_names.insert(cat.id, cat.name.as_str()).is_some() {
            return Err(malformed(path, format!("duplicate category id {}", cat.id)));
        }
    }

    let mut by_coco_id = BTreeMap::new();
    for img in &coco.images {
        if img.width == 0 || img.height == 0 {
            return Err(malformed(
                path,
                format!("image {:?} has zero width or height", img.file_name),
            ));
        }
        let stem = Path::new(&img.file_name)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| malformed(path, format!("bad file name {:?}", img.file_name)))?;
        let record = AnnotatedImage {
            image_id: format!("{}/{}", descriptor.dataset_id, stem),
            source_dataset: descriptor.affinity_index,
            path: descriptor.image_root.join(&img.file_name),
            width: img.width,
            height: img.height,
            boxes: Vec::new(),
            class_ids: Vec::new(),
            ignore_regions: Vec::new(),
            frame_index: img.frame_index,
        };
        if by_coco_id.insert(img.id, record).is_some() {
            return Err(malformed(path, format!("duplicate image id {}", img.id)));
        }
    }

    for ann in &coco.annotations {
        let record = by_coco_id.get_mut(&ann.image_id).ok_or_else(|| {
            malformed(
                path,
                format!("annotation {} references unknown image {}", ann.id, ann.image_id),
            )
        })?;
        if ann.iscrowd != 0 || ann.ignore {
            // Region semantics: masked out regardless of its label.
            if let Some(rect) = rect_from_bbox(ann.bbox, record.width, record.height) {
                record.ignore_regions.push(rect);
            }
            continue;
        }
        let name = category_names.get(&ann.category_id).ok_or_else(|| {
            malformed(
                path,
                format!("annotation {} references unknown category {}", ann.id, ann.category_id),
            )
        })?;
        let class_id = match map_label(&descriptor.dataset_id, name, taxonomy)? {
            LabelOutcome::Class(i) => i,
            LabelOutcome::Drop => continue,
        };
        let raw = BoxCxcywh::from_xywh(ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]);
        let clamped = raw.clipped(record.width as f64, record.height as f64);
        match clamped {
            Some(b) if b.w > 1.0 && b.h > 1.0 => {
                record.boxes.push(b);
                record.class_ids.push(class_id);
            }
            _ => log::warn!(
                "dropping degenerate box (annotation {}) on {}",
                ann.id,
                record.image_id
            ),
        }
    }

    // BTreeMap iteration is COCO-id order; re-sort by our image_id.
    let mut records: Vec<AnnotatedImage> = by_coco_id.into_values().collect();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(records)
}

/// Ingest every dataset and merge into one pool.
///
/// Affinity indices must cover `0..N` exactly; records are ordered by
/// (dataset, image_id) so the manifest is deterministic no matter how the
/// descriptor list was written.
pub fn build_manifest(
    descriptors: &[DatasetDescriptor],
    taxonomy: &TaxonomyMapping,
) -> Result<PooledManifest> {
    if descriptors.is_empty() {
        return Err(Error::EmptyPool);
    }
    let n = descriptors.len();
    let mut ids = std::collections::BTreeSet::new();
    for d in descriptors {
        if !ids.insert(d.dataset_id.as_str()) {
            return Err(Error::DuplicateDatasetId(d.dataset_id.clone()));
        }
    }
    let mut seen = vec![false; n];
    for d in descriptors {
        if let Some(slot) = seen.get_mut(d.affinity_index) {
            if *slot {
                return Err(Error::DuplicateAffinityIndex(d.affinity_index));
            }
            *slot = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        let mut found: Vec<usize> = descriptors.iter().map(|d| d.affinity_index).collect();
        found.sort_unstable();
        return Err(Error::NonContiguousAffinityIndices { expected: n, found });
    }

    let mut datasets = descriptors.to_vec();
    datasets.sort_by_key(|d| d.affinity_index);

    // Distinct datasets ingest concurrently; the ordered collect keeps the
    // merge deterministic.
    let per_dataset: Vec<Result<Vec<AnnotatedImage>>> = datasets
        .par_iter()
        .map(|d| ingest_dataset(d, taxonomy))
        .collect();
    let mut records = Vec::new();
    for batch in per_dataset {
        records.extend(batch?);
    }

    Ok(PooledManifest {
        datasets,
        taxonomy_digest: taxonomy.digest().to_string(),
        index_map: None,
        records,
    })
}

/// Per-dataset image / instance counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub dataset_id: String,
    pub images: usize,
    pub instances: usize,
}

/// How (un)balanced the pool is, one row per dataset in affinity order.
pub fn balance_report(manifest: &PooledManifest) -> Vec<BalanceRow> {
    let mut rows: Vec<BalanceRow> = manifest
        .datasets
        .iter()
        .map(|d| BalanceRow {
            dataset_id: d.dataset_id.clone(),
            images: 0,
            instances: 0,
        })
        .collect();
    for record in &manifest.records {
        let row = &mut rows[record.source_dataset];
        row.images += 1;
        row.instances += record.num_instances();
    }
    rows
}

pub fn balance_csv(rows: &[BalanceRow]) -> String {
    let mut out = String::from("dataset,images,instances\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            csv_field(&row.dataset_id),
            row.images,
            row.instances
        ));
    }
    out
}

/// Quote a CSV field only when it needs it.
pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write the manifest; returns its content digest.
pub fn write_manifest(manifest: &PooledManifest, path: &Path) -> Result<String> {
    let bytes = manifest.to_jsonl_bytes();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

pub fn read_manifest(path: &Path) -> Result<PooledManifest> {
    let bad = |message: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(Ok(line)) => line,
        Some(Err(e)) => return Err(Error::io(path, e)),
        None => return Err(bad("empty file".into())),
    };
    let header: ManifestHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.kind != MANIFEST_KIND {
        return Err(bad(format!("kind {:?} is not {MANIFEST_KIND:?}", header.kind)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let n = header.datasets.len();
    let mut records = Vec::with_capacity(header.num_records);
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let record: AnnotatedImage = serde_json::from_str(&line)
            .map_err(|e| bad(format!("record on line {}: {e}", lineno + 2)))?;
        if record.source_dataset >= n {
            return Err(bad(format!(
                "record {:?} references dataset {} of {}",
                record.image_id, record.source_dataset, n
            )));
        }
        if record.boxes.len() != record.class_ids.len() {
            return Err(bad(format!(
                "record {:?} has {} boxes but {} class ids",
                record.image_id,
                record.boxes.len(),
                record.class_ids.len()
            )));
        }
        records.push(record);
    }
    if records.len() != header.num_records {
        return Err(bad(format!(
            "header promises {} records, file has {}",
            header.num_records,
            records.len()
        )));
    }
    Ok(PooledManifest {
        datasets: header.datasets,
        taxonomy_digest: header.taxonomy_digest,
        index_map: header.index_map,
        records,
    })
}
