//! Detection metrics plus the core analysis: the distribution of predicted
//! dataset affinity over true positives, and the pool-pruning
//! recommendation derived from it.
//!
//! Matching is the standard greedy protocol: detections in descending
//! objectness, each taking the highest-IoU still-unmatched ground truth at
//! or above the threshold. Unmatched detections whose center falls in an
//! ignore region are excluded from FP counting (training masks those
//! pixels, so the detector never saw them). AP uses 101-point COCO-style
//! interpolation at every threshold for internal consistency.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{csv_field, AnnotatedImage};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCxcywh};
use crate::model::{argmax, Detection};

/// Detections file format marker.
pub const DETECTIONS_KIND: &str = "affpool-detections";
/// Detections file format version.
pub const DETECTIONS_VERSION: u32 = 1;

/// IoU thresholds for mAP@.5:.95: `{0.50, 0.55, …, 0.95}`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// One detection's fate during matching.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMatch {
    /// Index into the input detection list.
    pub detection: usize,
    pub objectness: f64,
    /// Index of the assigned-dataset argmax of the detection's affinity.
    pub assigned_dataset: usize,
    pub is_tp: bool,
    pub matched_gt: Option<usize>,
    /// Unmatched with its center inside an ignore region: excluded from
    /// FP counting.
    pub in_ignore_region: bool,
}

/// Greedy matching outcome for one image at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Ordered by descending objectness (ties: input order).
    pub detections: Vec<DetectionMatch>,
    pub unmatched_gt: usize,
}

/// Match detections against one image's ground truth.
pub fn match_detections(
    dets: &[Detection],
    gts: &AnnotatedImage,
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .objectness
            .partial_cmp(&dets[a].objectness)
            .expect("finite objectness")
            .then(a.cmp(&b))
    });

    let mut gt_used = vec![false; gts.boxes.len()];
    let mut matches = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt_box) in gts.boxes.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let overlap = iou(&det.bbox, gt_box);
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        let matched_gt = best.map(|(gi, _)| gi);
        if let Some(gi) = matched_gt {
            gt_used[gi] = true;
        }
        let in_ignore_region = matched_gt.is_none()
            && gts
                .ignore_regions
                .iter()
                .any(|r| r.contains(det.bbox.cx, det.bbox.cy));
        matches.push(DetectionMatch {
            detection: di,
            objectness: det.objectness,
            assigned_dataset: argmax(&det.affinity),
            is_tp: matched_gt.is_some(),
            matched_gt,
            in_ignore_region,
        });
    }
    let unmatched_gt = gt_used.iter().filter(|&&u| !u).count();
    MatchResult { detections: matches, unmatched_gt }
}

/// 101-point interpolated average precision over a set of per-image match
/// results. `None` when there is no ground truth (undefined).
pub fn average_precision(matches: &[MatchResult], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    // Global confidence ranking; ignore-region-excluded detections do not
    // appear as either TP or FP.
    let mut ranked: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.detections.iter())
        .filter(|d| !d.in_ignore_region)
        .map(|d| (d.objectness, d.is_tp))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite objectness"));

    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &ranked {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope: max precision at any recall ≥ r.
    for i in (1..precisions.len()).rev() {
        if precisions[i] > precisions[i - 1] {
            precisions[i - 1] = precisions[i];
        }
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map_or(0.0, |idx| precisions[idx]);
        sum += p;
    }
    Some(sum / 101.0)
}

/// mAP at IoU 0.5 and averaged over the ten COCO thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScores {
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
}

/// Evaluate `dets[i]` against `gts[i]` across the whole eval set. With a
/// single super-category AP equals mAP.
pub fn map_range(dets: &[Vec<Detection>], gts: &[AnnotatedImage]) -> MapScores {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let num_gt: usize = gts.iter().map(|g| g.boxes.len()).sum();
    let mut per_threshold = Vec::with_capacity(10);
    for t in coco_thresholds() {
        let matches: Vec<MatchResult> = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| match_detections(d, g, t))
            .collect();
        per_threshold.push(average_precision(&matches, num_gt));
    }
    let map50 = per_threshold[0];
    let map50_95 = if per_threshold.iter().all(Option::is_some) {
        Some(per_threshold.iter().map(|ap| ap.unwrap()).sum::<f64>() / per_threshold.len() as f64)
    } else {
        None
    };
    MapScores { map50, map50_95 }
}

/// Distribution of predicted dataset affinity over true positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityReport {
    /// Per-dataset fraction of TPs; sums to 1 when `tp_count > 0`.
    pub histogram: Vec<f64>,
    pub tp_count: usize,
    /// The k datasets with the largest fractions, ordered by descending
    /// fraction (ties: lowest index first).
    pub top_k: Vec<usize>,
    /// All other datasets, ascending.
    pub remainder: Vec<usize>,
}

impl AffinityReport {
    /// No TPs: the histogram carries no signal.
    pub fn is_empty(&self) -> bool {
        self.tp_count == 0
    }
}

/// Build the TP affinity histogram over the eval set (matching at
/// `iou_threshold`, assignment by affinity argmax, ties to the lowest
/// index) and split the pool into top-`k` and remainder.
pub fn affinity_distribution(
    dets: &[Vec<Detection>],
    gts: &[AnnotatedImage],
    num_datasets: usize,
    iou_threshold: f64,
    k: usize,
) -> AffinityReport {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let mut counts = vec![0usize; num_datasets];
    let mut tp_count = 0usize;
    for (d, g) in dets.iter().zip(gts) {
        for m in match_detections(d, g, iou_threshold).detections {
            if m.is_tp {
                assert!(m.assigned_dataset < num_datasets, "affinity sized to the pool");
                counts[m.assigned_dataset] += 1;
                tp_count += 1;
            }
        }
    }
    let histogram: Vec<f64> = if tp_count == 0 {
        vec![0.0; num_datasets]
    } else {
        counts.iter().map(|&c| c as f64 / tp_count as f64).collect()
    };
    let mut report = AffinityReport { histogram, tp_count, top_k: vec![], remainder: vec![] };
    let (top_k, remainder) = prune_pool(&report, k);
    report.top_k = top_k;
    report.remainder = remainder;
    report
}

/// Split the pool into the `k` highest-assigned datasets and the rest.
/// Ties resolve to the lowest index.
pub fn prune_pool(report: &AffinityReport, k: usize) -> (Vec<usize>, Vec<usize>) {
    let n = report.histogram.len();
    assert!(k >= 1 && k <= n, "k must be in 1..={n}");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        report.histogram[b]
            .partial_cmp(&report.histogram[a])
            .expect("finite fractions")
            .then(a.cmp(&b))
    });
    let top_k: Vec<usize> = order[..k].to_vec();
    let mut remainder: Vec<usize> = order[k..].to_vec();
    remainder.sort_unstable();
    (top_k, remainder)
}

/// One training run's results for the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    /// Dataset id per affinity index of the pool this run trained on.
    pub dataset_ids: Vec<String>,
    pub report: AffinityReport,
    pub scores: MapScores,
}

/// Render runs side by side: pool label, one assigned-percentage column
/// per dataset (the union across runs, in first-appearance order; "-"
/// where a run's pool lacks the dataset), then both mAPs.
pub fn compare_runs(runs: &[RunSummary]) -> Result<String> {
    if runs.len() < 2 {
        return Err(Error::TooFewRuns);
    }
    let mut columns: Vec<String> = Vec::new();
    for run in runs {
        for id in &run.dataset_ids {
            if !columns.contains(id) {
                columns.push(id.clone());
            }
        }
    }
    let fmt_map = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let mut out = String::from("pool");
    for c in &columns {
        out.push(',');
        out.push_str(&csv_field(&format!("{c} %")));
    }
    out.push_str(",mAP@.5,mAP@.5:.95\n");
    for run in runs {
        out.push_str(&csv_field(&run.label));
        for c in &columns {
            out.push(',');
            match run.dataset_ids.iter().position(|id| id == c) {
                Some(idx) => out.push_str(&format!("{:.1}", run.report.histogram[idx] * 100.0)),
                None => out.push('-'),
            }
        }
        out.push(',');
        out.push_str(&fmt_map(run.scores.map50));
        out.push(',');
        out.push_str(&fmt_map(run.scores.map50_95));
        out.push('\n');
    }
    Ok(out)
}

/// One detection in the line-delimited detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    /// `[cx, cy, w, h]` in the image frame.
    pub bbox: [f64; 4],
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    pub affinity: Vec<f64>,
    pub assigned_dataset: usize,
}

impl DetectionRecord {
    pub fn from_detection(image_id: &str, det: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            bbox: [det.bbox.cx, det.bbox.cy, det.bbox.w, det.bbox.h],
            objectness: det.objectness,
            class_scores: det.class_scores.clone(),
            affinity: det.affinity.clone(),
            assigned_dataset: det.assigned_dataset,
        }
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            objectness: self.objectness,
            bbox: BoxCxcywh::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3]),
            class_scores: self.class_scores.clone(),
            affinity: self.affinity.clone(),
            assigned_dataset: self.assigned_dataset,
        }
    }
}

/// Header line of the detections file, cross-referencing the checkpoint
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsHeader {
    pub kind: String,
    pub version: u32,
    pub checkpoint_digest: String,
    /// Digest of the manifest whose images were run.
    pub manifest_digest: String,
    /// Ids of the training pool's datasets, indexing the affinity vectors.
    pub dataset_ids: Vec<String>,
    pub num_datasets: usize,
    pub num_records: usize,
}

/// Write the detections file; returns its sha256 digest.
pub fn write_detections(
    path: &Path,
    checkpoint_digest: &str,
    manifest_digest: &str,
    dataset_ids: &[String],
    records: &[DetectionRecord],
) -> Result<String> {
    let header = DetectionsHeader {
        kind: DETECTIONS_KIND.to_string(),
        version: DETECTIONS_VERSION,
        checkpoint_digest: checkpoint_digest.to_string(),
        manifest_digest: manifest_digest.to_string(),
        dataset_ids: dataset_ids.to_vec(),
        num_datasets: dataset_ids.len(),
        num_records: records.len(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    out.push(b'\n');
    for record in records {
        out.extend_from_slice(serde_json::to_string(record)?.as_bytes());
        out.push(b'\n');
    }
    std::fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&out);
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

/// Read a detections file back, validating the header.
pub fn read_detections(path: &Path) -> Result<(DetectionsHeader, Vec<DetectionRecord>)> {
    let malformed = |message: String| Error::MalformedDetections { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: DetectionsHeader = serde_json::from_str(lines.next().ok_or_else(|| malformed("empty file".into()))?)
        .map_err(|e| malformed(format!("bad header: {e}")))?;
    if header.kind != DETECTIONS_KIND {
        return Err(malformed(format!("kind {:?}, expected {DETECTIONS_KIND:?}", header.kind)));
    }
    if header.version != DETECTIONS_VERSION {
        return Err(malformed(format!("version {}, expected {DETECTIONS_VERSION}", header.version)));
    }
    if header.dataset_ids.len() != header.num_datasets {
        return Err(malformed(format!(
            "{} dataset ids for {} datasets",
            header.dataset_ids.len(),
            header.num_datasets
        )));
    }
    let mut records = Vec::with_capacity(header.num_records);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord =
            serde_json::from_str(line).map_err(|e| malformed(format!("record {i}: {e}")))?;
        if record.affinity.len() != header.num_datasets {
            return Err(malformed(format!(
                "record {i}: affinity has {} entries, expected {}",
                record.affinity.len(),
                header.num_datasets
            )));
        }
        records.push(record);
    }
    if records.len() != header.num_records {
        return Err(malformed(format!(
            "expected {} records, found {}",
            header.num_records,
            records.len()
        )));
    }
    Ok((header, records))
}

/// Group flat detection records by image id.
pub fn group_by_image(records: &[DetectionRecord]) -> BTreeMap<String, Vec<Detection>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for r in records {
        out.entry(r.image_id.clone()).or_default().push(r.to_detection());
    }
    out
}

/// Eval artifact format marker.
pub const EVAL_KIND: &str = "affpool-eval";
/// Analysis artifact format marker.
pub const ANALYSIS_KIND: &str = "affpool-analysis";
/// Version shared by the eval and analysis artifacts.
pub const REPORT_VERSION: u32 = 1;

/// On-disk result of scoring one run's detections against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub kind: String,
    pub version: u32,
    /// Digest of the detections file that was scored.
    pub detections_digest: String,
    /// Digest of the ground-truth manifest.
    pub manifest_digest: String,
    pub num_images: usize,
    pub scores: MapScores,
}

/// On-disk result of the TP affinity analysis of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisArtifact {
    pub kind: String,
    pub version: u32,
    pub detections_digest: String,
    /// Checkpoint digest carried over from the detections header.
    pub checkpoint_digest: String,
    /// Dataset id per affinity index of the pool the run trained on.
    pub dataset_ids: Vec<String>,
    pub iou_threshold: f64,
    pub report: AffinityReport,
}

/// Write any serializable artifact as pretty JSON; returns its sha256 digest.
pub fn write_json_artifact<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

fn read_json_artifact<T: serde::de::DeserializeOwned>(
    path: &Path,
    kind: &str,
    got_kind: impl Fn(&T) -> (String, u32),
) -> Result<T> {
    let malformed = |message: String| Error::MalformedDetections {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: T = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let (k, v) = got_kind(&value);
    if k != kind {
        return Err(malformed(format!("kind {k:?}, expected {kind:?}")));
    }
    if v != REPORT_VERSION {
        return Err(malformed(format!("version {v}, expected {REPORT_VERSION}")));
    }
    Ok(value)
}

/// Read an eval artifact back, validating its kind and version.
pub fn read_eval_artifact(path: &Path) -> Result<EvalArtifact> {
    read_json_artifact(path, EVAL_KIND, |a: &EvalArtifact| (a.kind.clone(), a.version))
}

/// Read an analysis artifact back, validating its kind and version.
pub fn read_analysis_artifact(path: &Path) -> Result<AnalysisArtifact> {
    read_json_artifact(path, ANALYSIS_KIND, |a: &AnalysisArtifact| {
        (a.kind.clone(), a.version)
    })
}

/// Render the affinity histogram as a standalone SVG bar chart.
pub fn affinity_svg(report: &AffinityReport, dataset_ids: &[String]) -> String {
    assert_eq!(dataset_ids.len(), report.histogram.len());
    let n = report.histogram.len().max(1);
    let (width, height) = (640.0, 360.0);
    let (margin_left, margin_bottom, margin_top) = (60.0, 60.0, 30.0);
    let plot_w = width - margin_left - 20.0;
    let plot_h = height - margin_top - margin_bottom;
    let slot = plot_w / n as f64;
    let bar_w = slot * 0.7;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" font-size=\"14\">Assigned dataset share of {} true positives</text>\n",
        margin_left, report.tp_count
    );
    for tick in 0..=4 {
        let frac = tick as f64 / 4.0;
        let y = margin_top + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            "<line x1=\"{margin_left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.0}%</text>\n",
            margin_left + plot_w,
            margin_left - 6.0,
            y + 4.0,
            frac * 100.0
        ));
    }
    for (i, (&frac, id)) in report.histogram.iter().zip(dataset_ids).enumerate() {
        let x = margin_left + slot * i as f64 + (slot - bar_w) / 2.0;
        let h = plot_h * frac;
        let y = margin_top + plot_h - h;
        let fill = if report.top_k.contains(&i) { "#2b6cb0" } else { "#a0aec0" };
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"{fill}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.1}%</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            y - 4.0,
            frac * 100.0,
            x + bar_w / 2.0,
            margin_top + plot_h + 16.0,
            id
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
