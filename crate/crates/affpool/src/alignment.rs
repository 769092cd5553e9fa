//! Sample-layout alignment: patch slicing, video subsampling, region masking.
//!
//! Pooled sources disagree about more than labels. Above-ground-level imagery
//! comes as huge frames full of tiny vehicles — those are sliced into
//! overlapping patches of 600–800 px. Video datasets are near-duplicate frame
//! streams — those keep every 20th frame. Regions annotated as "ignore" are
//! painted gray so they neither contribute objects nor clutter.
//!
//! [`slice_image`], [`subsample_video`] and [`mask_ignore_regions`] are the
//! pure per-record operations; [`align_manifest`] runs them over a whole pool
//! and materializes the rewritten pixels.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedImage, MediaKind, PooledManifest};
use crate::error::{Error, Result};
use crate::geometry::PixelRect;

/// Gray fill for ignore regions, matching the letterbox padding value so
/// masked areas sit near the input distribution's padding statistics.
pub const IGNORE_GRAY: [u8; 3] = [114, 114, 114];

/// Patch-slicing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    /// Smallest patch side in pixels.
    pub patch_min: u32,
    /// Largest patch side in pixels.
    pub patch_max: u32,
    /// Fraction of the patch side shared between neighbors.
    pub overlap_ratio: f64,
    /// Keep a clipped box only if clipped area / original area reaches this.
    pub min_box_visibility: f64,
    pub seed: u64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            patch_min: 600,
            patch_max: 800,
            overlap_ratio: 0.1,
            min_box_visibility: 0.3,
            seed: 0,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_min == 0 {
            return Err(Error::InvalidArgument("patch_min must be ≥ 1".into()));
        }
        if self.patch_min > self.patch_max {
            return Err(Error::InvalidArgument(format!(
                "patch_min {} exceeds patch_max {}",
                self.patch_min, self.patch_max
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::InvalidArgument(format!(
                "overlap_ratio {} outside [0, 1)",
                self.overlap_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.min_box_visibility) {
            return Err(Error::InvalidArgument(format!(
                "min_box_visibility {} outside [0, 1]",
                self.min_box_visibility
            )));
        }
        Ok(())
    }
}

/// One emitted patch: where it was cut from, plus its remapped record.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Top-left corner of the patch in the source image.
    pub origin: (u32, u32),
    /// Record in patch coordinates; `path` still points at the source pixels
    /// until the pipeline writes the cropped file.
    pub record: AnnotatedImage,
}

/// Grid origins along one axis: stride `patch × (1 − overlap)`, last origin
/// clamped so the patch stays inside, duplicates collapsed.
pub fn axis_origins(extent: u32, patch: u32, overlap_ratio: f64) -> Vec<u32> {
    if patch >= extent {
        return vec![0];
    }
    let stride = patch as f64 * (1.0 - overlap_ratio);
    let last = extent - patch;
    let mut origins = Vec::new();
    for k in 0.. {
        let origin = (k as f64 * stride).floor() as u32;
        if origin >= last {
            origins.push(last);
            break;
        }
        origins.push(origin);
    }
    origins
}

fn intersect_region(r: &PixelRect, ox: u32, oy: u32, pw: u32, ph: u32) -> Option<PixelRect> {
    let x0 = r.x.max(ox);
    let y0 = r.y.max(oy);
    let x1 = r.x.saturating_add(r.w).min(ox + pw);
    let y1 = r.y.saturating_add(r.h).min(oy + ph);
    if x1 <= x0 || y1 <= y0 {
        None
    } else {
        Some(PixelRect::new(x0 - ox, y0 - oy, x1 - x0, y1 - y0))
    }
}

/// Cut one image into overlapping patches.
///
/// The patch side is drawn once per image from `[patch_min, patch_max]`, then
/// clamped per axis to the image extent, so small images yield exactly one
/// full-image patch. Boxes are shifted into patch coordinates, clipped, and
/// kept only if the visible fraction reaches `min_box_visibility`. Ignore
/// regions are intersected and shifted the same way.
pub fn slice_image(img: &AnnotatedImage, cfg: &SliceConfig, rng: &mut impl Rng) -> Vec<Patch> {
    let side = rng.gen_range(cfg.patch_min..=cfg.patch_max);
    let patch_w = side.min(img.width);
    let patch_h = side.min(img.height);
    let xs = axis_origins(img.width, patch_w, cfg.overlap_ratio);
    let ys = axis_origins(img.height, patch_h, cfg.overlap_ratio);

    let mut patches = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            let mut boxes = Vec::new();
            let mut class_ids = Vec::new();
            for (b, &class_id) in img.boxes.iter().zip(&img.class_ids) {
                let shifted = b.shifted(-(ox as f64), -(oy as f64));
                if let Some(clipped) = shifted.clipped(patch_w as f64, patch_h as f64) {
                    if clipped.area() >= cfg.min_box_visibility * b.area() {
                        boxes.push(clipped);
                        class_ids.push(class_id);
                    }
                }
            }
            let ignore_regions = img
                .ignore_regions
                .iter()
                .filter_map(|r| intersect_region(r, ox, oy, patch_w, patch_h))
                .collect();
            patches.push(Patch {
                origin: (ox, oy),
                record: AnnotatedImage {
                    image_id: format!("{}#x{:05}y{:05}", img.image_id, ox, oy),
                    source_dataset: img.source_dataset,
                    path: img.path.clone(),
                    width: patch_w,
                    height: patch_h,
                    boxes,
                    class_ids,
                    ignore_regions,
                    frame_index: img.frame_index,
                },
            });
        }
    }
    patches
}

/// Keep exactly the frames whose `frame_index ≡ 0 (mod stride)`, in order.
pub fn subsample_video(frames: &[AnnotatedImage], stride: u64) -> Result<Vec<AnnotatedImage>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("subsampling stride must be ≥ 1".into()));
    }
    let mut kept = Vec::new();
    for frame in frames {
        let index = frame.frame_index.ok_or_else(|| Error::MissingFrameIndex {
            image_id: frame.image_id.clone(),
        })?;
        if index % stride == 0 {
            kept.push(frame.clone());
        }
    }
    Ok(kept)
}

/// Paint every pixel inside any region gray (114, 114, 114), in place.
/// Regions reaching outside the image are clamped.
pub fn mask_ignore_regions(img: &mut RgbImage, regions: &[PixelRect]) {
    let (width, height) = (img.width(), img.height());
    for region in regions {
        let Some(r) = region.clamped(width, height) else {
            continue;
        };
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                img.put_pixel(x, y, image::Rgb(IGNORE_GRAY));
            }
        }
    }
}

/// Whole-pool alignment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub slice: SliceConfig,
    /// Keep every `video_stride`-th frame of video datasets.
    pub video_stride: u64,
    /// Directory for rewritten pixels (patches, masked images).
    pub images_dir: PathBuf,
    /// Force strictly serial processing for bit-reproducibility.
    #[serde(default)]
    pub deterministic: bool,
}

fn slug(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' { c } else { '_' })
        .collect()
}

/// Decode an image from disk as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Encode an image to disk (format chosen by extension).
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Process one source record into its aligned record(s), rewriting pixels
/// when masking or slicing touched them.
fn align_record(
    record: &AnnotatedImage,
    needs_slice: bool,
    opts: &AlignOptions,
    ordinal: usize,
) -> Result<Vec<AnnotatedImage>> {
    let needs_mask = !record.ignore_regions.is_empty();
    if !needs_slice && !needs_mask {
        return Ok(vec![record.clone()]);
    }

    let mut pixels = load_rgb(&record.path)?;
    if pixels.width() != record.width || pixels.height() != record.height {
        return Err(Error::Image {
            path: record.path.clone(),
            message: format!(
                "file is {}x{} but the annotations say {}x{}",
                pixels.width(),
                pixels.height(),
                record.width,
                record.height
            ),
        });
    }
    if needs_mask {
        mask_ignore_regions(&mut pixels, &record.ignore_regions);
    }

    if !needs_slice {
        let out_path = opts.images_dir.join(format!("{}.png", slug(&record.image_id)));
        save_rgb(&pixels, &out_path)?;
        let mut aligned = record.clone();
        aligned.path = out_path;
        return Ok(vec![aligned]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.slice.seed ^ ordinal as u64);
    let patches = slice_image(record, &opts.slice, &mut rng);
    let mut out = Vec::with_capacity(patches.len());
    for patch in patches {
        let (ox, oy) = patch.origin;
        let mut rec = patch.record;
        let view =
            image::imageops::crop_imm(&pixels, ox, oy, rec.width, rec.height).to_image();
        let out_path = opts.images_dir.join(format!("{}.png", slug(&rec.image_id)));
        save_rgb(&view, &out_path)?;
        rec.path = out_path;
        out.push(rec);
    }
    Ok(out)
}

/// Align a raw pooled manifest: subsample video datasets, mask ignore
/// regions, slice flagged datasets, and emit a manifest whose records point
/// at ready-to-train pixels.
pub fn align_manifest(manifest: &PooledManifest, opts: &AlignOptions) -> Result<PooledManifest> {
    opts.slice.validate()?;
    if opts.video_stride == 0 {
        return Err(Error::InvalidArgument("video_stride must be ≥ 1".into()));
    }
    std::fs::create_dir_all(&opts.images_dir).map_err(|e| Error::io(&opts.images_dir, e))?;

    // Subsample each video dataset first, preserving record order.
    let mut kept: Vec<&AnnotatedImage> = Vec::with_capacity(manifest.records.len());
    for dataset in &manifest.datasets {
        let members: Vec<AnnotatedImage> = manifest
            .records
            .iter()
            .filter(|r| r.source_dataset == dataset.affinity_index)
            .cloned()
            .collect();
        let filtered = match dataset.media_kind {
            MediaKind::VideoFrames => subsample_video(&members, opts.video_stride)?,
            MediaKind::ImageCollection => members,
        };
        for record in filtered {
            // Re-borrow from the manifest to avoid holding clones twice.
            let original = manifest
                .records
                .iter()
                .find(|r| r.image_id == record.image_id)
                .expect("subsampled record comes from the manifest");
            kept.push(original);
        }
    }

    let slice_flags: Vec<bool> = kept
        .iter()
        .map(|r| manifest.datasets[r.source_dataset].slice)
        .collect();

    let process = |(ordinal, (record, &needs_slice)): (usize, (&&AnnotatedImage, &bool))| {
        align_record(record, needs_slice, opts, ordinal)
    };
    let per_record: Vec<Result<Vec<AnnotatedImage>>> = if opts.deterministic {
        kept.iter().zip(&slice_flags).enumerate().map(process).collect()
    } else {
        kept.par_iter()
            .zip_eq(&slice_flags)
            .enumerate()
            .map(process)
            .collect()
    };

    let mut records = Vec::new();
    for batch in per_record {
        records.extend(batch?);
    }
    Ok(PooledManifest {
        datasets: manifest.datasets.clone(),
        taxonomy_digest: manifest.taxonomy_digest.clone(),
        index_map: manifest.index_map.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxCxcywh;
    use proptest::prelude::*;

    fn bare_image(width: u32, height: u32) -> AnnotatedImage {
        AnnotatedImage {
            image_id: "t/img".into(),
            source_dataset: 0,
            path: PathBuf::from("unused.png"),
            width,
            height,
            boxes: Vec::new(),
            class_ids: Vec::new(),
            ignore_regions: Vec::new(),
            frame_index: None,
        }
    }

    fn fixed_cfg(side: u32) -> SliceConfig {
        SliceConfig {
            patch_min: side,
            patch_max: side,
            overlap_ratio: 0.1,
            min_box_visibility: 0.3,
            seed: 7,
        }
    }

    #[test]
    fn origin_grid_stride_and_clamp() {
        // stride = 600 × 0.9 = 540; origin 540 would spill past 1024, so the
        // last origin clamps to 1024 − 600 = 424.
        assert_eq!(axis_origins(1024, 600, 0.1), vec![0, 424]);
        assert_eq!(axis_origins(600, 600, 0.1), vec![0]);
        assert_eq!(axis_origins(500, 600, 0.1), vec![0]);
    }

    #[test]
    fn small_image_yields_single_full_patch() {
        let mut img = bare_image(320, 240);
        img.boxes.push(BoxCxcywh::new(100.0, 100.0, 40.0, 30.0));
        img.class_ids.push(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = slice_image(&img, &SliceConfig::default(), &mut rng);
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].origin, (0, 0));
        assert_eq!(patches[0].record.width, 320);
        assert_eq!(patches[0].record.height, 240);
        assert_eq!(patches[0].record.boxes, img.boxes);
    }

    #[test]
    fn interior_box_round_trips_exactly() {
        let mut img = bare_image(1024, 1024);
        // Fully inside the patch at origin (424, 424).
        let original = BoxCxcywh::new(700.0, 700.0, 50.0, 40.0);
        img.boxes.push(original);
        img.class_ids.push(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patches = slice_image(&img, &fixed_cfg(600), &mut rng);
        let patch = patches
            .iter()
            .find(|p| p.origin == (424, 424))
            .expect("clamped origin exists");
        assert_eq!(patch.record.boxes.len(), 1);
        let b = patch.record.boxes[0];
        let back = b.shifted(patch.origin.0 as f64, patch.origin.1 as f64);
        assert!((back.cx - original.cx).abs() < 1e-6);
        assert!((back.cy - original.cy).abs() < 1e-6);
        assert!((back.w - original.w).abs() < 1e-6);
        assert!((back.h - original.h).abs() < 1e-6);
    }

    #[test]
    fn visibility_filter_drops_slivers() {
        let mut img = bare_image(1200, 600);
        // Box straddles x = 600: only 10 of 100 px wide visible in the left
        // patch → 0.1 < 0.3 → dropped there; right patch sees it fully.
        img.boxes.push(BoxCxcywh::new(640.0, 300.0, 100.0, 50.0));
        img.class_ids.push(0);
        let cfg = SliceConfig { min_box_visibility: 0.3, ..fixed_cfg(600) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patches = slice_image(&img, &cfg, &mut rng);
        for patch in &patches {
            for b in &patch.record.boxes {
                assert!(b.area() >= 0.3 * (100.0 * 50.0) - 1e-9);
            }
        }
        let left = patches.iter().find(|p| p.origin == (0, 0)).unwrap();
        assert!(left.record.boxes.is_empty());
        let total: usize = patches.iter().map(|p| p.record.boxes.len()).sum();
        assert!(total >= 1);
    }

    #[test]
    fn ignore_regions_follow_patches() {
        let mut img = bare_image(1200, 600);
        img.ignore_regions.push(PixelRect::new(550, 100, 100, 50));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patches = slice_image(&img, &fixed_cfg(600), &mut rng);
        let left = patches.iter().find(|p| p.origin == (0, 0)).unwrap();
        assert_eq!(left.record.ignore_regions, vec![PixelRect::new(550, 100, 50, 50)]);
        let right = patches.iter().find(|p| p.origin == (600, 0)).unwrap();
        assert_eq!(right.record.ignore_regions, vec![PixelRect::new(0, 100, 50, 50)]);
    }

    #[test]
    fn same_seed_same_patches() {
        let mut img = bare_image(1777, 933);
        img.boxes.push(BoxCxcywh::new(700.0, 700.0, 50.0, 40.0));
        img.class_ids.push(0);
        let cfg = SliceConfig::default();
        let a = slice_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let b = slice_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_keeps_multiples_of_stride() {
        let frames: Vec<AnnotatedImage> = (0..100u64)
            .map(|i| {
                let mut f = bare_image(64, 64);
                f.image_id = format!("v/{i:03}");
                f.frame_index = Some(i);
                f
            })
            .collect();
        let kept = subsample_video(&frames, 20).unwrap();
        let indices: Vec<u64> = kept.iter().map(|f| f.frame_index.unwrap()).collect();
        assert_eq!(indices, vec![0, 20, 40, 60, 80]);
        assert_eq!(kept.len(), (99 / 20) + 1);

        let identity = subsample_video(&frames, 1).unwrap();
        assert_eq!(identity.len(), frames.len());
    }

    #[test]
    fn subsample_requires_frame_indices() {
        let frames = vec![bare_image(64, 64)];
        assert!(matches!(
            subsample_video(&frames, 20),
            Err(Error::MissingFrameIndex { .. })
        ));
        assert!(matches!(
            subsample_video(&frames, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn masking_paints_exactly_the_union() {
        let mut img = RgbImage::from_pixel(64, 48, image::Rgb([10, 200, 30]));
        let regions = [PixelRect::new(5, 5, 20, 10), PixelRect::new(15, 8, 20, 10)];
        mask_ignore_regions(&mut img, &regions);

        // Oracle: rasterize membership per pixel, independent of the fill.
        let mut union_area = 0u64;
        for y in 0..48 {
            for x in 0..64 {
                let inside = regions.iter().any(|r| r.contains(x as f64 + 0.5, y as f64 + 0.5));
                if inside {
                    union_area += 1;
                }
                let px = img.get_pixel(x, y).0;
                if inside {
                    assert_eq!(px, IGNORE_GRAY);
                } else {
                    assert_eq!(px, [10, 200, 30]);
                }
            }
        }
        let gray_count = img.pixels().filter(|p| p.0 == IGNORE_GRAY).count() as u64;
        assert_eq!(gray_count, union_area);
    }

    #[test]
    fn masking_with_no_regions_is_identity() {
        let mut img = RgbImage::from_pixel(16, 16, image::Rgb([1, 2, 3]));
        let before = img.clone();
        mask_ignore_regions(&mut img, &[]);
        assert_eq!(img, before);

        mask_ignore_regions(&mut img, &[PixelRect::new(0, 0, 16, 16)]);
        assert!(img.pixels().all(|p| p.0 == IGNORE_GRAY));
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

        /// Every pixel of the image is inside at least one patch, every patch
        /// side is legal, and no surviving box is over-clipped.
        #[test]
        fn slicing_invariants(
            width in 100u32..2000,
            height in 100u32..2000,
            seed in 0u64..1_000_000,
        ) {
            let mut img = bare_image(width, height);
            img.boxes.push(BoxCxcywh::new(
                width as f64 * 0.4,
                height as f64 * 0.6,
                (width as f64 * 0.1).max(2.0),
                (height as f64 * 0.1).max(2.0),
            ));
            img.class_ids.push(0);
            let cfg = SliceConfig { seed, ..SliceConfig::default() };
            let patches = slice_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));

            let mut covered = vec![false; (width as usize) * (height as usize)];
            for patch in &patches {
                let (ox, oy) = patch.origin;
                let (pw, ph) = (patch.record.width, patch.record.height);
                // Patch legality.
                prop_assert!(ox + pw <= width && oy + ph <= height);
                let legal_w = (cfg.patch_min..=cfg.patch_max).contains(&pw) || pw == width;
                let legal_h = (cfg.patch_min..=cfg.patch_max).contains(&ph) || ph == height;
                prop_assert!(legal_w && legal_h);
                for y in oy..oy + ph {
                    let row = y as usize * width as usize;
                    covered[row + ox as usize..row + (ox + pw) as usize].fill(true);
                }
                // Visibility filter.
                for b in &patch.record.boxes {
                    prop_assert!(b.area() >= cfg.min_box_visibility * img.boxes[0].area() - 1e-9);
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
