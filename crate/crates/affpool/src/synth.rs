//! Deterministic multi-source synthetic scene generator.
//!
//! Each "dataset" is a style: background color and texture, a vehicle
//! palette, a shape family, size ranges, and clutter. Vehicles are flat-
//! shaded composite shapes (body, cabin, wheels) whose bounding boxes are
//! known exactly, so ground-truth source labels and box annotations are
//! free. Output layout matches any real dataset — an image directory plus
//! a COCO-style annotation JSON — so downstream modules cannot tell
//! synthetic from real.
//!
//! Determinism: every image is drawn from its own rng seeded by
//! `(dataset seed, ordinal)`, so regenerating a source yields byte-
//! identical files regardless of thread count.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_manifest, ingest_dataset, AnnotatedImage, CocoAnnotationEntry, CocoCategoryEntry,
    CocoDataset, CocoImageEntry, DatasetDescriptor, MediaKind, PooledManifest,
};
use crate::error::{Error, Result};
use crate::geometry::BoxCxcywh;
use crate::taxonomy::{load_taxonomy, TaxonomyMapping};

const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Vehicle silhouette family of a style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rects,
    Rounded,
    Ellipses,
}

/// Everything that makes one synthetic source look like itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub background: [u8; 3],
    pub background_noise_sigma: f64,
    pub vehicle_palette: Vec<[u8; 3]>,
    pub shape_family: ShapeFamily,
    /// Vehicle width range in pixels.
    pub scale_range: (u32, u32),
    /// Mean count of unannotated distractor shapes per image.
    pub clutter_density: f64,
    /// Spatial frequency of a sinusoidal background texture (0 = flat).
    pub texture_frequency: f64,
    /// Vehicles per image, inclusive range.
    pub vehicles_per_image: (u32, u32),
}

impl StyleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vehicle_palette.is_empty() {
            return bad("vehicle palette must not be empty".into());
        }
        if self.scale_range.0 < 4 || self.scale_range.0 > self.scale_range.1 {
            return bad(format!("scale range {:?} must be ≥4 and ordered", self.scale_range));
        }
        if self.vehicles_per_image.0 > self.vehicles_per_image.1 {
            return bad(format!("vehicle count range {:?} is reversed", self.vehicles_per_image));
        }
        if !(self.background_noise_sigma >= 0.0)
            || !(self.clutter_density >= 0.0)
            || !(self.texture_frequency >= 0.0)
        {
            return bad("noise sigma, clutter density, and texture frequency must be ≥ 0".into());
        }
        Ok(())
    }

    /// Interpolate toward `other`: `t = 0` keeps `self`, `t = 1` is `other`.
    /// Gives graded near/far variants of a target style.
    pub fn lerp(&self, other: &StyleParams, t: f64) -> StyleParams {
        let t = t.clamp(0.0, 1.0);
        let mixc = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
        let mix = |a: f64, b: f64| a + (b - a) * t;
        let palette = if self.vehicle_palette.len() == other.vehicle_palette.len() {
            self.vehicle_palette
                .iter()
                .zip(&other.vehicle_palette)
                .map(|(a, b)| [mixc(a[0], b[0]), mixc(a[1], b[1]), mixc(a[2], b[2])])
                .collect()
        } else if t < 0.5 {
            self.vehicle_palette.clone()
        } else {
            other.vehicle_palette.clone()
        };
        StyleParams {
            background: [
                mixc(self.background[0], other.background[0]),
                mixc(self.background[1], other.background[1]),
                mixc(self.background[2], other.background[2]),
            ],
            background_noise_sigma: mix(self.background_noise_sigma, other.background_noise_sigma),
            vehicle_palette: palette,
            shape_family: if t < 0.5 { self.shape_family } else { other.shape_family },
            scale_range: (
                mix(self.scale_range.0 as f64, other.scale_range.0 as f64).round() as u32,
                mix(self.scale_range.1 as f64, other.scale_range.1 as f64).round() as u32,
            ),
            clutter_density: mix(self.clutter_density, other.clutter_density),
            texture_frequency: mix(self.texture_frequency, other.texture_frequency),
            vehicles_per_image: self.vehicles_per_image,
        }
    }
}

/// The demo style family used by the default config and the end-to-end
/// experiment: three sources of graded similarity to a held-out target.
/// `src_a` is nearly the target, `src_b` is a moderate shift, and `src_c`
/// inverts contrast, shrinks the vehicles, and changes the silhouette —
/// a stand-in for a genuinely different domain.
pub fn demo_styles() -> (Vec<(String, StyleParams)>, StyleParams) {
    let target = StyleParams {
        background: [152, 164, 150],
        background_noise_sigma: 6.0,
        vehicle_palette: vec![[168, 32, 30], [32, 44, 148], [42, 42, 46], [198, 122, 32]],
        shape_family: ShapeFamily::Rounded,
        scale_range: (26, 52),
        clutter_density: 3.0,
        texture_frequency: 0.0,
        vehicles_per_image: (2, 5),
    };
    let src_a = StyleParams {
        background: [146, 158, 152],
        background_noise_sigma: 7.0,
        vehicle_palette: vec![[176, 36, 34], [28, 40, 142], [48, 48, 52], [204, 128, 38]],
        shape_family: ShapeFamily::Rounded,
        scale_range: (24, 52),
        clutter_density: 3.0,
        texture_frequency: 0.0,
        vehicles_per_image: (2, 5),
    };
    let src_b = StyleParams {
        background: [118, 136, 168],
        background_noise_sigma: 10.0,
        vehicle_palette: vec![[150, 34, 30], [30, 40, 130], [60, 60, 64], [180, 150, 40]],
        shape_family: ShapeFamily::Rects,
        scale_range: (20, 44),
        clutter_density: 5.0,
        texture_frequency: 2.0,
        vehicles_per_image: (2, 5),
    };
    let src_c = StyleParams {
        background: [34, 30, 34],
        background_noise_sigma: 14.0,
        vehicle_palette: vec![[202, 202, 206], [230, 224, 208], [164, 172, 182]],
        shape_family: ShapeFamily::Ellipses,
        scale_range: (10, 22),
        clutter_density: 10.0,
        texture_frequency: 6.0,
        vehicles_per_image: (2, 5),
    };
    (
        vec![
            ("src_a".to_string(), src_a),
            ("src_b".to_string(), src_b),
            ("src_c".to_string(), src_c),
        ],
        target,
    )
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, color: Rgb<u8>) {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..(y0 + h).min(ih) {
        for x in x0.max(0)..(x0 + w).min(iw) {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn fill_rounded(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, radius: f64, color: Rgb<u8>) {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    let r = radius.min(w as f64 / 2.0).min(h as f64 / 2.0);
    for y in y0.max(0)..(y0 + h).min(ih) {
        for x in x0.max(0)..(x0 + w).min(iw) {
            let fx = x as f64 + 0.5 - x0 as f64;
            let fy = y as f64 + 0.5 - y0 as f64;
            let dx = (r - fx).max(fx - (w as f64 - r)).max(0.0);
            let dy = (r - fy).max(fy - (h as f64 - r)).max(0.0);
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn fill_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, color: Rgb<u8>) {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    let (x0, x1) = ((cx - rx).floor() as i64, (cx + rx).ceil() as i64);
    let (y0, y1) = ((cy - ry).floor() as i64, (cy + ry).ceil() as i64);
    for y in y0.max(0)..=(y1.min(ih - 1)) {
        for x in x0.max(0)..=(x1.min(iw - 1)) {
            let nx = (x as f64 + 0.5 - cx) / rx;
            let ny = (y as f64 + 0.5 - cy) / ry;
            if nx * nx + ny * ny <= 1.0 {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn jitter_color(base: [u8; 3], amount: i32, rng: &mut ChaCha8Rng) -> Rgb<u8> {
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = base[c] as i32 + rng.gen_range(-amount..=amount);
        out[c] = v.clamp(0, 255) as u8;
    }
    Rgb(out)
}

fn darken(color: Rgb<u8>, factor: f64) -> Rgb<u8> {
    Rgb([
        (color.0[0] as f64 * factor) as u8,
        (color.0[1] as f64 * factor) as u8,
        (color.0[2] as f64 * factor) as u8,
    ])
}

/// Draw one vehicle composite filling exactly the `w × h` box at `(x0, y0)`:
/// a body spanning the full width and bottom, a cabin reaching the top, and
/// wheel dots. The returned annotation is that exact extent.
fn draw_vehicle(
    img: &mut RgbImage,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    family: ShapeFamily,
    color: Rgb<u8>,
) {
    let (x0, y0, w, h) = (x0 as i64, y0 as i64, w as i64, h as i64);
    let cabin_h = (h as f64 * 0.4).round() as i64;
    let body_y = y0 + cabin_h;
    let body_h = h - cabin_h;
    let cabin_w = (w as f64 * 0.55).round() as i64;
    let cabin_x = x0 + (w - cabin_w) / 2;
    let cabin_color = darken(color, 0.7);
    let wheel_color = darken(color, 0.35);
    match family {
        ShapeFamily::Rects => {
            fill_rect(img, x0, body_y, w, body_h, color);
            fill_rect(img, cabin_x, y0, cabin_w, cabin_h + 1, cabin_color);
        }
        ShapeFamily::Rounded => {
            fill_rounded(img, x0, body_y, w, body_h, body_h as f64 * 0.3, color);
            fill_rounded(img, cabin_x, y0, cabin_w, cabin_h + 1, cabin_h as f64 * 0.3, cabin_color);
            // Rounded corners shave the extreme columns; pin the extent.
            fill_rect(img, x0, body_y + body_h / 3, 1, body_h / 3 + 1, color);
            fill_rect(img, x0 + w - 1, body_y + body_h / 3, 1, body_h / 3 + 1, color);
        }
        ShapeFamily::Ellipses => {
            let body_cy = body_y as f64 + body_h as f64 / 2.0;
            fill_ellipse(img, x0 as f64 + w as f64 / 2.0, body_cy, w as f64 / 2.0, body_h as f64 / 2.0, color);
            fill_ellipse(
                img,
                (cabin_x + cabin_w / 2) as f64,
                y0 as f64 + cabin_h as f64 / 2.0 + 0.5,
                cabin_w as f64 / 2.0,
                cabin_h as f64 / 2.0 + 0.5,
                cabin_color,
            );
        }
    }
    let wheel_r = (h as f64 * 0.14).max(1.0);
    let wheel_y = (y0 + h) as f64 - wheel_r;
    fill_ellipse(img, x0 as f64 + w as f64 * 0.25, wheel_y, wheel_r, wheel_r, wheel_color);
    fill_ellipse(img, x0 as f64 + w as f64 * 0.75, wheel_y, wheel_r, wheel_r, wheel_color);
}

/// Render one image of a style; returns the pixels and the exact vehicle
/// boxes (center form).
pub fn synth_image(
    style: &StyleParams,
    image_size: u32,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, Vec<BoxCxcywh<f64>>) {
    let size = image_size;
    let mut img = RgbImage::from_pixel(size, size, Rgb(style.background));

    // Background: sinusoidal texture plus gaussian noise.
    let noise = Normal::new(0.0, style.background_noise_sigma.max(1e-9)).expect("valid sigma");
    let freq = style.texture_frequency;
    for y in 0..size {
        for x in 0..size {
            let tex = if freq > 0.0 {
                let fx = (x as f64 / size as f64 * freq * std::f64::consts::TAU).sin();
                let fy = (y as f64 / size as f64 * freq * std::f64::consts::TAU).sin();
                (fx + fy) * 9.0
            } else {
                0.0
            };
            let p = img.get_pixel_mut(x, y);
            for c in 0..3 {
                let n = if style.background_noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                p.0[c] = (p.0[c] as f64 + tex + n).clamp(0.0, 255.0) as u8;
            }
        }
    }

    // Clutter: unannotated background-toned distractors.
    let clutter = style.clutter_density.floor() as u32
        + u32::from(rng.gen_bool(style.clutter_density.fract().clamp(0.0, 1.0)));
    for _ in 0..clutter {
        let s = rng.gen_range(3..=(style.scale_range.0 / 2).max(4)) as i64;
        let x = rng.gen_range(0..size.saturating_sub(s as u32).max(1)) as i64;
        let y = rng.gen_range(0..size.saturating_sub(s as u32).max(1)) as i64;
        let color = jitter_color(style.background, 30, rng);
        if rng.gen_bool(0.5) {
            fill_rect(&mut img, x, y, s, s, color);
        } else {
            let r = s as f64 / 2.0;
            fill_ellipse(&mut img, x as f64 + r, y as f64 + r, r, r, color);
        }
    }

    // Vehicles: composite shapes with exact boxes; heavy overlap rejected.
    let count = rng.gen_range(style.vehicles_per_image.0..=style.vehicles_per_image.1);
    let mut boxes: Vec<BoxCxcywh<f64>> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut placed = None;
        for _attempt in 0..12 {
            let max_w = style.scale_range.1.min(size.saturating_sub(4));
            let w = rng.gen_range(style.scale_range.0.min(max_w)..=max_w);
            let h = ((w as f64 * rng.gen_range(0.5..0.8)).round() as u32).clamp(6, size - 4);
            let x0 = rng.gen_range(2..=(size - w - 2));
            let y0 = rng.gen_range(2..=(size - h - 2));
            let candidate = BoxCxcywh::from_xywh(x0 as f64, y0 as f64, w as f64, h as f64);
            if boxes.iter().all(|b| crate::geometry::iou(b, &candidate) < 0.25) {
                placed = Some((x0, y0, w, h, candidate));
                break;
            }
        }
        let Some((x0, y0, w, h, bbox)) = placed else { continue };
        let base = style.vehicle_palette[rng.gen_range(0..style.vehicle_palette.len())];
        let color = jitter_color(base, 10, rng);
        draw_vehicle(&mut img, x0, y0, w, h, style.shape_family, color);
        boxes.push(bbox);
    }
    (img, boxes)
}

fn image_rng(seed: u64, ordinal: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (ordinal as u64 + 1).wrapping_mul(SEED_MIX))
}

/// Generate one source dataset on disk: `out_root/<dataset_id>/images/…`
/// plus a COCO-style `annotations.json`. Byte-identical for a given seed.
pub fn generate_source(
    style: &StyleParams,
    n_images: usize,
    image_size: u32,
    seed: u64,
    dataset_id: &str,
    affinity_index: usize,
    out_root: &Path,
) -> Result<DatasetDescriptor> {
    style.validate()?;
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be ≥ 1".into()));
    }
    if image_size < 64 {
        return Err(Error::InvalidArgument("image size must be ≥ 64".into()));
    }
    let root = out_root.join(dataset_id);
    let image_root = root.join("images");
    std::fs::create_dir_all(&image_root).map_err(|e| Error::io(&image_root, e))?;

    let rendered: Vec<(RgbImage, Vec<BoxCxcywh<f64>>)> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = image_rng(seed, i);
            synth_image(style, image_size, &mut rng)
        })
        .collect();

    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::new();
    let mut ann_id = 1i64;
    for (i, (img, boxes)) in rendered.iter().enumerate() {
        let file_name = format!("img_{i:05}.png");
        crate::alignment::save_rgb(img, &image_root.join(&file_name))?;
        images.push(CocoImageEntry {
            id: i as i64,
            file_name,
            width: image_size,
            height: image_size,
            frame_index: None,
        });
        for b in boxes {
            annotations.push(CocoAnnotationEntry {
                id: ann_id,
                image_id: i as i64,
                category_id: 1,
                bbox: [b.left(), b.top(), b.w, b.h],
                iscrowd: 0,
                ignore: false,
            });
            ann_id += 1;
        }
    }
    let dataset = CocoDataset {
        images,
        annotations,
        categories: vec![CocoCategoryEntry { id: 1, name: "vehicle".to_string() }],
    };
    let annotation_path = root.join("annotations.json");
    let json = serde_json::to_vec_pretty(&dataset)?;
    std::fs::write(&annotation_path, json).map_err(|e| Error::io(&annotation_path, e))?;

    Ok(DatasetDescriptor {
        dataset_id: dataset_id.to_string(),
        annotation_path,
        image_root,
        media_kind: MediaKind::ImageCollection,
        affinity_index,
        slice: false,
    })
}

/// Identity taxonomy for a set of synthetic sources: one "vehicle"
/// super-category, one rule per dataset.
pub fn synthetic_taxonomy(dataset_ids: &[&str]) -> Result<TaxonomyMapping> {
    let mut text = String::from("super_categories = [\"vehicle\"]\n\n");
    for id in dataset_ids {
        text.push_str(&format!(
            "[[rules]]\ndataset = \"{id}\"\nlabel = \"vehicle\"\nmaps_to = \"vehicle\"\n\n"
        ));
    }
    load_taxonomy(&text)
}

/// What [`generate_pool`] produces: the combined training manifest plus a
/// held-out eval set drawn from the target style (never pooled).
#[derive(Debug, Clone)]
pub struct GeneratedPool {
    pub manifest: PooledManifest,
    /// Target-style records; `source_dataset` is 0 and meaningless — the
    /// target is by construction not a pool member.
    pub eval: Vec<AnnotatedImage>,
}

/// Generate `sources` plus a target-style eval set under `out_root`.
pub fn generate_pool(
    sources: &[(String, StyleParams)],
    target: &StyleParams,
    per_source: usize,
    eval_size: usize,
    image_size: u32,
    seed: u64,
    out_root: &Path,
) -> Result<GeneratedPool> {
    if sources.len() < 2 {
        return Err(Error::InvalidArgument("a pool needs at least two sources".into()));
    }
    if eval_size == 0 {
        return Err(Error::InvalidArgument("eval set must not be empty".into()));
    }
    let mut descriptors = Vec::with_capacity(sources.len());
    for (i, (id, style)) in sources.iter().enumerate() {
        let source_seed = seed ^ (i as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407);
        descriptors.push(generate_source(style, per_source, image_size, source_seed, id, i, out_root)?);
    }
    let ids: Vec<&str> = sources.iter().map(|(id, _)| id.as_str()).collect();
    let taxonomy = synthetic_taxonomy(&ids)?;
    let manifest = build_manifest(&descriptors, &taxonomy)?;

    let eval_seed = seed ^ 0xE7A1_57C0_DE57_1E5Du64;
    let eval_descriptor = generate_source(
        target,
        eval_size,
        image_size,
        eval_seed,
        "target_eval",
        0,
        out_root,
    )?;
    let eval_taxonomy = synthetic_taxonomy(&["target_eval"])?;
    let eval = ingest_dataset(&eval_descriptor, &eval_taxonomy)?;
    Ok(GeneratedPool { manifest, eval })
}

/// Sizes and seed for a complete demo corpus on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub per_source: usize,
    pub eval_size: usize,
    pub holdout_size: usize,
    pub image_size: u32,
    pub seed: u64,
}

/// Descriptors for everything [`generate_demo_corpus`] wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLayout {
    /// The training pool sources, affinity indices `0..N`.
    pub pool: Vec<DatasetDescriptor>,
    /// Target-style eval set (never pooled).
    pub eval: DatasetDescriptor,
    /// Holdout `i` replays pool source `i`'s style with a disjoint seed and
    /// carries `affinity_index = i`, so ingested records store the true
    /// source the affinity head should recover.
    pub holdouts: Vec<DatasetDescriptor>,
    /// Taxonomy config text covering every dataset id above.
    pub taxonomy_text: String,
}

/// Generate the full demo corpus: pool sources, target eval, and per-source
/// holdouts, plus a taxonomy covering all of them. Pool and eval bytes match
/// [`generate_pool`] for the same sizes and seed.
pub fn generate_demo_corpus(spec: &CorpusSpec, out_root: &Path) -> Result<CorpusLayout> {
    if spec.holdout_size == 0 {
        return Err(Error::InvalidArgument("holdout set must not be empty".into()));
    }
    let (sources, target) = demo_styles();
    let mut pool = Vec::with_capacity(sources.len());
    let mut holdouts = Vec::with_capacity(sources.len());
    for (i, (id, style)) in sources.iter().enumerate() {
        let source_seed = spec.seed ^ (i as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407);
        pool.push(generate_source(
            style,
            spec.per_source,
            spec.image_size,
            source_seed,
            id,
            i,
            out_root,
        )?);
        let holdout_seed = spec.seed ^ (i as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        holdouts.push(generate_source(
            style,
            spec.holdout_size,
            spec.image_size,
            holdout_seed,
            &format!("{id}_holdout"),
            i,
            out_root,
        )?);
    }
    let eval_seed = spec.seed ^ 0xE7A1_57C0_DE57_1E5Du64;
    let eval = generate_source(
        &target,
        spec.eval_size,
        spec.image_size,
        eval_seed,
        "target_eval",
        0,
        out_root,
    )?;

    let mut all_ids: Vec<&str> = pool.iter().map(|d| d.dataset_id.as_str()).collect();
    all_ids.extend(holdouts.iter().map(|d| d.dataset_id.as_str()));
    all_ids.push("target_eval");
    let mut taxonomy_text = String::from("super_categories = [\"vehicle\"]\n\n");
    for id in &all_ids {
        taxonomy_text.push_str(&format!(
            "[[rules]]\ndataset = \"{id}\"\nlabel = \"vehicle\"\nmaps_to = \"vehicle\"\n\n"
        ));
    }
    load_taxonomy(&taxonomy_text)?;

    Ok(CorpusLayout { pool, eval, holdouts, taxonomy_text })
}

/// Per-channel 256-bin color histogram, each channel L1-normalized;
/// channels concatenated (length 768).
pub fn color_histogram(img: &RgbImage) -> Vec<f64> {
    let mut bins = vec![0.0f64; 3 * 256];
    for p in img.pixels() {
        for c in 0..3 {
            bins[c * 256 + p.0[c] as usize] += 1.0;
        }
    }
    let n = (img.width() as f64) * (img.height() as f64);
    if n > 0.0 {
        for b in &mut bins {
            *b /= n;
        }
    }
    bins
}

/// Sum over channels of the 1-D Wasserstein distance between the channel
/// histograms, normalized to [0, 3]. Unlike bin-overlap measures this is
/// monotone in how far the colors moved, not just whether they moved.
pub fn histogram_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.len() % 256, 0);
    let mut total = 0.0;
    for chunk in 0..a.len() / 256 {
        let (mut cdf_a, mut cdf_b, mut dist) = (0.0, 0.0, 0.0);
        for i in 0..256 {
            cdf_a += a[chunk * 256 + i];
            cdf_b += b[chunk * 256 + i];
            dist += (cdf_a - cdf_b).abs();
        }
        total += dist / 255.0;
    }
    total
}

/// Mean pairwise histogram distance between (`inter`) and within (`intra`)
/// two sets of images.
pub fn style_separation(a: &[RgbImage], b: &[RgbImage]) -> (f64, f64) {
    let ha: Vec<Vec<f64>> = a.iter().map(color_histogram).collect();
    let hb: Vec<Vec<f64>> = b.iter().map(color_histogram).collect();
    let mut inter = 0.0;
    for x in &ha {
        for y in &hb {
            inter += histogram_distance(x, y);
        }
    }
    inter /= (ha.len() * hb.len()) as f64;
    let mut intra = 0.0;
    let mut pairs = 0usize;
    for set in [&ha, &hb] {
        for i in 0..set.len() {
            for j in (i + 1)..set.len() {
                intra += histogram_distance(&set[i], &set[j]);
                pairs += 1;
            }
        }
    }
    intra /= pairs.max(1) as f64;
    (inter, intra)
}
