//! The `affpool` config file: one TOML document with a section per command.
//!
//! Every field is optional. Precedence is command-line flag, then config
//! file, then built-in default, so a config file can pin a whole experiment
//! while individual runs still override single knobs.

use std::path::{Path, PathBuf};

use affpool::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Base seed for every seeded stage.
    pub seed: Option<u64>,
    /// Strictly serial execution for bit-reproducible artifacts.
    pub deterministic: Option<bool>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub align: AlignSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub out_dir: Option<PathBuf>,
    pub per_source: Option<usize>,
    pub eval_size: Option<usize>,
    pub holdout_size: Option<usize>,
    pub image_size: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignSection {
    pub images_dir: Option<PathBuf>,
    pub video_stride: Option<u64>,
    pub patch_min: Option<u32>,
    pub patch_max: Option<u32>,
    pub overlap: Option<f64>,
    pub min_box_visibility: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: Option<u32>,
    pub grid_stride: Option<u32>,
    pub num_classes: Option<usize>,
    pub channel_widths: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub balanced_sampling: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    pub conf_threshold: Option<f64>,
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub iou_threshold: Option<f64>,
    pub top_k: Option<usize>,
}

impl AppConfig {
    /// Parse `path`, or return the all-defaults config when no file given.
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let Some(path) = path else {
            return Ok(AppConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }
}

/// Flag, then config, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
