use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the pooling / training / evaluation pipeline.
///
/// Variants are split between validation failures (bad configs, bad inputs,
/// contract violations caught before side effects) and runtime failures
/// (I/O, non-finite optimization). The CLI maps the two groups onto distinct
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    // --- taxonomy ---
    #[error("taxonomy config parse error: {0}")]
    TaxonomyParse(String),
    #[error("taxonomy declares no super-categories")]
    EmptyTaxonomy,
    #[error("duplicate super-category {0:?}")]
    DuplicateSuperCategory(String),
    #[error("super-category {0:?} is reserved")]
    ReservedSuperCategory(String),
    #[error("rule ({dataset:?}, {label:?}) maps to undeclared super-category {target:?}")]
    UndeclaredSuperCategory {
        dataset: String,
        label: String,
        target: String,
    },
    #[error("duplicate rule for ({dataset:?}, {label:?})")]
    DuplicateRule { dataset: String, label: String },
    #[error("no taxonomy rule registered for ({dataset:?}, {label:?})")]
    UnknownLabel { dataset: String, label: String },

    // --- corpus ---
    #[error("annotation file {path}: {message}")]
    MalformedAnnotations { path: PathBuf, message: String },
    #[error("dataset pool is empty")]
    EmptyPool,
    #[error("duplicate affinity index {0}")]
    DuplicateAffinityIndex(usize),
    #[error("affinity indices must cover 0..{expected} exactly, got {found:?}")]
    NonContiguousAffinityIndices { expected: usize, found: Vec<usize> },
    #[error("duplicate dataset id {0:?}")]
    DuplicateDatasetId(String),
    #[error("manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },
    #[error("subpool keep-set is empty or matches no dataset")]
    EmptySubpool,
    #[error("record {image_id:?} is missing a frame index required for video subsampling")]
    MissingFrameIndex { image_id: String },

    // --- model / training ---
    #[error("invalid detector config: {0}")]
    InvalidDetectorConfig(String),
    #[error("checkpoint {path}: {message}")]
    MalformedCheckpoint { path: PathBuf, message: String },
    #[error(
        "model expects {model} affinity datasets but the pool has {pool}; \
         retrain or pick the matching checkpoint"
    )]
    DatasetCountMismatch { model: usize, pool: usize },
    #[error("non-finite loss at step {step} (obj {obj}, cls {cls}, loc {loc}, aff {aff})")]
    NonFiniteLoss {
        step: usize,
        obj: f64,
        cls: f64,
        loc: f64,
        aff: f64,
    },
    #[error("degenerate target box (w={w}, h={h})")]
    DegenerateTargetBox { w: f64, h: f64 },

    // --- evaluation / reports ---
    #[error("detections file {path}: {message}")]
    MalformedDetections { path: PathBuf, message: String },
    #[error("cannot compare fewer than two runs")]
    TooFewRuns,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // --- plumbing ---
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a caller could have prevented by fixing inputs or
    /// configuration; false for runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
