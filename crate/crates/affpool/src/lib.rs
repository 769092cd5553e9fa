//! Multi-source detection data pooling with per-detection dataset affinity.
//!
//! The crate covers the full loop for assessing a pooled detection training
//! corpus:
//!
//! 1. align heterogeneous sources onto one label taxonomy and one sample
//!    layout ([`taxonomy`], [`corpus`], [`alignment`]),
//! 2. train a small single-shot detector whose extra head scores, per
//!    detection, which pooled dataset best explains it ([`model`],
//!    [`trainer`]),
//! 3. read the affinity distribution over true positives back as a judgement
//!    on the pool, and prune it ([`evaluator`]).
//!
//! [`synth`] generates multi-source synthetic corpora so the whole pipeline
//! runs self-contained.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the default precision used by the pipeline (`f32`) while tests
//! and gradient checks instantiate `f64`.

pub mod alignment;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for training and inference.
pub type PipelineScalar = f32;

/// Detector instantiated at pipeline precision.
pub type Detector = model::Detector<PipelineScalar>;
/// Box at pipeline precision.
pub type Box2 = geometry::BoxCxcywh<PipelineScalar>;
