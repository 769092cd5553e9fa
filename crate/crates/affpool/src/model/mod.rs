//! Single-shot detector with a dataset-affinity head.
//!
//! Per grid cell the network emits an objectness logit, class logits, a raw
//! box encoding, and — the point of this crate — affinity logits over the N
//! pooled training datasets. Decoding turns a cell into a detection
//! `(o, b, c, a)` where `a` is the softmax over affinity logits: a
//! multinomial-regression estimate of which dataset best explains the
//! detection.
//!
//! The trunk is a stack of stride-2 3×3 convolutions (one per halving of the
//! input resolution down to the grid stride); all four heads are 1×1
//! projections of the same final feature map, so the affinity head is
//! structurally parallel to the classification head. Assignment is
//! anchor-free: the cell containing a box center owns that box, smallest box
//! winning ties.

pub mod loss;
pub mod net;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    bce_grad, bce_loss, ciou_grad, ciou_loss, focal_grad, focal_loss, total_loss,
    total_loss_grad, LossComponents,
};
pub use net::{ConvLayer, ForwardCache, Layers};

use crate::corpus::AnnotatedImage;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCxcywh};
use crate::scalar::Scalar;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Initial objectness bias; biases cells toward background at step 0.
pub const OBJ_BIAS_INIT: f64 = -2.0;

/// Eq. 2 term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_obj: f64,
    pub lambda_cls: f64,
    pub lambda_loc: f64,
    pub lambda_aff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_obj: 0.7,
            lambda_cls: 0.3,
            lambda_loc: 0.05,
            lambda_aff: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: u32,
    /// Pixels per grid cell; the trunk has `log2(grid_stride)` stages.
    pub grid_stride: u32,
    pub num_classes: usize,
    /// Pool size N the affinity head predicts over.
    pub num_datasets: usize,
    /// Output channels per trunk stage; length must equal `log2(grid_stride)`.
    pub channel_widths: Vec<usize>,
    pub loss_weights: LossWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 320,
            grid_stride: 16,
            num_classes: 1,
            num_datasets: 1,
            channel_widths: vec![8, 16, 16, 32],
            loss_weights: LossWeights::default(),
            focal_gamma: 1.5,
            focal_alpha: 0.25,
        }
    }
}

impl DetectorConfig {
    pub fn grid_size(&self) -> usize {
        (self.input_size / self.grid_stride) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDetectorConfig(m));
        if self.input_size == 0 || self.grid_stride == 0 {
            return bad("input_size and grid_stride must be positive".into());
        }
        if self.input_size % self.grid_stride != 0 {
            return bad(format!(
                "input_size {} not divisible by grid_stride {}",
                self.input_size, self.grid_stride
            ));
        }
        if self.num_classes == 0 || self.num_datasets == 0 {
            return bad("num_classes and num_datasets must be ≥ 1".into());
        }
        if self.channel_widths.is_empty() || self.channel_widths.iter().any(|&w| w == 0) {
            return bad("channel_widths must be non-empty and positive".into());
        }
        if self.channel_widths.len() >= usize::BITS as usize
            || (1u32 << self.channel_widths.len()) != self.grid_stride
        {
            return bad(format!(
                "{} trunk stages reduce by {}, not grid_stride {}",
                self.channel_widths.len(),
                1u64 << self.channel_widths.len(),
                self.grid_stride
            ));
        }
        if self.focal_gamma < 0.0 {
            return bad("focal_gamma must be ≥ 0".into());
        }
        if !(0.0 < self.focal_alpha && self.focal_alpha <= 1.0) {
            return bad("focal_alpha must be in (0, 1]".into());
        }
        let w = &self.loss_weights;
        if [w.lambda_obj, w.lambda_cls, w.lambda_loc, w.lambda_aff]
            .iter()
            .any(|&l| !(l >= 0.0))
        {
            return bad("loss weights must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Raw per-cell logits of the four heads. Also reused, shape-for-shape, as
/// the gradient of the loss w.r.t. those logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<S> {
    pub grid: usize,
    /// `(G, G)` objectness logits.
    pub obj: Array2<S>,
    /// `(num_classes, G, G)` class logits.
    pub cls: Array3<S>,
    /// `(4, G, G)` raw box encoding `(tx, ty, tw, th)`.
    pub box_raw: Array3<S>,
    /// `(num_datasets, G, G)` affinity logits.
    pub aff: Array3<S>,
}

impl<S: Scalar> HeadOutputs<S> {
    pub fn zeroed(grid: usize, num_classes: usize, num_datasets: usize) -> Self {
        Self {
            grid,
            obj: Array2::default((grid, grid)),
            cls: Array3::default((num_classes, grid, grid)),
            box_raw: Array3::default((4, grid, grid)),
            aff: Array3::default((num_datasets, grid, grid)),
        }
    }
}

/// Gradients w.r.t. head logits share the output shapes.
pub type HeadGrads<S> = HeadOutputs<S>;

/// One decoded detection: `d = (o, b, c, a)` plus the hard dataset
/// assignment `argmax(a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub objectness: f64,
    pub bbox: BoxCxcywh<f64>,
    pub class_scores: Vec<f64>,
    /// Softmax over dataset-affinity logits; sums to 1.
    pub affinity: Vec<f64>,
    pub assigned_dataset: usize,
}

/// A cell responsible for one ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveCell {
    pub gy: usize,
    pub gx: usize,
    pub class_id: usize,
    /// Target box in input-frame pixels.
    pub bbox: BoxCxcywh<f64>,
}

/// Training targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub grid: usize,
    /// Affinity index of the image's source dataset (one-hot target for
    /// every positive cell).
    pub dataset: usize,
    pub positives: Vec<PositiveCell>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction; output sums to 1.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum (ties resolve to the lowest index).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box decoding for one cell: sigmoid-bounded center offset inside the cell,
/// exponential width/height in units of the stride.
pub fn decode_cell_box<S: Scalar>(raw: [S; 4], gx: usize, gy: usize, stride: S) -> BoxCxcywh<S> {
    BoxCxcywh {
        cx: (S::from_count(gx) + loss::sigmoid_s(raw[0])) * stride,
        cy: (S::from_count(gy) + loss::sigmoid_s(raw[1])) * stride,
        w: stride * raw[2].exp(),
        h: stride * raw[3].exp(),
    }
}

/// Map ground truth (already in input-frame pixels) onto grid cells: the
/// cell containing a box center becomes positive; when several boxes share a
/// cell the smallest area wins, with a coordinate tiebreak so the outcome is
/// independent of box order.
pub fn assign_targets(gt: &AnnotatedImage, cfg: &DetectorConfig) -> TargetAssignment {
    let grid = cfg.grid_size();
    let stride = cfg.grid_stride as f64;
    let mut owner: std::collections::BTreeMap<(usize, usize), PositiveCell> =
        std::collections::BTreeMap::new();
    for (b, &class_id) in gt.boxes.iter().zip(&gt.class_ids) {
        let gx = ((b.cx / stride).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let gy = ((b.cy / stride).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let candidate = PositiveCell { gy, gx, class_id, bbox: *b };
        match owner.get_mut(&(gy, gx)) {
            None => {
                owner.insert((gy, gx), candidate);
            }
            Some(existing) => {
                let new_key = (b.area(), b.cx, b.cy, b.w, b.h);
                let old = &existing.bbox;
                let old_key = (old.area(), old.cx, old.cy, old.w, old.h);
                if new_key < old_key {
                    *existing = candidate;
                }
            }
        }
    }
    TargetAssignment {
        grid,
        dataset: gt.source_dataset,
        positives: owner.into_values().collect(),
    }
}

/// Turn head outputs into detections: threshold on sigmoid objectness,
/// decode boxes, sigmoid class scores, softmax affinity, then greedy
/// per-class NMS in descending objectness.
pub fn decode<S: Scalar>(
    outputs: &HeadOutputs<S>,
    cfg: &DetectorConfig,
    conf_threshold: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let g = outputs.grid;
    let stride = cfg.grid_stride as f64;
    let mut candidates: Vec<(usize, Detection)> = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let o = sigmoid(outputs.obj[[gy, gx]].to_f64());
            if o < conf_threshold {
                continue;
            }
            let raw = [
                outputs.box_raw[[0, gy, gx]].to_f64(),
                outputs.box_raw[[1, gy, gx]].to_f64(),
                outputs.box_raw[[2, gy, gx]].to_f64(),
                outputs.box_raw[[3, gy, gx]].to_f64(),
            ];
            let bbox = decode_cell_box(raw, gx, gy, stride);
            let class_scores: Vec<f64> = (0..cfg.num_classes)
                .map(|c| sigmoid(outputs.cls[[c, gy, gx]].to_f64()))
                .collect();
            let aff_logits: Vec<f64> = (0..cfg.num_datasets)
                .map(|d| outputs.aff[[d, gy, gx]].to_f64())
                .collect();
            let affinity = softmax(&aff_logits);
            let assigned_dataset = argmax(&affinity);
            candidates.push((
                gy * g + gx,
                Detection {
                    objectness: o,
                    bbox,
                    class_scores,
                    affinity,
                    assigned_dataset,
                },
            ));
        }
    }
    candidates.sort_by(|(ia, a), (ib, b)| {
        b.objectness
            .partial_cmp(&a.objectness)
            .expect("finite objectness")
            .then(ia.cmp(ib))
    });

    let mut kept: Vec<(usize, Detection)> = Vec::new();
    'next: for (_cell, det) in candidates {
        let class = argmax(&det.class_scores);
        for (kept_class, kept_det) in &kept {
            if *kept_class == class && iou(&kept_det.bbox, &det.bbox) > nms_iou {
                continue 'next;
            }
        }
        kept.push((class, det));
    }
    kept.into_iter().map(|(_, det)| det).collect()
}

/// The detector: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<S: Scalar> {
    pub config: DetectorConfig,
    pub layers: Layers<S>,
}

impl<S: Scalar> Detector<S> {
    fn build_layers(cfg: &DetectorConfig, mut init: impl FnMut(usize, usize, usize, usize) -> ConvLayer<S>) -> Layers<S> {
        let mut trunk = Vec::with_capacity(cfg.channel_widths.len());
        let mut in_ch = 3;
        for &out_ch in &cfg.channel_widths {
            trunk.push(init(in_ch, out_ch, 3, 2));
            in_ch = out_ch;
        }
        Layers {
            trunk,
            obj: init(in_ch, 1, 1, 1),
            cls: init(in_ch, cfg.num_classes, 1, 1),
            boxes: init(in_ch, 4, 1, 1),
            aff: init(in_ch, cfg.num_datasets, 1, 1),
        }
    }

    /// All-zero parameters (useful for shape tests and as a worst case).
    pub fn zeroed(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let layers = Self::build_layers(&config, ConvLayer::zeroed);
        Ok(Self { config, layers })
    }

    /// He-initialized weights; objectness bias starts at [`OBJ_BIAS_INIT`] so
    /// the untrained detector predicts background.
    pub fn init(config: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Self::build_layers(&config, |i, o, k, s| ConvLayer::he_init(i, o, k, s, rng));
        layers.obj.bias[0] = S::from_f64(OBJ_BIAS_INIT);
        Ok(Self { config, layers })
    }

    pub fn num_params(&self) -> usize {
        self.layers.param_len()
    }

    fn input_side(&self) -> usize {
        self.config.input_size as usize
    }

    fn check_input<'a>(&self, input: &'a Array3<S>) -> &'a [S] {
        let side = self.input_side();
        assert_eq!(
            input.dim(),
            (3, side, side),
            "input must be (3, {side}, {side}) RGB in [0,1]"
        );
        input.as_slice().expect("contiguous input")
    }

    fn run_trunk(&self, input: &[S]) -> ForwardCache<S> {
        let mut stages: Vec<Vec<S>> = Vec::with_capacity(self.layers.trunk.len());
        let mut dims = Vec::with_capacity(self.layers.trunk.len());
        let (mut h, mut w) = (self.input_side(), self.input_side());
        for (i, layer) in self.layers.trunk.iter().enumerate() {
            let mut out = Vec::new();
            let (oh, ow) = {
                let src: &[S] = if i == 0 { input } else { &stages[i - 1] };
                layer.forward(src, h, w, &mut out)
            };
            net::leaky_relu(&mut out);
            stages.push(out);
            dims.push((oh, ow));
            h = oh;
            w = ow;
        }
        ForwardCache { stages, dims }
    }

    fn run_heads(&self, cache: &ForwardCache<S>) -> HeadOutputs<S> {
        let feat = cache.stages.last().expect("at least one trunk stage");
        let &(fh, fw) = cache.dims.last().unwrap();
        debug_assert_eq!((fh, fw), (self.config.grid_size(), self.config.grid_size()));
        let mut buf = Vec::new();
        self.layers.obj.forward(feat, fh, fw, &mut buf);
        let obj = Array2::from_shape_vec((fh, fw), buf.clone()).unwrap();
        self.layers.cls.forward(feat, fh, fw, &mut buf);
        let cls = Array3::from_shape_vec((self.config.num_classes, fh, fw), buf.clone()).unwrap();
        self.layers.boxes.forward(feat, fh, fw, &mut buf);
        let box_raw = Array3::from_shape_vec((4, fh, fw), buf.clone()).unwrap();
        self.layers.aff.forward(feat, fh, fw, &mut buf);
        let aff = Array3::from_shape_vec((self.config.num_datasets, fh, fw), buf).unwrap();
        HeadOutputs { grid: fh, obj, cls, box_raw, aff }
    }

    /// Inference pass. `input` is `(3, input_size, input_size)` RGB
    /// normalized to `[0, 1]`.
    pub fn forward(&self, input: &Array3<S>) -> HeadOutputs<S> {
        let input = self.check_input(input);
        self.run_heads(&self.run_trunk(input))
    }

    /// Forward pass that also returns the activations needed by
    /// [`Detector::backward`].
    pub fn forward_cached(&self, input: &Array3<S>) -> (HeadOutputs<S>, ForwardCache<S>) {
        let input = self.check_input(input);
        let cache = self.run_trunk(input);
        (self.run_heads(&cache), cache)
    }

    /// Backpropagate loss gradients w.r.t. head logits into parameter
    /// gradients.
    pub fn backward(
        &self,
        input: &Array3<S>,
        cache: &ForwardCache<S>,
        d_heads: &HeadGrads<S>,
    ) -> Layers<S> {
        let input = self.check_input(input);
        let mut grads = self.layers.zeroed_like();
        let feat = cache.stages.last().expect("trunk ran");
        let &(fh, fw) = cache.dims.last().unwrap();
        let mut d_feat = vec![S::zero(); feat.len()];

        for (layer, grad, d_out) in [
            (&self.layers.obj, &mut grads.obj, d_heads.obj.as_slice().unwrap()),
            (&self.layers.cls, &mut grads.cls, d_heads.cls.as_slice().unwrap()),
            (&self.layers.boxes, &mut grads.boxes, d_heads.box_raw.as_slice().unwrap()),
            (&self.layers.aff, &mut grads.aff, d_heads.aff.as_slice().unwrap()),
        ] {
            layer.backward(
                feat,
                fh,
                fw,
                d_out,
                &mut grad.weight,
                &mut grad.bias,
                Some(&mut d_feat),
            );
        }

        let mut d_cur = d_feat;
        for i in (0..self.layers.trunk.len()).rev() {
            net::leaky_relu_backward(&cache.stages[i], &mut d_cur);
            let layer = &self.layers.trunk[i];
            let grad = &mut grads.trunk[i];
            if i == 0 {
                let side = self.input_side();
                layer.backward(input, side, side, &d_cur, &mut grad.weight, &mut grad.bias, None);
            } else {
                let src = &cache.stages[i - 1];
                let (sh, sw) = cache.dims[i - 1];
                let mut d_prev = vec![S::zero(); src.len()];
                layer.backward(src, sh, sw, &d_cur, &mut grad.weight, &mut grad.bias, Some(&mut d_prev));
                d_cur = d_prev;
            }
        }
        grads
    }
}
