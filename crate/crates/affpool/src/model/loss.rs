//! Loss terms and their analytic gradients.
//!
//! The combined objective is
//!
//! ```text
//! L = λ_obj·L_obj + λ_cls·L_cls + λ_loc·L_loc + λ_aff·L_aff
//! ```
//!
//! with binary cross entropy for objectness over every grid cell, focal loss
//! for classification (plain BCE when there is a single class) and for
//! dataset affinity, and complete IoU for box regression — the latter three
//! on positive cells only. With zero positive cells the positive-only terms
//! are defined as 0.
//!
//! Each op has a value form and an exact gradient form; a finite-difference
//! suite pins them against each other. Everything is computed in stable
//! log-sum arrangements so saturated logits stay finite.

use serde::{Deserialize, Serialize};

use super::{decode_cell_box, DetectorConfig, HeadGrads, HeadOutputs, TargetAssignment};
use crate::error::{Error, Result};
use crate::geometry::BoxCxcywh;
use crate::scalar::Scalar;

const CIOU_EPS: f64 = 1e-9;

/// Stable logistic function on the crate scalar.
pub fn sigmoid_s<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Stable `ln(1 + e^x)`.
fn softplus_s<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross entropy from logits; `targets` are 0/1.
pub fn bce_loss<S: Scalar>(logits: &[S], targets: &[S]) -> S {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return S::zero();
    }
    let sum: S = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| softplus_s(z) - z * t)
        .sum();
    sum / S::from_count(logits.len())
}

/// Gradient of [`bce_loss`] w.r.t. the logits: `(σ(z) − t) / n`.
pub fn bce_grad<S: Scalar>(logits: &[S], targets: &[S], d_logits: &mut [S]) {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), d_logits.len());
    let n = S::from_count(logits.len().max(1));
    for ((&z, &t), d) in logits.iter().zip(targets).zip(d_logits) {
        *d = (sigmoid_s(z) - t) / n;
    }
}

/// Mean focal loss from logits, binary-per-entry: `−α (1 − p_t)^γ ln p_t`
/// with `p_t = σ(z)` for target 1 and `σ(−z)` for target 0, averaged over
/// all entries. With `γ = 0, α = 1` this reduces exactly to [`bce_loss`].
pub fn focal_loss<S: Scalar>(logits: &[S], targets: &[S], gamma: f64, alpha: f64) -> S {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return S::zero();
    }
    let g = S::from_f64(gamma);
    let a = S::from_f64(alpha);
    let two = S::from_f64(2.0);
    let sum: S = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let s = two * t - S::one(); // ±1
            let u = s * z;
            let q = sigmoid_s(-u); // 1 − p_t
            let sp = softplus_s(-u); // −ln p_t
            a * q.powf(g) * sp
        })
        .sum();
    sum / S::from_count(logits.len())
}

/// Gradient of [`focal_loss`] w.r.t. the logits.
pub fn focal_grad<S: Scalar>(logits: &[S], targets: &[S], gamma: f64, alpha: f64, d_logits: &mut [S]) {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), d_logits.len());
    let g = S::from_f64(gamma);
    let a = S::from_f64(alpha);
    let two = S::from_f64(2.0);
    let n = S::from_count(logits.len().max(1));
    for ((&z, &t), d) in logits.iter().zip(targets).zip(d_logits) {
        let s = two * t - S::one();
        let u = s * z;
        let q = sigmoid_s(-u);
        let sp = softplus_s(-u);
        // dℓ/du = −α q^γ (γ (1−q) sp + q); chain u = s·z.
        *d = -s * a * q.powf(g) * (g * (S::one() - q) * sp + q) / n;
    }
}

/// Complete-IoU loss: `1 − IoU + ρ²/c² + α_v·v`. Zero iff the boxes are
/// identical.
pub fn ciou_loss<S: Scalar>(pred: &BoxCxcywh<S>, target: &BoxCxcywh<S>) -> Result<S> {
    ciou_grad(pred, target).map(|(loss, _)| loss)
}

/// [`ciou_loss`] together with its gradient w.r.t. the predicted
/// `(cx, cy, w, h)`. The aspect coefficient `α_v = v / (1 − IoU + v)` is
/// differentiated through rather than treated as a constant, so finite
/// differences of the value match this gradient everywhere.
pub fn ciou_grad<S: Scalar>(pred: &BoxCxcywh<S>, target: &BoxCxcywh<S>) -> Result<(S, [S; 4])> {
    if !(target.w.to_f64() > 0.0 && target.h.to_f64() > 0.0) {
        return Err(Error::DegenerateTargetBox {
            w: target.w.to_f64(),
            h: target.h.to_f64(),
        });
    }
    let zero = S::zero();
    let one = S::one();
    let two = S::from_f64(2.0);
    let half = S::from_f64(0.5);
    let eps = S::from_f64(CIOU_EPS);

    let (pl, pr, pt, pb) = (pred.left(), pred.right(), pred.top(), pred.bottom());
    let (tl, tr, tt, tb) = (target.left(), target.right(), target.top(), target.bottom());

    let iw = (pr.min(tr) - pl.max(tl)).max(zero);
    let ih = (pb.min(tb) - pt.max(tt)).max(zero);
    let inter = iw * ih;
    let union = pred.area() + target.area() - inter;
    let iou = inter / union;

    let dx = pred.cx - target.cx;
    let dy = pred.cy - target.cy;
    let rho2 = dx * dx + dy * dy;

    let cw = pr.max(tr) - pl.min(tl);
    let ch = pb.max(tb) - pt.min(tt);
    let c2 = cw * cw + ch * ch + eps;

    let four_over_pi2 = S::from_f64(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let phi = (target.w / target.h).atan() - (pred.w / pred.h).atan();
    let v = four_over_pi2 * phi * phi;
    let dcap = one - iou + v + eps; // denominator of α_v
    let loss = one - iou + rho2 / c2 + v * v / dcap;

    // Partials w.r.t. the scalar intermediates (α_v·v = v²/D, ∂D/∂IoU = −1).
    let dl_diou = -one + v * v / (dcap * dcap);
    let dl_dv = (two * v * dcap - v * v) / (dcap * dcap);
    let dl_drho2 = one / c2;
    let dl_dc2 = -rho2 / (c2 * c2);

    let u2 = union * union;
    let diou_dinter = (union + inter) / u2;
    let diou_dareap = -inter / u2;

    // Corner gradients (l, t, r, b) from intersection and enclosing box.
    let (mut g_l, mut g_t, mut g_r, mut g_b) = (zero, zero, zero, zero);
    if inter > zero {
        let k = dl_diou * diou_dinter;
        if pl > tl {
            g_l -= k * ih;
        }
        if pr < tr {
            g_r += k * ih;
        }
        if pt > tt {
            g_t -= k * iw;
        }
        if pb < tb {
            g_b += k * iw;
        }
    }
    if pl < tl {
        g_l -= dl_dc2 * two * cw;
    }
    if pr > tr {
        g_r += dl_dc2 * two * cw;
    }
    if pt < tt {
        g_t -= dl_dc2 * two * ch;
    }
    if pb > tb {
        g_b += dl_dc2 * two * ch;
    }

    // Corners → center form: l = cx − w/2, r = cx + w/2.
    let mut g_cx = g_l + g_r;
    let mut g_cy = g_t + g_b;
    let mut g_w = (g_r - g_l) * half;
    let mut g_h = (g_b - g_t) * half;

    g_cx += dl_drho2 * two * dx;
    g_cy += dl_drho2 * two * dy;

    g_w += dl_diou * diou_dareap * pred.h;
    g_h += dl_diou * diou_dareap * pred.w;

    let wh2 = pred.w * pred.w + pred.h * pred.h;
    g_w += dl_dv * (-two * four_over_pi2 * phi * pred.h / wh2);
    g_h += dl_dv * (two * four_over_pi2 * phi * pred.w / wh2);

    Ok((loss, [g_cx, g_cy, g_w, g_h]))
}

/// Individual Eq. 2 terms plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<S> {
    pub obj: S,
    pub cls: S,
    pub loc: S,
    pub aff: S,
    pub total: S,
}

/// Combined loss of one image.
pub fn total_loss<S: Scalar>(
    outputs: &HeadOutputs<S>,
    assignment: &TargetAssignment,
    cfg: &DetectorConfig,
) -> Result<LossComponents<S>> {
    compute(outputs, assignment, cfg, false).map(|(c, _)| c)
}

/// Combined loss plus its gradient w.r.t. every head logit. The gradient
/// includes the λ weights, i.e. it is the gradient of `total`.
pub fn total_loss_grad<S: Scalar>(
    outputs: &HeadOutputs<S>,
    assignment: &TargetAssignment,
    cfg: &DetectorConfig,
) -> Result<(LossComponents<S>, HeadGrads<S>)> {
    compute(outputs, assignment, cfg, true).map(|(c, g)| (c, g.expect("grads requested")))
}

fn compute<S: Scalar>(
    outputs: &HeadOutputs<S>,
    assignment: &TargetAssignment,
    cfg: &DetectorConfig,
    want_grads: bool,
) -> Result<(LossComponents<S>, Option<HeadGrads<S>>)> {
    let g = outputs.grid;
    assert_eq!(assignment.grid, g, "assignment grid must match outputs");
    assert_eq!(outputs.cls.dim().0, cfg.num_classes);
    assert_eq!(outputs.aff.dim().0, cfg.num_datasets);
    let num_pos = assignment.positives.len();
    let w = &cfg.loss_weights;
    let (lam_obj, lam_cls, lam_loc, lam_aff) = (
        S::from_f64(w.lambda_obj),
        S::from_f64(w.lambda_cls),
        S::from_f64(w.lambda_loc),
        S::from_f64(w.lambda_aff),
    );
    let mut grads = if want_grads {
        Some(HeadOutputs::zeroed(g, cfg.num_classes, cfg.num_datasets))
    } else {
        None
    };

    // Objectness over every cell.
    let mut obj_targets = vec![S::zero(); g * g];
    for p in &assignment.positives {
        obj_targets[p.gy * g + p.gx] = S::one();
    }
    let obj_logits = outputs.obj.as_slice().expect("contiguous obj");
    let l_obj = bce_loss(obj_logits, &obj_targets);
    if let Some(grads) = grads.as_mut() {
        let d = grads.obj.as_slice_mut().unwrap();
        bce_grad(obj_logits, &obj_targets, d);
        d.iter_mut().for_each(|v| *v *= lam_obj);
    }

    let (mut l_cls, mut l_loc, mut l_aff) = (S::zero(), S::zero(), S::zero());
    if num_pos > 0 {
        let npos = S::from_count(num_pos);

        // Classification on positive cells: BCE against 1 when there is a
        // single super-category, focal over the one-hot matrix otherwise.
        if cfg.num_classes == 1 {
            let logits: Vec<S> = assignment
                .positives
                .iter()
                .map(|p| outputs.cls[[0, p.gy, p.gx]])
                .collect();
            let targets = vec![S::one(); num_pos];
            l_cls = bce_loss(&logits, &targets);
            if let Some(grads) = grads.as_mut() {
                let mut d = vec![S::zero(); num_pos];
                bce_grad(&logits, &targets, &mut d);
                for (p, dv) in assignment.positives.iter().zip(d) {
                    grads.cls[[0, p.gy, p.gx]] = dv * lam_cls;
                }
            }
        } else {
            let c = cfg.num_classes;
            let mut logits = Vec::with_capacity(num_pos * c);
            let mut targets = vec![S::zero(); num_pos * c];
            for (i, p) in assignment.positives.iter().enumerate() {
                for ci in 0..c {
                    logits.push(outputs.cls[[ci, p.gy, p.gx]]);
                }
                targets[i * c + p.class_id] = S::one();
            }
            l_cls = focal_loss(&logits, &targets, cfg.focal_gamma, cfg.focal_alpha);
            if let Some(grads) = grads.as_mut() {
                let mut d = vec![S::zero(); logits.len()];
                focal_grad(&logits, &targets, cfg.focal_gamma, cfg.focal_alpha, &mut d);
                for (i, p) in assignment.positives.iter().enumerate() {
                    for ci in 0..c {
                        grads.cls[[ci, p.gy, p.gx]] = d[i * c + ci] * lam_cls;
                    }
                }
            }
        }

        // Affinity: focal against the image's source dataset.
        {
            let n = cfg.num_datasets;
            let mut logits = Vec::with_capacity(num_pos * n);
            let mut targets = vec![S::zero(); num_pos * n];
            for (i, p) in assignment.positives.iter().enumerate() {
                for di in 0..n {
                    logits.push(outputs.aff[[di, p.gy, p.gx]]);
                }
                targets[i * n + assignment.dataset] = S::one();
            }
            l_aff = focal_loss(&logits, &targets, cfg.focal_gamma, cfg.focal_alpha);
            if let Some(grads) = grads.as_mut() {
                let mut d = vec![S::zero(); logits.len()];
                focal_grad(&logits, &targets, cfg.focal_gamma, cfg.focal_alpha, &mut d);
                for (i, p) in assignment.positives.iter().enumerate() {
                    for di in 0..n {
                        grads.aff[[di, p.gy, p.gx]] = d[i * n + di] * lam_aff;
                    }
                }
            }
        }

        // Localization: mean CIoU of decoded boxes, backpropagated through
        // the decode transform (sigmoid center offsets, exponential sizes).
        let stride = S::from_f64(cfg.grid_stride as f64);
        let mut loc_sum = S::zero();
        for p in &assignment.positives {
            let raw = [
                outputs.box_raw[[0, p.gy, p.gx]],
                outputs.box_raw[[1, p.gy, p.gx]],
                outputs.box_raw[[2, p.gy, p.gx]],
                outputs.box_raw[[3, p.gy, p.gx]],
            ];
            let decoded = decode_cell_box(raw, p.gx, p.gy, stride);
            let target = p.bbox.map(S::from_f64);
            if want_grads {
                let (loss, d_box) = ciou_grad(&decoded, &target)?;
                loc_sum += loss;
                let grads = grads.as_mut().unwrap();
                let sx = sigmoid_s(raw[0]);
                let sy = sigmoid_s(raw[1]);
                let scale = lam_loc / npos;
                grads.box_raw[[0, p.gy, p.gx]] =
                    d_box[0] * stride * sx * (S::one() - sx) * scale;
                grads.box_raw[[1, p.gy, p.gx]] =
                    d_box[1] * stride * sy * (S::one() - sy) * scale;
                grads.box_raw[[2, p.gy, p.gx]] = d_box[2] * decoded.w * scale;
                grads.box_raw[[3, p.gy, p.gx]] = d_box[3] * decoded.h * scale;
            } else {
                loc_sum += ciou_loss(&decoded, &target)?;
            }
        }
        l_loc = loc_sum / npos;
    }

    let total = lam_obj * l_obj + lam_cls * l_cls + lam_loc * l_loc + lam_aff * l_aff;
    Ok((
        LossComponents { obj: l_obj, cls: l_cls, loc: l_loc, aff: l_aff, total },
        grads,
    ))
}
