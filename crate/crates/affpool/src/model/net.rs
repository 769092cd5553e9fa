//! The detector network: a small strided conv trunk and four 1×1 heads.
//!
//! Everything is written against flat `(C, H, W)` slices with hand-rolled
//! loops and a matching manual backward pass — the network is deliberately
//! tiny (tens of thousands of parameters, single detection scale), so a
//! dependency-free implementation keeps training CPU-cheap and bit-exactly
//! reproducible.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.1;

/// 2-D convolution with square kernel and implicit zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer<S> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    /// `(out_ch, in_ch, k, k)` row-major.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> ConvLayer<S> {
    pub fn zeroed(in_ch: usize, out_ch: usize, ksize: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            ksize,
            stride,
            weight: vec![S::zero(); out_ch * in_ch * ksize * ksize],
            bias: vec![S::zero(); out_ch],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init(in_ch: usize, out_ch: usize, ksize: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeroed(in_ch, out_ch, ksize, stride);
        let std = (2.0 / (in_ch * ksize * ksize) as f64).sqrt();
        for w in &mut layer.weight {
            let z: f64 = StandardNormal.sample(rng);
            *w = S::from_f64(z * std);
        }
        layer
    }

    fn pad(&self) -> usize {
        self.ksize / 2
    }

    pub fn out_dims(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (in_h + 2 * p - self.ksize) / self.stride + 1,
            (in_w + 2 * p - self.ksize) / self.stride + 1,
        )
    }

    pub fn forward(&self, input: &[S], in_h: usize, in_w: usize, out: &mut Vec<S>) -> (usize, usize) {
        debug_assert_eq!(input.len(), self.in_ch * in_h * in_w);
        let (oh, ow) = self.out_dims(in_h, in_w);
        out.clear();
        out.resize(self.out_ch * oh * ow, S::zero());
        let (k, s, p) = (self.ksize, self.stride, self.pad());
        // Tap-major loops: the weight is hoisted to a scalar and the inner
        // loop walks one row, which the optimizer unrolls/vectorizes — the
        // per-pixel gather form is several times slower on large maps.
        for oc in 0..self.out_ch {
            let out_oc = oc * oh * ow;
            let b = self.bias[oc];
            out[out_oc..out_oc + oh * ow].iter_mut().for_each(|v| *v = b);
            for ic in 0..self.in_ch {
                let in_ic = ic * in_h * in_w;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = tap_range(ky, p, s, in_h, oh);
                    let y_off = ky as isize - p as isize;
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = tap_range(kx, p, s, in_w, ow);
                        let x_off = kx as isize - p as isize;
                        let w = self.weight[((oc * self.in_ch + ic) * k + ky) * k + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize + y_off;
                            let in_row = in_ic + iy as usize * in_w;
                            let out_row = out_oc + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize + x_off) as usize;
                                out[out_row + ox] += w * input[in_row + ix];
                            }
                        }
                    }
                }
            }
        }
        (oh, ow)
    }

    /// Accumulates weight/bias gradients and, when `d_input` is given, the
    /// gradient w.r.t. the layer input.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        input: &[S],
        in_h: usize,
        in_w: usize,
        d_out: &[S],
        d_weight: &mut [S],
        d_bias: &mut [S],
        mut d_input: Option<&mut [S]>,
    ) {
        let (oh, ow) = self.out_dims(in_h, in_w);
        debug_assert_eq!(d_out.len(), self.out_ch * oh * ow);
        let (k, s, p) = (self.ksize, self.stride, self.pad());
        for oc in 0..self.out_ch {
            let out_oc = oc * oh * ow;
            let mut bias_sum = S::zero();
            for g in &d_out[out_oc..out_oc + oh * ow] {
                bias_sum += *g;
            }
            d_bias[oc] += bias_sum;
            for ic in 0..self.in_ch {
                let in_ic = ic * in_h * in_w;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = tap_range(ky, p, s, in_h, oh);
                    let y_off = ky as isize - p as isize;
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = tap_range(kx, p, s, in_w, ow);
                        let x_off = kx as isize - p as isize;
                        let widx = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                        let w = self.weight[widx];
                        let mut w_sum = S::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize + y_off;
                            let in_row = in_ic + iy as usize * in_w;
                            let out_row = out_oc + oy * ow;
                            if let Some(d_in) = d_input.as_deref_mut() {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * s) as isize + x_off) as usize;
                                    let g = d_out[out_row + ox];
                                    w_sum += g * input[in_row + ix];
                                    d_in[in_row + ix] += w * g;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * s) as isize + x_off) as usize;
                                    w_sum += d_out[out_row + ox] * input[in_row + ix];
                                }
                            }
                        }
                        d_weight[widx] += w_sum;
                    }
                }
            }
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Output range `[lo, hi)` along one axis for kernel tap `t` such that the
/// sampled input index `o * stride + t - pad` stays within `0..n_in`.
#[inline]
fn tap_range(t: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let shift = t as isize - pad as isize;
    let lo = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let last_in = n_in as isize - 1 - shift;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = (last_in as usize / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

pub fn leaky_relu<S: Scalar>(xs: &mut [S]) {
    let slope = S::from_f64(LEAKY_SLOPE);
    for x in xs {
        if *x < S::zero() {
            *x *= slope;
        }
    }
}

/// Scales upstream gradients by the LeakyReLU derivative; `activated` is the
/// post-activation output (its sign equals the pre-activation sign).
pub fn leaky_relu_backward<S: Scalar>(activated: &[S], d: &mut [S]) {
    let slope = S::from_f64(LEAKY_SLOPE);
    for (a, g) in activated.iter().zip(d) {
        if *a < S::zero() {
            *g *= slope;
        }
    }
}

/// All learnable tensors, in the fixed flattening order used by the
/// optimizer and the checkpoint format: trunk stages first, then the
/// objectness, classification, box, and affinity heads; weights before
/// biases within a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layers<S> {
    pub trunk: Vec<ConvLayer<S>>,
    pub obj: ConvLayer<S>,
    pub cls: ConvLayer<S>,
    pub boxes: ConvLayer<S>,
    pub aff: ConvLayer<S>,
}

impl<S: Scalar> Layers<S> {
    fn layers(&self) -> Vec<&ConvLayer<S>> {
        let mut all: Vec<&ConvLayer<S>> = self.trunk.iter().collect();
        all.extend([&self.obj, &self.cls, &self.boxes, &self.aff]);
        all
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer<S>> {
        let mut all: Vec<&mut ConvLayer<S>> = self.trunk.iter_mut().collect();
        all.extend([&mut self.obj, &mut self.cls, &mut self.boxes, &mut self.aff]);
        all
    }

    pub fn zeroed_like(&self) -> Layers<S> {
        let mut z = self.clone();
        for layer in z.layers_mut() {
            layer.weight.iter_mut().for_each(|w| *w = S::zero());
            layer.bias.iter_mut().for_each(|b| *b = S::zero());
        }
        z
    }

    pub fn param_len(&self) -> usize {
        self.layers().iter().map(|l| l.param_len()).sum()
    }

    pub fn copy_flat_into(&self, out: &mut Vec<S>) {
        out.clear();
        for layer in self.layers() {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn set_from_flat(&mut self, flat: &[S]) {
        let mut offset = 0;
        for layer in self.layers_mut() {
            let nw = layer.weight.len();
            layer.weight.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Stable names for the checkpoint format.
    pub fn named_arrays(&self) -> Vec<(String, &[S])> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), layer.weight.as_slice()));
            out.push((format!("trunk.{i}.bias"), layer.bias.as_slice()));
        }
        for (name, layer) in [
            ("head_obj", &self.obj),
            ("head_cls", &self.cls),
            ("head_box", &self.boxes),
            ("head_aff", &self.aff),
        ] {
            out.push((format!("{name}.weight"), layer.weight.as_slice()));
            out.push((format!("{name}.bias"), layer.bias.as_slice()));
        }
        out
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Vec<S>)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            out.push((format!("trunk.{i}.weight"), &mut layer.weight));
            out.push((format!("trunk.{i}.bias"), &mut layer.bias));
        }
        for (name, layer) in [
            ("head_obj", &mut self.obj),
            ("head_cls", &mut self.cls),
            ("head_box", &mut self.boxes),
            ("head_aff", &mut self.aff),
        ] {
            out.push((format!("{name}.weight"), &mut layer.weight));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        out
    }
}

/// Post-activation feature maps kept around for the backward pass.
pub struct ForwardCache<S> {
    pub stages: Vec<Vec<S>>,
    pub dims: Vec<(usize, usize)>,
}
