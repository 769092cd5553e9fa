//! Box and rectangle primitives shared by ingestion, the model, and metrics.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Axis-aligned bounding box in center form: `(cx, cy, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh<S> {
    pub cx: S,
    pub cy: S,
    pub w: S,
    pub h: S,
}

impl<S: Scalar> BoxCxcywh<S> {
    pub fn new(cx: S, cy: S, w: S, h: S) -> Self {
        Self { cx, cy, w, h }
    }

    /// From corner form `(x, y, w, h)` (top-left origin), the layout used by
    /// COCO-style annotation files.
    pub fn from_xywh(x: S, y: S, w: S, h: S) -> Self {
        let half = S::from_f64(0.5);
        Self {
            cx: x + w * half,
            cy: y + h * half,
            w,
            h,
        }
    }

    pub fn left(&self) -> S {
        self.cx - self.w * S::from_f64(0.5)
    }

    pub fn right(&self) -> S {
        self.cx + self.w * S::from_f64(0.5)
    }

    pub fn top(&self) -> S {
        self.cy - self.h * S::from_f64(0.5)
    }

    pub fn bottom(&self) -> S {
        self.cy + self.h * S::from_f64(0.5)
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }

    /// Translate by `(dx, dy)`.
    pub fn shifted(&self, dx: S, dy: S) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Clip against the window `[0, w] x [0, h]`. Returns `None` when nothing
    /// remains.
    pub fn clipped(&self, window_w: S, window_h: S) -> Option<Self> {
        let l = self.left().max(S::zero());
        let t = self.top().max(S::zero());
        let r = self.right().min(window_w);
        let b = self.bottom().min(window_h);
        if r <= l || b <= t {
            return None;
        }
        let half = S::from_f64(0.5);
        Some(Self {
            cx: (l + r) * half,
            cy: (t + b) * half,
            w: r - l,
            h: b - t,
        })
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> BoxCxcywh<T> {
        BoxCxcywh {
            cx: f(self.cx),
            cy: f(self.cy),
            w: f(self.w),
            h: f(self.h),
        }
    }
}

/// Intersection-over-union of two center-form boxes.
pub fn iou<S: Scalar>(a: &BoxCxcywh<S>, b: &BoxCxcywh<S>) -> S {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(S::zero());
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(S::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= S::zero() {
        S::zero()
    } else {
        inter / union
    }
}

/// Integer pixel rectangle, used for ignore regions.
///
/// Stored in corner form; `x + w` and `y + h` may exceed the image extent, in
/// which case consumers clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Clamp to an `width x height` image; `None` if nothing remains.
    pub fn clamped(&self, width: u32, height: u32) -> Option<PixelRect> {
        let x0 = self.x.min(width);
        let y0 = self.y.min(height);
        let x1 = self.x.saturating_add(self.w).min(width);
        let y1 = self.y.saturating_add(self.h).min(height);
        if x1 <= x0 || y1 <= y0 {
            None
        } else {
            Some(PixelRect::new(x0, y0, x1 - x0, y1 - y0))
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x as f64
            && px < (self.x + self.w) as f64
            && py >= self.y as f64
            && py < (self.y + self.h) as f64
    }
}

/// Mapping from an original image frame into the square model input
/// (aspect-preserving resize plus centered padding).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub fn fit(src_w: u32, src_h: u32, dst: u32) -> Self {
        let scale = dst as f64 / src_w.max(src_h).max(1) as f64;
        let scaled_w = src_w as f64 * scale;
        let scaled_h = src_h as f64 * scale;
        Letterbox {
            scale,
            pad_x: (dst as f64 - scaled_w) / 2.0,
            pad_y: (dst as f64 - scaled_h) / 2.0,
        }
    }

    pub fn apply(&self, b: &BoxCxcywh<f64>) -> BoxCxcywh<f64> {
        BoxCxcywh {
            cx: b.cx * self.scale + self.pad_x,
            cy: b.cy * self.scale + self.pad_y,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn invert(&self, b: &BoxCxcywh<f64>) -> BoxCxcywh<f64> {
        BoxCxcywh {
            cx: (b.cx - self.pad_x) / self.scale,
            cy: (b.cy - self.pad_y) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_to_center_conversion() {
        let b = BoxCxcywh::<f64>::from_xywh(10.0, 20.0, 30.0, 40.0);
        assert_eq!(b, BoxCxcywh::new(25.0, 40.0, 30.0, 40.0));
    }

    #[test]
    fn iou_identical_is_one() {
        let b = BoxCxcywh::new(5.0f64, 5.0, 4.0, 4.0);
        assert!((iou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BoxCxcywh::new(0.0f64, 0.0, 2.0, 2.0);
        let b = BoxCxcywh::new(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_concentric_quarter() {
        let a = BoxCxcywh::new(0.0f64, 0.0, 10.0, 10.0);
        let b = BoxCxcywh::new(0.0, 0.0, 20.0, 20.0);
        assert!((iou(&a, &b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn clip_keeps_interior() {
        let b = BoxCxcywh::new(5.0f64, 5.0, 4.0, 4.0).clipped(100.0, 100.0);
        assert_eq!(b, Some(BoxCxcywh::new(5.0, 5.0, 4.0, 4.0)));
    }

    #[test]
    fn clip_truncates_at_border() {
        let b = BoxCxcywh::new(0.0f64, 5.0, 4.0, 4.0).clipped(100.0, 100.0);
        assert_eq!(b, Some(BoxCxcywh::new(1.0, 5.0, 2.0, 4.0)));
    }

    #[test]
    fn clip_outside_is_none() {
        assert_eq!(
            BoxCxcywh::new(-10.0f64, 5.0, 4.0, 4.0).clipped(100.0, 100.0),
            None
        );
    }

    #[test]
    fn letterbox_round_trip() {
        let lb = Letterbox::fit(640, 480, 320);
        let b = BoxCxcywh::new(100.0, 200.0, 50.0, 30.0);
        let back = lb.invert(&lb.apply(&b));
        assert!((back.cx - b.cx).abs() < 1e-9);
        assert!((back.cy - b.cy).abs() < 1e-9);
        assert!((back.w - b.w).abs() < 1e-9);
        assert!((back.h - b.h).abs() < 1e-9);
    }

    #[test]
    fn rect_clamp() {
        assert_eq!(
            PixelRect::new(90, 90, 20, 20).clamped(100, 100),
            Some(PixelRect::new(90, 90, 10, 10))
        );
        assert_eq!(PixelRect::new(100, 0, 5, 5).clamped(100, 100), None);
    }
}
