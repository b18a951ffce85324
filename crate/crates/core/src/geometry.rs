//! Boxes and detections in normalized image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};

/// Axis-aligned box given by center and size as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if !b.is_valid() {
            return Err(LdpError::Shape(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        let in01 = |v: f64| (0.0..=1.0).contains(&v);
        in01(self.cx) && in01(self.cy) && self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One detector candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub obj: f64,
    pub cls: Vec<f64>,
}

impl Detection {
    /// `obj × P(class)`.
    pub fn score(&self, class: usize) -> f64 {
        self.obj * self.cls[class]
    }
}

/// A box with a confidence, as used by the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy suppression: boxes sorted by descending score, any box overlapping a
/// kept box with IoU above `iou_thresh` is dropped.
pub fn non_max_suppression(mut boxes: Vec<ScoredBox>, iou_thresh: f64) -> Vec<ScoredBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| k.bbox.iou(&b.bbox) <= iou_thresh) {
            kept.push(b);
        }
    }
    kept
}
