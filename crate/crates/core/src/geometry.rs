//! Axis-aligned box arithmetic: IoU, class-agnostic NMS and coordinate
//! conversions. Boxes are pixel `xyxy` with the origin at the top-left corner.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor: coordinates must be finite with `x1 <= x2` and `y1 <= y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!("inverted corners in {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    /// Clamps the box to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        let (x1, x2) = (cx(self.x1.min(self.x2)), cx(self.x1.max(self.x2)));
        let (y1, y2) = (cy(self.y1.min(self.y2)), cy(self.y1.max(self.y2)));
        BBox { x1, y1, x2, y2 }
    }

    /// Normalized `(cx, cy, w, h)` relative to an image of the given size.
    pub fn to_cxcywh_normalized(&self, width: f64, height: f64) -> [f64; 4] {
        [(self.x1 + self.x2) / 2.0 / width, (self.y1 + self.y2) / 2.0 / height, self.width() / width, self.height() / height]
    }

    pub fn from_cxcywh_normalized(v: [f64; 4], width: f64, height: f64) -> BBox {
        let [cx, cy, w, h] = v;
        BBox { x1: (cx - w / 2.0) * width, y1: (cy - h / 2.0) * height, x2: (cx + w / 2.0) * width, y2: (cy + h / 2.0) * height }
    }

    /// COCO `[x, y, w, h]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn from_xywh(v: [f64; 4]) -> BBox {
        BBox { x1: v[0], y1: v[1], x2: v[0] + v[2], y2: v[1] + v[3] }
    }

    pub fn scale(&self, factor: f64) -> BBox {
        BBox { x1: self.x1 * factor, y1: self.y1 * factor, x2: self.x2 * factor, y2: self.y2 * factor }
    }

    /// Lexicographic total order on `(x1, y1, x2, y2)`.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidBox(format!("score {score} outside [0, 1]")));
        }
        Ok(ScoredBox { bbox, score })
    }
}

/// Intersection over union. Zero when the boxes are disjoint or the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy class-agnostic non-maximum suppression.
///
/// Boxes are visited by descending score, lower index first on ties. A box is
/// suppressed when its IoU with an already kept box is strictly greater than
/// `iou_thresh`. Zero-area boxes are dropped up front. The kept indices are
/// returned in ascending (original list) order.
pub fn nms_class_agnostic(items: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if item.bbox.is_degenerate() {
            log::warn!("dropping zero-area box {i} before NMS: {:?}", item.bbox);
            continue;
        }
        order.push(i);
    }
    order.sort_by(|&a, &b| items[b].score.total_cmp(&items[a].score).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| iou(&items[k].bbox, &items[i].bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}
