//! Axis-aligned boxes in continuous pixel coordinates: `x2`/`y2` are
//! exclusive edges, so a box covering pixels `0..w` has width `w`.

use serde::{Deserialize, Serialize};

/// Largest magnitude accepted for the log-scale deltas before `exp`.
pub const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Mirror across the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Center-size deltas `(tx, ty, tw, th)` taking `anchor` to `target`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (tx, ty) = target.center();
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; `tw`/`th` are clamped to
/// `±MAX_LOG_SCALE` before exponentiation.
pub fn decode_deltas(anchor: &BBox, deltas: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let tw = deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let th = deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    BBox::from_center(ax + aw * deltas[0], ay + ah * deltas[1], aw * tw.exp(), ah * th.exp())
}

/// Indices sorted by descending score, ties by ascending index.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. A box is dropped iff its IoU with an
/// already kept, higher-ranked box exceeds `iou_threshold`. Returns kept
/// indices in rank order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut kept: Vec<usize> = Vec::new();
    for i in order_by_score(scores) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
