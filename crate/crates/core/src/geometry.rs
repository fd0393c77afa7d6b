//! Axis-aligned boxes, IoU, union regions, the regression-offset codec and
//! IoU-based soft-label targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-size offsets are clamped to this magnitude when decoding so a refined
/// box can never collapse or overflow.
pub const LOG_SIZE_CLAMP: f64 = 8.0;

/// Axis-aligned rectangle `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clip to `bounds`, keeping at least `min_size` extent on each axis.
    pub fn clip_to(&self, bounds: &BBox, min_size: f64) -> BBox {
        let min_w = min_size.min(bounds.width());
        let min_h = min_size.min(bounds.height());
        let mut x1 = self.x1.clamp(bounds.x1, bounds.x2 - min_w);
        let mut y1 = self.y1.clamp(bounds.y1, bounds.y2 - min_h);
        let mut x2 = self.x2.clamp(bounds.x1 + min_w, bounds.x2);
        let mut y2 = self.y2.clamp(bounds.y1 + min_h, bounds.y2);
        if x2 - x1 < min_w {
            let cx = (0.5 * (x1 + x2)).clamp(bounds.x1 + 0.5 * min_w, bounds.x2 - 0.5 * min_w);
            x1 = cx - 0.5 * min_w;
            x2 = cx + 0.5 * min_w;
        }
        if y2 - y1 < min_h {
            let cy = (0.5 * (y1 + y2)).clamp(bounds.y1 + 0.5 * min_h, bounds.y2 - 0.5 * min_h);
            y1 = cy - 0.5 * min_h;
            y2 = cy + 0.5 * min_h;
        }
        BBox { x1, y1, x2, y2 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest box covering both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Center/log-size regression offset from a proposal to a target box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Offset {
    pub const ZERO: Offset = Offset { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn from_slice(v: &[f64]) -> Offset {
        Offset { dx: v[0], dy: v[1], dw: v[2], dh: v[3] }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

pub fn encode_offset(proposal: &BBox, target: &BBox) -> Offset {
    let (cx, cy) = proposal.center();
    let (tx, ty) = target.center();
    let (w, h) = (proposal.width(), proposal.height());
    Offset {
        dx: (tx - cx) / w,
        dy: (ty - cy) / h,
        dw: (target.width() / w).ln(),
        dh: (target.height() / h).ln(),
    }
}

pub fn decode_offset(delta: &Offset, proposal: &BBox) -> BBox {
    let (cx, cy) = proposal.center();
    let (w, h) = (proposal.width(), proposal.height());
    let dw = delta.dw.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
    let dh = delta.dh.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
    let (nx, ny) = (cx + delta.dx * w, cy + delta.dy * h);
    let (nw, nh) = (w * dw.exp(), h * dh.exp());
    BBox {
        x1: nx - 0.5 * nw,
        y1: ny - 0.5 * nh,
        x2: nx + 0.5 * nw,
        y2: ny + 0.5 * nh,
    }
}

/// Normalized non-negative target distribution over a candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelDist(pub Vec<f64>);

impl SoftLabelDist {
    /// Normalizes thresholded weights; an all-zero vector falls back to a
    /// one-hot on the first maximum of `scores`.
    fn from_thresholded(weights: Vec<f64>, scores: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            return SoftLabelDist(weights.into_iter().map(|w| w / total).collect());
        }
        let mut best = 0;
        for (m, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = m;
            }
        }
        let mut one_hot = vec![0.0; scores.len()];
        one_hot[best] = 1.0;
        SoftLabelDist(one_hot)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of strictly positive entries.
    pub fn support(&self) -> usize {
        self.0.iter().filter(|w| **w > 0.0).count()
    }
}

pub fn node_soft_labels(candidates: &[BBox], gt: &BBox, tau: f64) -> SoftLabelDist {
    assert!(!candidates.is_empty(), "soft labels need at least one candidate");
    let ious: Vec<f64> = candidates.iter().map(|c| iou(c, gt)).collect();
    let weights = ious.iter().map(|&v| if v >= tau { v } else { 0.0 }).collect();
    SoftLabelDist::from_thresholded(weights, &ious)
}

pub fn edge_soft_labels(pairs: &[(BBox, BBox)], gt: &(BBox, BBox), tau: f64) -> SoftLabelDist {
    assert!(!pairs.is_empty(), "soft labels need at least one candidate pair");
    let mut products = Vec::with_capacity(pairs.len());
    let mut weights = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let (ia, ib) = (iou(a, &gt.0), iou(b, &gt.1));
        products.push(ia * ib);
        weights.push(if ia >= tau && ib >= tau { ia * ib } else { 0.0 });
    }
    SoftLabelDist::from_thresholded(weights, &products)
}
