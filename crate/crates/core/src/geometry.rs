//! Box algebra: IoU, anchor-relative regression targets, clipping and NMS.
//!
//! Boxes are stored as center/size in pixels; corners are only used at I/O
//! boundaries and for overlap arithmetic.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Geometric-mean side length, `√(w·h)`.
    pub fn size(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
    }

    /// Same center, extents multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.cx, self.cy, self.w * factor, self.h * factor)
    }

    /// Intersection area with `other` (0 when disjoint).
    pub fn intersection(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }
}

/// Anchor-relative box offsets: center shift in anchor widths/heights and
/// log extent ratios.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        RegressionTarget {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU by counting covered unit cells. Only defined for boxes whose corners
/// lie on the integer grid; exact for those.
pub fn iou_pixel_oracle(a: &BBox, b: &BBox) -> Result<f64> {
    let int_corners = |bx: &BBox| -> Result<(i64, i64, i64, i64)> {
        let (x1, y1, x2, y2) = bx.corners();
        let c = [x1, y1, x2, y2];
        if c.iter().any(|v| (v - v.round()).abs() > 1e-9) {
            return Err(Error::Invalid(format!("box {:?} is not integer-aligned", c)));
        }
        Ok((x1.round() as i64, y1.round() as i64, x2.round() as i64, y2.round() as i64))
    };
    let (ax1, ay1, ax2, ay2) = int_corners(a)?;
    let (bx1, by1, bx2, by2) = int_corners(b)?;
    let inside = |x: i64, y: i64, (x1, y1, x2, y2): (i64, i64, i64, i64)| x >= x1 && x < x2 && y >= y1 && y < y2;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in ay1.min(by1)..ay2.max(by2) {
        for x in ax1.min(bx1)..ax2.max(bx2) {
            let ia = inside(x, y, (ax1, ay1, ax2, ay2));
            let ib = inside(x, y, (bx1, by1, bx2, by2));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Regression target that moves `anchor` onto `gt`.
pub fn encode(anchor: &BBox, gt: &BBox) -> Result<RegressionTarget> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 || gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Degenerate(format!("encode({anchor:?}, {gt:?})")));
    }
    Ok(RegressionTarget {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

/// Inverse of [`encode`].
pub fn decode(anchor: &BBox, t: &RegressionTarget) -> Result<BBox> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::Degenerate(format!("decode onto {anchor:?}")));
    }
    Ok(BBox {
        cx: anchor.cx + t.tx * anchor.w,
        cy: anchor.cy + t.ty * anchor.h,
        w: anchor.w * t.tw.exp(),
        h: anchor.h * t.th.exp(),
    })
}

/// Largest log-extent offset applied when decoding network outputs.
pub const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// [`decode`] with the log-extent offsets clamped to [`MAX_LOG_RATIO`], for raw network outputs.
pub fn decode_clamped(anchor: &BBox, t: &RegressionTarget) -> Result<BBox> {
    let t = RegressionTarget {
        tw: t.tw.min(MAX_LOG_RATIO),
        th: t.th.min(MAX_LOG_RATIO),
        ..*t
    };
    decode(anchor, &t)
}

/// Intersects `b` with the `width × height` image rectangle. Fails when
/// nothing (or only a zero-area sliver) remains.
pub fn clip(b: &BBox, width: f64, height: f64) -> Result<BBox> {
    let (x1, y1, x2, y2) = b.corners();
    let (x1, x2) = (x1.clamp(0.0, width), x2.clamp(0.0, width));
    let (y1, y2) = (y1.clamp(0.0, height), y2.clamp(0.0, height));
    if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
        return Err(Error::Degenerate(format!("{b:?} lies outside {width}x{height}")));
    }
    Ok(BBox::from_corners(x1, y1, x2, y2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy non-maximum suppression. Visits boxes by descending score (ties
/// by lower index) and keeps a box unless its IoU with an already kept box
/// exceeds `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    nms_limited(boxes, iou_threshold, usize::MAX)
}

/// [`nms`] that stops once `limit` boxes are kept.
pub fn nms_limited(boxes: &[ScoredBox], iou_threshold: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= limit {
            break;
        }
        if kept
            .iter()
            .all(|&k| iou(&boxes[k].bbox, &boxes[i].bbox) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}
