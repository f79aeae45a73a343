//! Boxes, tubes and the overlap measures used by matching, losses and evaluation.
//!
//! Boxes are stored in center form `(cx, cy, w, h)`, normalised to the frame.
//! Corner form is a derived view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x0, y0, x1, y1)` with `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_corners(c: Corners) -> Self {
        Self {
            cx: 0.5 * (c.x0 + c.x1),
            cy: 0.5 * (c.y0 + c.y1),
            w: c.x1 - c.x0,
            h: c.y1 - c.y0,
        }
    }

    pub fn corners(self) -> Corners {
        Corners {
            x0: self.cx - 0.5 * self.w,
            y0: self.cy - 0.5 * self.h,
            x1: self.cx + 0.5 * self.w,
            y1: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(self) -> bool {
        self.w >= 0.0 && self.h >= 0.0 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn translate(self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    /// Intersect with the unit frame. Returns `None` when nothing is left.
    pub fn clip_unit(self) -> Option<Self> {
        let c = self.corners();
        let clipped = Corners {
            x0: c.x0.clamp(0.0, 1.0),
            y0: c.y0.clamp(0.0, 1.0),
            x1: c.x1.clamp(0.0, 1.0),
            y1: c.y1.clamp(0.0, 1.0),
        };
        let b = BBox::from_corners(clipped);
        (b.w > 0.0 && b.h > 0.0).then_some(b)
    }
}

impl Corners {
    pub fn area(self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

fn intersection(a: Corners, b: Corners) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    iw * ih
}

fn hull(a: Corners, b: Corners) -> f64 {
    (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0))
}

/// Intersection over union. Zero-area unions score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection(ca, cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalised IoU: `iou - (hull - union) / hull`, 0 when the hull is empty.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection(ca, cb);
    let union = ca.area() + cb.area() - inter;
    let enclosing = hull(ca, cb);
    if enclosing <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    // the hull always covers the union; rounding can put it a few ulps below
    iou - (enclosing - union).max(0.0) / enclosing
}

/// Gradient of `1 - giou(pred, target)` with respect to the center-form
/// coordinates of `pred`. Returns `(loss, d_loss/d_pred)`.
pub fn giou_loss_grad(pred: &BBox, target: &BBox) -> (f64, [f64; 4]) {
    let p = pred.corners();
    let g = target.corners();

    let iw_raw = p.x1.min(g.x1) - p.x0.max(g.x0);
    let ih_raw = p.y1.min(g.y1) - p.y0.max(g.y0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let pw = p.x1 - p.x0;
    let ph = p.y1 - p.y0;
    let area_p = pw.max(0.0) * ph.max(0.0);
    let union = area_p + g.area() - inter;
    let hw = p.x1.max(g.x1) - p.x0.min(g.x0);
    let hh = p.y1.max(g.y1) - p.y0.min(g.y0);
    let enclosing = hw * hh;
    if enclosing <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let (iou, d_inter, d_area_p) = if union <= 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        (
            inter / union,
            1.0 / union + inter / (union * union) - 1.0 / enclosing,
            -inter / (union * union) + 1.0 / enclosing,
        )
    };
    let value = iou - (enclosing - union) / enclosing;
    let d_enclosing = -union / (enclosing * enclosing);

    // corner partials of giou: [x0, y0, x1, y1]
    let mut d = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if p.x1 < g.x1 {
            d[2] += d_iw;
        }
        if p.x0 > g.x0 {
            d[0] -= d_iw;
        }
        if p.y1 < g.y1 {
            d[3] += d_ih;
        }
        if p.y0 > g.y0 {
            d[1] -= d_ih;
        }
    }
    if pw > 0.0 && ph > 0.0 {
        d[2] += d_area_p * ph;
        d[0] -= d_area_p * ph;
        d[3] += d_area_p * pw;
        d[1] -= d_area_p * pw;
    }
    let d_hw = d_enclosing * hh;
    let d_hh = d_enclosing * hw;
    if p.x1 > g.x1 {
        d[2] += d_hw;
    }
    if p.x0 < g.x0 {
        d[0] -= d_hw;
    }
    if p.y1 > g.y1 {
        d[3] += d_hh;
    }
    if p.y0 < g.y0 {
        d[1] -= d_hh;
    }

    // corners -> center form, negated for the loss
    let grad = [
        -(d[0] + d[2]),
        -(d[1] + d[3]),
        -0.5 * (d[2] - d[0]),
        -0.5 * (d[3] - d[1]),
    ];
    (1.0 - value, grad)
}

/// Sum of absolute coordinate differences in center form.
pub fn box_l1(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Gradient of [`box_l1`] with respect to `a`.
pub fn box_l1_grad(a: &BBox, b: &BBox) -> [f64; 4] {
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    [
        sign(a.cx - b.cx),
        sign(a.cy - b.cy),
        sign(a.w - b.w),
        sign(a.h - b.h),
    ]
}

/// A box sequence over a video timeline. `boxes[k]` belongs to frame `start + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub start: usize,
    pub boxes: Vec<Option<BBox>>,
    pub actor_id: u64,
    pub class_id: usize,
}

impl Tube {
    pub fn new(start: usize, boxes: Vec<Option<BBox>>, actor_id: u64, class_id: usize) -> Result<Self> {
        let tube = Self {
            start,
            boxes,
            actor_id,
            class_id,
        };
        if tube.present_frames().next().is_none() {
            return Err(Error::InvalidInput("tube has no present box".into()));
        }
        Ok(tube)
    }

    /// Exclusive end of the frame range.
    pub fn end(&self) -> usize {
        self.start + self.boxes.len()
    }

    pub fn box_at(&self, frame: usize) -> Option<BBox> {
        if frame < self.start {
            return None;
        }
        self.boxes.get(frame - self.start).copied().flatten()
    }

    pub fn present_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(move |(k, _)| self.start + k)
    }
}

/// Spatio-temporal IoU: summed per-frame intersections over summed per-frame
/// unions across the frames where either tube is present. A frame where only
/// one tube is present adds that box's area to the union.
pub fn tube_iou_3d(a: &Tube, b: &Tube) -> Result<f64> {
    let lo = a.start.min(b.start);
    let hi = a.end().max(b.end());
    let mut inter = 0.0;
    let mut union = 0.0;
    let mut any = false;
    for t in lo..hi {
        match (a.box_at(t), b.box_at(t)) {
            (Some(x), Some(y)) => {
                any = true;
                let (cx, cy) = (x.corners(), y.corners());
                let i = intersection(cx, cy);
                inter += i;
                union += cx.area() + cy.area() - i;
            }
            (Some(x), None) | (None, Some(x)) => {
                any = true;
                union += x.area();
            }
            (None, None) => {}
        }
    }
    if !any {
        return Err(Error::InvalidInput("empty tubes".into()));
    }
    Ok(if union <= 0.0 { 0.0 } else { inter / union })
}
