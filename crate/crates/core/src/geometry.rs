//! Axis-aligned box arithmetic, coordinate spaces, IoU metrics and
//! mask-to-box conversion.
//!
//! Every [`BBox`] carries the coordinate space it lives in. Binary
//! operations refuse to mix spaces; use [`convert_space`] first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound of per-mille coordinates.
pub const PER_MILLE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("coordinate spaces differ: {0:?} vs {1:?}")]
    SpaceMismatch(Space, Space),
    #[error("shot list is empty")]
    EmptyShotList,
    #[error("label {0} does not occur in the mask")]
    LabelAbsent(u32),
    #[error("label must be > 0")]
    BackgroundLabel,
    #[error("invalid image dimensions {0}x{1}")]
    InvalidDims(u32, u32),
    #[error("invalid box [{0}, {1}, {2}, {3}] in {4:?}")]
    InvalidBox(f64, f64, f64, f64, Space),
    #[error("mask has {len} labels, expected {expected}")]
    MaskSize { len: usize, expected: usize },
}

/// Coordinate space of a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    /// Pixel coordinates of an image with the given width and height.
    Pixel { width: u32, height: u32 },
    /// Coordinates scaled to `[0, 1000]` on both axes.
    PerMille,
}

impl Space {
    pub fn pixel(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims(width, height));
        }
        Ok(Space::Pixel { width, height })
    }

    /// Inclusive upper bounds `(x, y)` of the space.
    pub fn extent(&self) -> (f64, f64) {
        match *self {
            Space::Pixel { width, height } => (width as f64, height as f64),
            Space::PerMille => (PER_MILLE, PER_MILLE),
        }
    }
}

/// Axis-aligned box in corner form.
///
/// Invariants, enforced by the constructors: coordinates are finite,
/// `x_min <= x_max`, `y_min <= y_max`, and all corners lie inside the
/// extent of `space`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    space: Space,
}

impl BBox {
    pub fn new(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        space: Space,
    ) -> Result<Self, GeometryError> {
        if let Space::Pixel { width, height } = space {
            if width == 0 || height == 0 {
                return Err(GeometryError::InvalidDims(width, height));
            }
        }
        let (w, h) = space.extent();
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            && 0.0 <= x_min
            && x_min <= x_max
            && x_max <= w
            && 0.0 <= y_min
            && y_min <= y_max
            && y_max <= h;
        if !ok {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max, space));
        }
        Ok(Self { x_min, y_min, x_max, y_max, space })
    }

    pub fn per_mille(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max, y_max, Space::PerMille)
    }

    /// Builds a box from arbitrary corners: swapped axes are reordered and
    /// every coordinate is clamped into the space. Returns the box and
    /// whether clamping changed anything.
    pub fn clamped(
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        space: Space,
    ) -> Result<(Self, bool), GeometryError> {
        if [x0, y0, x1, y1].iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidBox(x0, y0, x1, y1, space));
        }
        let (w, h) = space.extent();
        let (xa, xb) = if x0 <= x1 { (x0, x1) } else { (x1, x0) };
        let (ya, yb) = if y0 <= y1 { (y0, y1) } else { (y1, y0) };
        let c = [xa.clamp(0.0, w), ya.clamp(0.0, h), xb.clamp(0.0, w), yb.clamp(0.0, h)];
        let changed = c != [xa, ya, xb, yb];
        Ok((Self::new(c[0], c[1], c[2], c[3], space)?, changed))
    }

    /// Box from top-left corner plus width and height.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64, space: Space) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h, space)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn space(&self) -> Space {
        self.space
    }
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn is_degenerate(&self) -> bool {
        self.x_max == self.x_min || self.y_max == self.y_min
    }

    /// True if `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    /// Translates by `(dx, dy)` and clamps back into the space.
    pub fn translated_clamped(&self, dx: f64, dy: f64) -> BBox {
        let (b, _) = BBox::clamped(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
            self.space,
        )
        .expect("finite translation of a valid box");
        b
    }
}

pub fn area(b: &BBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

fn check_space(a: &BBox, b: &BBox) -> Result<(), GeometryError> {
    if a.space != b.space {
        return Err(GeometryError::SpaceMismatch(a.space, b.space));
    }
    Ok(())
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

pub fn intersect_area(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    check_space(a, b)?;
    Ok(overlap(a, b))
}

/// Standard intersection over union, in `[0, 1]`.
///
/// Returns 0 when the union is empty (both boxes degenerate).
pub fn iou(pred: &BBox, gt: &BBox) -> Result<f64, GeometryError> {
    check_space(pred, gt)?;
    let inter = overlap(pred, gt);
    let union = area(pred) + area(gt) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Copy-aware IoU: the part of the prediction that overlaps a shot box is
/// not credited, and the query area already covered by that shot is removed
/// from the union.
///
/// ```text
/// I' = max(0, A(P∩Q) - A(P∩S))
/// result = I' / (A(Q) - A(Q∩S) + A(P) - I')
/// ```
///
/// With several shots, `S` is the shot with the largest overlap with the
/// prediction (first one on ties). A non-positive denominator yields 0.
pub fn context_iou(pred: &BBox, gt_query: &BBox, gt_shots: &[BBox]) -> Result<f64, GeometryError> {
    check_space(pred, gt_query)?;
    for s in gt_shots {
        check_space(pred, s)?;
    }
    let shot = select_copied_shot(pred, gt_shots)?;

    let pred_query = overlap(pred, gt_query);
    let pred_shot = overlap(pred, shot);
    let query_shot = overlap(gt_query, shot);

    let adjusted = (pred_query - pred_shot).max(0.0);
    let denom = area(gt_query) - query_shot + area(pred) - adjusted;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((adjusted / denom).clamp(0.0, 1.0))
}

/// The shot box most plausibly copied by `pred`: argmax of overlap.
pub fn select_copied_shot<'a>(pred: &BBox, gt_shots: &'a [BBox]) -> Result<&'a BBox, GeometryError> {
    let mut best: Option<(&BBox, f64)> = None;
    for s in gt_shots {
        let a = overlap(pred, s);
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((s, a)),
        }
    }
    best.map(|(s, _)| s).ok_or(GeometryError::EmptyShotList)
}

/// Converts `b` into `target`.
///
/// Pixel to per-mille multiplies by `1000 / dim`, per-mille to pixel
/// multiplies by `dim / 1000`. Pixel to pixel goes through per-mille. The
/// result is clamped to absorb floating-point overshoot at the borders.
pub fn convert_space(b: &BBox, target: Space) -> Result<BBox, GeometryError> {
    if let Space::Pixel { width, height } = target {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims(width, height));
        }
    }
    if b.space == target {
        return Ok(*b);
    }
    let [x0, y0, x1, y1] = b.corners();
    let (px0, py0, px1, py1) = match b.space {
        Space::PerMille => (x0, y0, x1, y1),
        Space::Pixel { width, height } => {
            let (w, h) = (width as f64, height as f64);
            (x0 * PER_MILLE / w, y0 * PER_MILLE / h, x1 * PER_MILLE / w, y1 * PER_MILLE / h)
        }
    };
    let corners = match target {
        Space::PerMille => (px0, py0, px1, py1),
        Space::Pixel { width, height } => {
            let (w, h) = (width as f64, height as f64);
            (px0 * w / PER_MILLE, py0 * h / PER_MILLE, px1 * w / PER_MILLE, py1 * h / PER_MILLE)
        }
    };
    let (out, _) = BBox::clamped(corners.0, corners.1, corners.2, corners.3, target)?;
    Ok(out)
}

/// Row-major grid of integer object labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: u32,
    height: u32,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(width: u32, height: u32, labels: Vec<u32>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims(width, height));
        }
        let expected = width as usize * height as usize;
        if labels.len() != expected {
            return Err(GeometryError::MaskSize { len: labels.len(), expected });
        }
        Ok(Self { width, height, labels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, col: u32, row: u32) -> u32 {
        self.labels[row as usize * self.width as usize + col as usize]
    }

    /// Distinct non-background labels in ascending order.
    pub fn object_labels(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Tight pixel box around every pixel carrying `label`, half-open: a single
/// pixel at `(col, row)` yields `(col, row, col + 1, row + 1)`.
pub fn mask_to_bbox(mask: &LabelMask, label: u32) -> Result<BBox, GeometryError> {
    if label == 0 {
        return Err(GeometryError::BackgroundLabel);
    }
    let w = mask.width as usize;
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.labels.iter().enumerate().filter(|(_, &l)| l == label) {
        let (col, row) = (i % w, i / w);
        bounds = Some(match bounds {
            None => (col, row, col, row),
            Some((c0, r0, c1, r1)) => (c0.min(col), r0.min(row), c1.max(col), r1.max(row)),
        });
    }
    let (c0, r0, c1, r1) = bounds.ok_or(GeometryError::LabelAbsent(label))?;
    BBox::new(
        c0 as f64,
        r0 as f64,
        (c1 + 1) as f64,
        (r1 + 1) as f64,
        Space::Pixel { width: mask.width, height: mask.height },
    )
}
