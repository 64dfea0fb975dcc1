//! Boxes, IoU, normalized in-box offsets and pyramid bookkeeping.
//!
//! Boxes are corner-form `(x1, y1, x2, y2)` in continuous image pixels and
//! areas are continuous (`w * h`).

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle with strictly positive width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box without validation. Callers that need the invariant
    /// must call [`BBox::validate`].
    pub fn from_corners_unchecked(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return domain(format!("non-finite box coordinates {self:?}"));
        }
        if !(self.x2 > self.x1 && self.y2 > self.y1) {
            return domain(format!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point<T> {
        let half = T::of(0.5);
        Point::new((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    /// Closed containment: edges count as inside.
    pub fn contains(&self, p: Point<T>) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// Open containment: edges are excluded.
    pub fn contains_strictly(&self, p: Point<T>) -> bool {
        p.x > self.x1 && p.x < self.x2 && p.y > self.y1 && p.y < self.y2
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Offset of a point relative to a box, scaled so the box maps onto
/// `[-1, 1]^2` with the center at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizedOffset<T> {
    pub dx: T,
    pub dy: T,
}

impl<T: Real> NormalizedOffset<T> {
    pub fn new(dx: T, dy: T) -> Self {
        Self { dx, dy }
    }

    pub fn as_array(&self) -> [T; 2] {
        [self.dx, self.dy]
    }

    /// True when the offset lies in the closed square `[-1, 1]^2`.
    pub fn is_inside(&self) -> bool {
        self.dx.abs() <= T::one() && self.dy.abs() <= T::one()
    }
}

/// Left/top/right/bottom distances from a point to box edges.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Ltrb<T> {
    pub l: T,
    pub t: T,
    pub r: T,
    pub b: T,
}

impl<T: Real> Ltrb<T> {
    pub fn new(l: T, t: T, r: T, b: T) -> Self {
        Self { l, t, r, b }
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn map(self, f: impl Fn(T) -> T) -> Self {
        Self::new(f(self.l), f(self.t), f(self.r), f(self.b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub name: String,
    pub stride: u32,
}

/// Ordered pyramid levels with strictly increasing power-of-two strides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    levels: Vec<PyramidLevel>,
}

impl PyramidSpec {
    pub fn new(levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.is_empty() {
            return domain("pyramid needs at least one level");
        }
        for lvl in &levels {
            if lvl.stride == 0 || !lvl.stride.is_power_of_two() {
                return domain(format!("stride {} of level {} is not a power of two", lvl.stride, lvl.name));
            }
        }
        if levels.windows(2).any(|w| w[1].stride <= w[0].stride) {
            return domain("pyramid strides must be strictly increasing");
        }
        let mut names: Vec<&str> = levels.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != levels.len() {
            return domain("pyramid level names must be unique");
        }
        Ok(Self { levels })
    }

    /// Builds a spec from `(name, stride)` pairs.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, u32)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(name, stride)| PyramidLevel { name: name.into(), stride })
                .collect(),
        )
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn stride<T: Real>(&self, level: usize) -> T {
        T::of(self.levels[level].stride as f64)
    }
}

/// Intersection over union of two valid boxes.
pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).min(T::one()).max(T::zero()))
}

pub fn normalize_offset<T: Real>(point: Point<T>, gt: &BBox<T>) -> Result<NormalizedOffset<T>> {
    gt.validate()?;
    let c = gt.center();
    let half = T::of(0.5);
    Ok(NormalizedOffset::new(
        (point.x - c.x) / (gt.width() * half),
        (point.y - c.y) / (gt.height() * half),
    ))
}

/// Inverse of [`normalize_offset`].
pub fn denormalize_offset<T: Real>(offset: NormalizedOffset<T>, gt: &BBox<T>) -> Point<T> {
    let c = gt.center();
    let half = T::of(0.5);
    Point::new(
        c.x + offset.dx * gt.width() * half,
        c.y + offset.dy * gt.height() * half,
    )
}

/// Stride-normalized distances from an interior point to the edges of `gt`.
pub fn regression_target<T: Real>(point: Point<T>, gt: &BBox<T>, stride: T) -> Result<Ltrb<T>> {
    gt.validate()?;
    if !(stride > T::zero()) {
        return domain("stride must be positive");
    }
    if !gt.contains_strictly(point) {
        return domain(format!("point {point:?} is not strictly inside {gt:?}"));
    }
    Ok(Ltrb::new(
        (point.x - gt.x1) / stride,
        (point.y - gt.y1) / stride,
        (gt.x2 - point.x) / stride,
        (gt.y2 - point.y) / stride,
    ))
}

/// Inverse of [`regression_target`].
pub fn decode_box<T: Real>(point: Point<T>, dist: Ltrb<T>, stride: T) -> Result<BBox<T>> {
    if dist.as_array().iter().any(|d| !(*d > T::zero())) {
        return domain(format!("distances must be positive, got {dist:?}"));
    }
    BBox::new(
        point.x - dist.l * stride,
        point.y - dist.t * stride,
        point.x + dist.r * stride,
        point.y + dist.b * stride,
    )
}
