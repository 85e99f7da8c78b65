//! Image-plane geometry: boxes, the N×N block grid, and affine co-transforms
//! applied to boxes when the image is augmented.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("grid must have at least one block per side")]
    EmptyGrid,
    #[error("canvas dimensions must be positive and finite, got {width}x{height}")]
    BadCanvas { width: f64, height: f64 },
    #[error("affine coefficients must be finite")]
    NonFiniteAffine,
}

/// Axis-aligned box in pixels: `(x, y)` is the top-left corner.
///
/// Serialized as the 4-array `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w >= 0.0
            && self.h >= 0.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Geometric center `(x + w/2, y + h/2)`.
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (r, b) = (self.right(), self.bottom());
        [(self.x, self.y), (r, self.y), (self.x, b), (r, b)]
    }

    /// True when `other` lies inside `self` (closed on all sides).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Smallest upright box containing every point.
    pub fn hull_of(points: &[(f64, f64)]) -> BBox {
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for &(px, py) in points {
            min_x = min_x.min(px);
            min_y = min_y.min(py);
            max_x = max_x.max(px);
            max_y = max_y.max(py);
        }
        BBox::new(min_x, min_y, max_x - min_x, max_y - min_y)
    }
}

/// Free-function form of [`BBox::center`].
pub fn center(b: &BBox) -> (f64, f64) {
    b.center()
}

/// The N×N even partition of a `width × height` canvas.
///
/// Blocks are numbered row-major from the top-left: block `row * n + col`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockGrid {
    n: u32,
    width: f64,
    height: f64,
}

impl BlockGrid {
    pub fn new(n: u32, width: f64, height: f64) -> Result<Self, GeometryError> {
        if n == 0 {
            return Err(GeometryError::EmptyGrid);
        }
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(GeometryError::BadCanvas { width, height });
        }
        Ok(BlockGrid { n, width, height })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn block_count(&self) -> usize {
        (self.n as usize) * (self.n as usize)
    }

    fn col_edge(&self, i: u32) -> f64 {
        if i == self.n {
            self.width
        } else {
            f64::from(i) * self.width / f64::from(self.n)
        }
    }

    fn row_edge(&self, i: u32) -> f64 {
        if i == self.n {
            self.height
        } else {
            f64::from(i) * self.height / f64::from(self.n)
        }
    }

    /// Column edges `i·width/n` and row edges `i·height/n` for `i = 0..=n`.
    pub fn block_boundaries(&self) -> (Vec<f64>, Vec<f64>) {
        let cols = (0..=self.n).map(|i| self.col_edge(i)).collect();
        let rows = (0..=self.n).map(|i| self.row_edge(i)).collect();
        (cols, rows)
    }

    /// Pixel rectangle covered by `block`.
    pub fn block_rect(&self, block: u32) -> Option<BBox> {
        if block as usize >= self.block_count() {
            return None;
        }
        let (row, col) = (block / self.n, block % self.n);
        let (x0, x1) = (self.col_edge(col), self.col_edge(col + 1));
        let (y0, y1) = (self.row_edge(row), self.row_edge(row + 1));
        Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Block containing the point, or `None` when it lies outside the closed
    /// canvas. Cells are half-open `[lo, hi)` except the last column and row,
    /// which also take the far edge.
    pub fn block_of_point(&self, px: f64, py: f64) -> Option<u32> {
        if !(0.0..=self.width).contains(&px) || !(0.0..=self.height).contains(&py) {
            return None;
        }
        let col = self.cell_index(px, self.width, |i| self.col_edge(i));
        let row = self.cell_index(py, self.height, |i| self.row_edge(i));
        Some(row * self.n + col)
    }

    // floor(v·n/extent), then nudged so the result agrees with the published
    // floating-point edges when `v` sits within rounding of one.
    fn cell_index(&self, v: f64, extent: f64, edge: impl Fn(u32) -> f64) -> u32 {
        let last = self.n - 1;
        let raw = (v * f64::from(self.n) / extent).floor();
        let mut idx = if raw <= 0.0 { 0 } else { (raw as u32).min(last) };
        while idx > 0 && v < edge(idx) {
            idx -= 1;
        }
        while idx < last && v >= edge(idx + 1) {
            idx += 1;
        }
        idx
    }
}

/// 2×3 affine map `(px, py) → (a·px + b·py + tx, c·px + d·py + ty)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for Affine2D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine2D {
    pub const IDENTITY: Affine2D = Affine2D {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(a: f64, b: f64, c: f64, d: f64, tx: f64, ty: f64) -> Result<Self, GeometryError> {
        let t = Affine2D { a, b, c, d, tx, ty };
        if [a, b, c, d, tx, ty].iter().all(|v| v.is_finite()) {
            Ok(t)
        } else {
            Err(GeometryError::NonFiniteAffine)
        }
    }

    pub fn translate(tx: f64, ty: f64) -> Self {
        Affine2D { tx, ty, ..Self::IDENTITY }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Affine2D { a: sx, d: sy, ..Self::IDENTITY }
    }

    /// Counter-clockwise rotation by `degrees` in y-down image coordinates
    /// (i.e. visually counter-clockwise on screen) about `(cx, cy)`.
    pub fn rotate_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        // Snap the quarter turns so that 90° rotations stay exact.
        let snap = |v: f64| if v.abs() < 1e-15 { 0.0 } else { v };
        let (s, c) = (snap(s), snap(c));
        // p' = R (p - center) + center, with R = [[c, s], [-s, c]].
        Affine2D {
            a: c,
            b: s,
            c: -s,
            d: c,
            tx: cx - c * cx - s * cy,
            ty: cy + s * cx - c * cy,
        }
    }

    pub fn shear(shx: f64, shy: f64) -> Self {
        Affine2D { b: shx, c: shy, ..Self::IDENTITY }
    }

    pub fn is_finite(&self) -> bool {
        [self.a, self.b, self.c, self.d, self.tx, self.ty]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Maps axis-aligned boxes to axis-aligned boxes (no rotation or shear).
    pub fn is_axis_preserving(&self) -> bool {
        self.b == 0.0 && self.c == 0.0
    }

    pub fn apply_point(&self, px: f64, py: f64) -> (f64, f64) {
        (
            self.a * px + self.b * py + self.tx,
            self.c * px + self.d * py + self.ty,
        )
    }
}

/// Transform that applies `t1` first, then `t2`.
pub fn compose(t2: &Affine2D, t1: &Affine2D) -> Affine2D {
    Affine2D {
        a: t2.a * t1.a + t2.b * t1.c,
        b: t2.a * t1.b + t2.b * t1.d,
        c: t2.c * t1.a + t2.d * t1.c,
        d: t2.c * t1.b + t2.d * t1.d,
        tx: t2.a * t1.tx + t2.b * t1.ty + t2.tx,
        ty: t2.c * t1.tx + t2.d * t1.ty + t2.ty,
    }
}

/// Axis-aligned hull of the transformed box corners.
///
/// Axis-preserving maps take a direct path so that the identity (and any
/// unit scale) reproduces the input box bit for bit.
pub fn apply_affine(t: &Affine2D, b: &BBox) -> BBox {
    if t.is_axis_preserving() {
        let (x, w) = axis_map(t.a, t.tx, b.x, b.w);
        let (y, h) = axis_map(t.d, t.ty, b.y, b.h);
        return BBox::new(x, y, w, h);
    }
    let pts = b.corners().map(|(px, py)| t.apply_point(px, py));
    BBox::hull_of(&pts)
}

fn axis_map(scale: f64, offset: f64, start: f64, len: f64) -> (f64, f64) {
    if scale >= 0.0 {
        (scale * start + offset, scale * len)
    } else {
        (scale * (start + len) + offset, -scale * len)
    }
}
