//! Rotated-rectangle math: corners, convex intersection area, IoU, and
//! rotated non-maximum suppression.
//!
//! Conventions: `theta` is the heading in radians, stored normalized to
//! [0, 2π); `length` is the extent along the heading, `width` across it.
//! A heading flip (θ ↔ θ+π with length/width preserved) describes the same
//! rectangle outline, and IoU is outline-based, so it is symmetric under
//! that flip by construction.

use crate::error::{BevError, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Tolerance (meters) below which consecutive polygon vertices are merged.
const VERTEX_MERGE_EPS: f64 = 1e-9;
/// Half-plane slack: points this far outside an edge still count as inside,
/// so a polygon clipped against itself survives bit-exactly.
const HALFPLANE_EPS: f64 = 1e-12;
/// Intersection areas at or below this are treated as edge contact: zero.
const DEGENERATE_AREA: f64 = 1e-12;

/// Oriented 2-D box: the unit of ground truth and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")] // `Real` already carries the serde bounds
pub struct RotatedBox<T: Real> {
    /// Center x, meters.
    pub cx: T,
    /// Center y, meters.
    pub cy: T,
    /// Extent along the heading, meters. Always > 0.
    pub length: T,
    /// Extent across the heading, meters. Always > 0.
    pub width: T,
    /// Heading, radians in [0, 2π).
    pub theta: T,
    /// Detection confidence in [0, 1]; `None` on ground truth.
    pub score: Option<T>,
    /// Object class (single-class datasets use 0).
    pub class_id: u32,
}

impl<T: Real> RotatedBox<T> {
    /// Build a scoreless box, validating sizes and normalizing the heading.
    pub fn new(cx: T, cy: T, length: T, width: T, theta: T) -> Result<Self> {
        for (name, v) in [("cx", cx), ("cy", cy), ("theta", theta)] {
            if !v.is_finite() {
                return Err(BevError::InvalidBox {
                    reason: format!("{name} is not finite"),
                });
            }
        }
        for (name, v) in [("length", length), ("width", width)] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(BevError::InvalidBox {
                    reason: format!("{name} must be finite and > 0, got {v}"),
                });
            }
        }
        Ok(Self {
            cx,
            cy,
            length,
            width,
            theta: normalize_angle(theta),
            score: None,
            class_id: 0,
        })
    }

    /// Attach a detection score in [0, 1].
    pub fn with_score(mut self, score: T) -> Result<Self> {
        if !(score.is_finite() && score >= T::zero() && score <= T::one()) {
            return Err(BevError::InvalidBox {
                reason: format!("score must lie in [0,1], got {score}"),
            });
        }
        self.score = Some(score);
        Ok(self)
    }

    /// Set the class id.
    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    /// Outline area, length × width.
    pub fn area(&self) -> T {
        self.length * self.width
    }

    /// Convert the scalar type (used to hand f32 predictions to f64 geometry).
    pub fn cast<U: Real>(&self) -> RotatedBox<U> {
        RotatedBox {
            cx: U::of_f64(self.cx.as_f64()),
            cy: U::of_f64(self.cy.as_f64()),
            length: U::of_f64(self.length.as_f64()),
            width: U::of_f64(self.width.as_f64()),
            theta: U::of_f64(self.theta.as_f64()),
            score: self.score.map(|s| U::of_f64(s.as_f64())),
            class_id: self.class_id,
        }
    }

    /// Corner coordinates, counter-clockwise.
    fn corner_array(&self) -> [(T, T); 4] {
        let (s, c) = self.theta.sin_cos();
        let hl = self.length * T::of_f64(0.5);
        let hw = self.width * T::of_f64(0.5);
        let rot = |x: T, y: T| (self.cx + c * x - s * y, self.cy + s * x + c * y);
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    /// Key used to order boxes canonically so binary operations evaluate
    /// their arguments in a fixed order regardless of call order.
    fn canonical_key(&self) -> [f64; 5] {
        [
            self.cx.as_f64(),
            self.cy.as_f64(),
            self.length.as_f64(),
            self.width.as_f64(),
            self.theta.as_f64(),
        ]
    }
}

/// Wrap an angle into [0, 2π).
pub fn normalize_angle<T: Real>(theta: T) -> T {
    let tau = T::of_f64(TAU);
    let mut t = theta % tau;
    if t < T::zero() {
        t += tau;
    }
    if t >= tau {
        t = T::zero();
    }
    t
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon<T: Real> {
    vertices: Vec<(T, T)>,
}

impl<T: Real> ConvexPolygon<T> {
    /// Validate and build: merges consecutive duplicate vertices (1e-9 m),
    /// requires ≥3 distinct vertices, convexity, and CCW orientation.
    pub fn new(vertices: Vec<(T, T)>) -> Result<Self> {
        let merged = merge_close_vertices(&vertices);
        if merged.len() < 3 {
            return Err(BevError::InvalidPolygon {
                reason: format!("{} distinct vertices, need at least 3", merged.len()),
            });
        }
        let eps = T::of_f64(-VERTEX_MERGE_EPS);
        let n = merged.len();
        for i in 0..n {
            let a = merged[i];
            let b = merged[(i + 1) % n];
            let c = merged[(i + 2) % n];
            if cross(sub(b, a), sub(c, b)) < eps {
                return Err(BevError::InvalidPolygon {
                    reason: "vertices are not convex counter-clockwise".into(),
                });
            }
        }
        if signed_area(&merged) <= T::zero() {
            return Err(BevError::InvalidPolygon {
                reason: "orientation must be counter-clockwise".into(),
            });
        }
        Ok(Self { vertices: merged })
    }

    pub(crate) fn from_unchecked(vertices: Vec<(T, T)>) -> Self {
        Self { vertices }
    }

    /// Vertices in CCW order.
    pub fn vertices(&self) -> &[(T, T)] {
        &self.vertices
    }

    /// Enclosed area.
    pub fn area(&self) -> T {
        signed_area(&self.vertices)
    }

    /// Arithmetic mean of the vertices.
    pub fn centroid(&self) -> (T, T) {
        let n = T::of_f64(self.vertices.len() as f64);
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((T::zero(), T::zero()), |(ax, ay), &(x, y)| (ax + x, ay + y));
        (sx / n, sy / n)
    }
}

fn merge_close_vertices<T: Real>(vertices: &[(T, T)]) -> Vec<(T, T)> {
    let eps = VERTEX_MERGE_EPS;
    let mut out: Vec<(T, T)> = Vec::with_capacity(vertices.len());
    for &v in vertices {
        if let Some(&last) = out.last() {
            if dist2(last, v).as_f64().sqrt() <= eps {
                continue;
            }
        }
        out.push(v);
    }
    while out.len() > 1 && dist2(out[0], *out.last().unwrap()).as_f64().sqrt() <= eps {
        out.pop();
    }
    out
}

#[inline]
fn sub<T: Real>((ax, ay): (T, T), (bx, by): (T, T)) -> (T, T) {
    (ax - bx, ay - by)
}

#[inline]
fn cross<T: Real>((ax, ay): (T, T), (bx, by): (T, T)) -> T {
    ax * by - ay * bx
}

#[inline]
fn dist2<T: Real>(a: (T, T), b: (T, T)) -> T {
    let d = sub(a, b);
    d.0 * d.0 + d.1 * d.1
}

/// Shoelace area; positive for CCW input.
fn signed_area<T: Real>(vertices: &[(T, T)]) -> T {
    let n = vertices.len();
    let mut acc = T::zero();
    for i in 0..n {
        let (x0, y0) = vertices[i];
        let (x1, y1) = vertices[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc * T::of_f64(0.5)
}

/// Four CCW corners of a rotated box; centroid equals the box center.
pub fn corners<T: Real>(b: &RotatedBox<T>) -> ConvexPolygon<T> {
    ConvexPolygon::from_unchecked(b.corner_array().to_vec())
}

/// Sutherland–Hodgman clip of `subject` against one half-plane (left of a→b).
/// Writes the clipped chain into `out`, returning its length.
fn clip_halfplane<T: Real>(
    subject: &[(T, T)],
    len: usize,
    a: (T, T),
    b: (T, T),
    out: &mut [(T, T)],
) -> usize {
    let eps = T::of_f64(-HALFPLANE_EPS);
    let d = sub(b, a);
    let mut m = 0;
    for i in 0..len {
        let s = subject[i];
        let e = subject[(i + 1) % len];
        let fs = cross(d, sub(s, a));
        let fe = cross(d, sub(e, a));
        let s_in = fs >= eps;
        let e_in = fe >= eps;
        if s_in != e_in {
            // The edge crosses the boundary; fs and fe differ in sign.
            let t = fs / (fs - fe);
            let p = (s.0 + t * (e.0 - s.0), s.1 + t * (e.1 - s.1));
            if e_in {
                out[m] = p;
                m += 1;
                out[m] = e;
                m += 1;
            } else {
                out[m] = p;
                m += 1;
            }
        } else if e_in {
            out[m] = e;
            m += 1;
        }
    }
    m
}

/// Intersection area of two convex CCW vertex chains.
fn intersection_area_raw<T: Real>(subject: &[(T, T)], clip: &[(T, T)]) -> T {
    // Each half-plane clip of a convex chain adds at most one vertex.
    let mut buf_a = [(T::zero(), T::zero()); 16];
    let mut buf_b = [(T::zero(), T::zero()); 16];
    let mut len = subject.len();
    debug_assert!(len + clip.len() <= buf_a.len());
    buf_a[..len].copy_from_slice(subject);
    let mut cur_is_a = true;
    let n = clip.len();
    for i in 0..n {
        let a = clip[i];
        let b = clip[(i + 1) % n];
        len = if cur_is_a {
            clip_halfplane(&buf_a, len, a, b, &mut buf_b)
        } else {
            clip_halfplane(&buf_b, len, a, b, &mut buf_a)
        };
        cur_is_a = !cur_is_a;
        if len < 3 {
            return T::zero();
        }
    }
    let verts = if cur_is_a { &buf_a[..len] } else { &buf_b[..len] };
    let area = signed_area(verts);
    if area.as_f64() <= DEGENERATE_AREA {
        T::zero()
    } else {
        area
    }
}

/// Order two vertex chains canonically (lexicographic on coordinates) so the
/// clip runs in a fixed argument order; makes the operation exactly symmetric.
fn order_chains<'a, T: Real>(a: &'a [(T, T)], b: &'a [(T, T)]) -> (&'a [(T, T)], &'a [(T, T)]) {
    let key = |v: &[(T, T)]| -> Vec<(f64, f64)> {
        v.iter().map(|&(x, y)| (x.as_f64(), y.as_f64())).collect()
    };
    let (ka, kb) = (key(a), key(b));
    let swap = ka
        .iter()
        .flat_map(|&(x, y)| [x, y])
        .partial_cmp(kb.iter().flat_map(|&(x, y)| [x, y]))
        .map(|o| o == std::cmp::Ordering::Greater)
        .unwrap_or(false);
    if swap {
        (b, a)
    } else {
        (a, b)
    }
}

/// Area of the intersection of two convex polygons. Symmetric in its
/// arguments; edge contact counts as zero.
pub fn intersection_area<T: Real>(a: &ConvexPolygon<T>, b: &ConvexPolygon<T>) -> T {
    let (first, second) = order_chains(a.vertices(), b.vertices());
    intersection_area_raw(first, second)
}

/// Intersection-over-union of two rotated boxes' outlines, in [0, 1].
/// Exactly symmetric; returns exactly 1 for fieldwise-identical boxes.
pub fn rotated_iou<T: Real>(a: &RotatedBox<T>, b: &RotatedBox<T>) -> T {
    let (ka, kb) = (a.canonical_key(), b.canonical_key());
    if ka == kb {
        return T::one();
    }
    let (first, second) = if ka <= kb { (a, b) } else { (b, a) };
    let ca = first.corner_array();
    let cb = second.corner_array();
    let inter = intersection_area_raw(&ca, &cb);
    if inter <= T::zero() {
        return T::zero();
    }
    let area_a = signed_area(&ca);
    let area_b = signed_area(&cb);
    let union = area_a + area_b - inter;
    if union <= T::zero() {
        T::one()
    } else {
        inter / union
    }
}

/// Greedy rotated NMS. Detections must carry scores. Output is sorted by
/// descending score (ties broken by input index, earlier first); a box is
/// suppressed when its IoU with an already-kept box exceeds `iou_thresh`.
pub fn nms<T: Real>(dets: &[RotatedBox<T>], iou_thresh: T) -> Result<Vec<RotatedBox<T>>> {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        let s = d.score.ok_or(BevError::MissingScore { index: i })?;
        scored.push((i, s.as_f64()));
    }
    scored.sort_by(|&(ia, sa), &(ib, sb)| sb.total_cmp(&sa).then(ia.cmp(&ib)));
    let mut kept: Vec<RotatedBox<T>> = Vec::new();
    for &(i, _) in &scored {
        let candidate = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| rotated_iou(k, candidate) > iou_thresh);
        if !suppressed {
            kept.push(*candidate);
        }
    }
    Ok(kept)
}
