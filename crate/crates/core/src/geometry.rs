//! Exact rotated-rectangle geometry: polygon-clipping IoU, the
//! orientation-agnostic IoU used for anchor matching, rotated NMS, and
//! a Monte-Carlo IoU estimator used as a test oracle.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

/// Intersection areas below this are treated as empty, guarding the
/// clipper against sliver-polygon noise.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

/// Rectangle with center `(cx, cy)`, long side `w`, short side `h`, and
/// orientation `theta` in radians, measured from the image x-axis to
/// the `w` axis and canonicalized into `[-π/2, π/2)`. Boxes differing
/// by π in `theta` are the same box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `[-π/2, π/2)` modulo π.
pub fn wrap_half_pi(theta: f64) -> f64 {
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can land exactly on π/2 through rounding
    if t >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        t
    }
}

/// Circular angular deviation between two orientations that are
/// π-periodic, folded into `[0, π/2]`.
pub fn angular_deviation(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

impl RotatedBox {
    /// Canonicalizing constructor: wraps `theta`, and swaps `w`/`h`
    /// (rotating by π/2) when `w < h` so `w` is always the long side.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rotated box must have positive finite sides, got w={w}, h={h}"
            )));
        }
        let (w, h, theta) = if w >= h {
            (w, h, theta)
        } else {
            (h, w, theta + FRAC_PI_2)
        };
        Ok(RotatedBox {
            cx,
            cy,
            w,
            h,
            theta: wrap_half_pi(theta),
        })
    }

    /// Re-applies the canonical form to possibly-raw fields.
    pub fn canonical(&self) -> Self {
        RotatedBox::new(self.cx, self.cy, self.w, self.h, self.theta)
            .expect("canonical() requires positive sides")
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner polygon in counter-clockwise order.
    pub fn to_polygon(&self) -> ConvexPolygon {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let corners = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
        ConvexPolygon {
            vertices: corners
                .iter()
                .map(|&(x, y)| [self.cx + x * c - y * s, self.cy + x * s + y * c])
                .collect(),
        }
    }

    /// Whether `(px, py)` lies inside (boundary inclusive).
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Axis-aligned bounding rectangle `(min_x, min_y, max_x, max_y)`.
    pub fn aabb(&self) -> (f64, f64, f64, f64) {
        let poly = self.to_polygon();
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for v in &poly.vertices {
            for k in 0..2 {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        (min[0], min[1], max[0], max[1])
    }

    /// Same center and orientation, sides scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        RotatedBox {
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }
}

/// Convex polygon with counter-clockwise vertices (positive signed
/// area).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    /// Shoelace area (positive for CCW ordering).
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc / 2.0
    }

    /// Sutherland–Hodgman clip of `self` against convex CCW `clip`.
    pub fn clip(&self, clip: &ConvexPolygon) -> ConvexPolygon {
        let mut poly = self.vertices.clone();
        let n = clip.vertices.len();
        for i in 0..n {
            if poly.len() < 3 {
                break;
            }
            let a = clip.vertices[i];
            let b = clip.vertices[(i + 1) % n];
            poly = clip_halfplane(&poly, a, b);
        }
        ConvexPolygon { vertices: poly }
    }
}

/// Signed distance proxy: positive when `p` lies left of directed edge
/// `a → b` (inside, for a CCW clip polygon).
#[inline]
fn edge_side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn clip_halfplane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let s = poly[i];
        let e = poly[(i + 1) % n];
        let sd = edge_side(a, b, s);
        let ed = edge_side(a, b, e);
        let s_in = sd >= 0.0;
        let e_in = ed >= 0.0;
        match (s_in, e_in) {
            (true, true) => out.push(e),
            (true, false) | (false, true) => {
                let denom = sd - ed;
                if denom.abs() > 1e-30 {
                    let t = sd / denom;
                    out.push([s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]);
                }
                if e_in {
                    out.push(e);
                }
            }
            (false, false) => {}
        }
    }
    out
}

/// Intersection-over-union of two rotated boxes via polygon clipping.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let inter = a.to_polygon().clip(&b.to_polygon()).area();
    if inter < MIN_INTERSECTION_AREA {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU computed after aligning `a` to `b`'s orientation (centers and
/// sizes unchanged), removing orientation sensitivity.
pub fn orientation_agnostic_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let aligned = RotatedBox {
        theta: b.theta,
        ..*a
    };
    rotated_iou(&aligned, b)
}

/// Greedy descending-score suppression on rotated IoU. Ties keep the
/// lower original index. Returns kept indices in selection order.
pub fn rotated_nms(boxes: &[(RotatedBox, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j].1
            .partial_cmp(&boxes[i].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    // disjoint bounding rectangles imply IoU 0, skipping the clipper
    let aabbs: Vec<(f64, f64, f64, f64)> = boxes.iter().map(|(b, _)| b.aabb()).collect();
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let (ix0, iy0, ix1, iy1) = aabbs[i];
        for &j in &order[rank + 1..] {
            if suppressed[j] {
                continue;
            }
            let (jx0, jy0, jx1, jy1) = aabbs[j];
            if jx0 > ix1 || jx1 < ix0 || jy0 > iy1 || jy1 < iy0 {
                continue;
            }
            if rotated_iou(&boxes[i].0, &boxes[j].0) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Monte-Carlo IoU estimate: uniform samples over the joint
/// axis-aligned bounding rectangle of the two boxes. Returns the
/// estimate and its standard error.
pub fn mc_iou_oracle(a: &RotatedBox, b: &RotatedBox, samples: usize, seed: u64) -> (f64, f64) {
    assert!(samples >= 100_000, "oracle needs at least 1e5 samples");
    let (ax0, ay0, ax1, ay1) = a.aabb();
    let (bx0, by0, bx1, by1) = b.aabb();
    let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
    let (x1, y1) = (ax1.max(bx1), ay1.max(by1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n_inter = 0u64;
    let mut n_union = 0u64;
    for _ in 0..samples {
        let px = rng.gen_range(x0..x1);
        let py = rng.gen_range(y0..y1);
        let in_a = a.contains(px, py);
        let in_b = b.contains(px, py);
        if in_a || in_b {
            n_union += 1;
            if in_a && in_b {
                n_inter += 1;
            }
        }
    }
    if n_union == 0 {
        return (0.0, 0.0);
    }
    let r = n_inter as f64 / n_union as f64;
    let stderr = (r * (1.0 - r) / n_union as f64).sqrt();
    (r, stderr)
}
