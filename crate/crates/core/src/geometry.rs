//! Planar geometry: vectors, rigid poses, polygons, convex hulls and
//! directional separating-axis sweeps.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    /// Unit vector in the same direction, or `None` for a (near) zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 1e-12).then(|| self / n)
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, s: f64) -> Vec2 {
        Vec2::new(self.x / s, self.y / s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Rigid planar transform: rotate by `theta` about the body origin, then
/// translate to (`x`, `y`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { x: 0.0, y: 0.0, theta: 0.0 };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta }
    }

    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotate(self.theta) + self.translation()
    }

    pub fn inverse(&self) -> Pose {
        let t = (-self.translation()).rotate(-self.theta);
        Pose::new(t.x, t.y, -self.theta)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let t = self.apply(other.translation());
        Pose::new(t.x, t.y, self.theta + other.theta)
    }

    /// Pose after rotating the whole body by `angle` about the world point
    /// `pivot` and then translating by `shift`.
    pub fn pushed(&self, pivot: Vec2, angle: f64, shift: Vec2) -> Pose {
        let t = (self.translation() - pivot).rotate(angle) + pivot + shift;
        Pose::new(t.x, t.y, self.theta + angle)
    }
}

/// Twice the signed area; positive for counter-clockwise vertex order.
fn signed_area2(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum()
}

pub fn polygon_area(poly: &[Vec2]) -> f64 {
    0.5 * signed_area2(poly).abs()
}

/// Area centroid of a simple polygon.
pub fn polygon_centroid(poly: &[Vec2]) -> Vec2 {
    let n = poly.len();
    let a2 = signed_area2(poly);
    if a2.abs() < 1e-12 {
        let sum = poly.iter().fold(Vec2::ZERO, |acc, &p| acc + p);
        return sum / n.max(1) as f64;
    }
    let mut c = Vec2::ZERO;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let w = p.cross(q);
        c += (p + q) * w;
    }
    c / (3.0 * a2)
}

/// Even-odd point containment; points exactly on an edge may go either way.
pub fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segments_cross(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0)) && d1 != 0.0 && d2 != 0.0
}

/// True when no two non-adjacent edges intersect.
pub fn is_simple_polygon(poly: &[Vec2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    polygon_area(poly) > 1e-9
}

pub fn is_convex_polygon(poly: &[Vec2]) -> bool {
    let n = poly.len();
    let sign = signed_area2(poly).signum();
    (0..n).all(|i| {
        let (a, b, c) = (poly[i], poly[(i + 1) % n], poly[(i + 2) % n]);
        (b - a).cross(c - b) * sign >= -1e-12
    })
}

/// Ear-clipping triangulation of a simple polygon. Output triangles are
/// counter-clockwise.
pub fn triangulate(poly: &[Vec2]) -> Vec<[Vec2; 3]> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    if signed_area2(poly) < 0.0 {
        idx.reverse();
    }
    let mut tris = Vec::with_capacity(poly.len().saturating_sub(2));
    let mut guard = 0;
    while idx.len() > 3 && guard < 10_000 {
        guard += 1;
        let n = idx.len();
        let mut clipped = false;
        for i in 0..n {
            let (ia, ib, ic) = (idx[(i + n - 1) % n], idx[i], idx[(i + 1) % n]);
            let (a, b, c) = (poly[ia], poly[ib], poly[ic]);
            if (b - a).cross(c - b) <= 1e-12 {
                continue;
            }
            let blocked = idx.iter().any(|&k| k != ia && k != ib && k != ic && point_in_triangle(poly[k], a, b, c));
            if blocked {
                continue;
            }
            tris.push([a, b, c]);
            idx.remove(i);
            clipped = true;
            break;
        }
        if !clipped {
            // Numerically degenerate remainder: fall back to a fan.
            break;
        }
    }
    for k in 1..idx.len().saturating_sub(1) {
        tris.push([poly[idx[0]], poly[idx[k]], poly[idx[k + 1]]]);
    }
    tris
}

fn point_in_triangle(p: Vec2, a: Vec2, b: Vec2, c: Vec2) -> bool {
    let d1 = (b - a).cross(p - a);
    let d2 = (c - b).cross(p - b);
    let d3 = (a - c).cross(p - c);
    d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0
}

/// Convex hull by the monotone chain; counter-clockwise, collinear points
/// dropped.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Vec2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2
            && (lower[lower.len() - 1] - lower[lower.len() - 2]).cross(p - lower[lower.len() - 2]) <= 0.0
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Vec2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2
            && (upper[upper.len() - 1] - upper[upper.len() - 2]).cross(p - upper[upper.len() - 2]) <= 0.0
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn project(poly: &[Vec2], axis: Vec2) -> (f64, f64) {
    poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let s = p.dot(axis);
        (lo.min(s), hi.max(s))
    })
}

/// Open interval of `t` for which convex `moving + t·dir` has interior
/// overlap with convex `fixed`; `None` if they never overlap.
pub fn sweep_interval(fixed: &[Vec2], moving: &[Vec2], dir: Vec2) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let axes = edge_normals(fixed).chain(edge_normals(moving));
    for n in axes {
        let (pmin, pmax) = project(fixed, n);
        let (qmin, qmax) = project(moving, n);
        let s = dir.dot(n);
        if s.abs() < 1e-12 {
            if qmax <= pmin + 1e-12 || qmin >= pmax - 1e-12 {
                return None;
            }
            continue;
        }
        let (a, b) = ((pmin - qmax) / s, (pmax - qmin) / s);
        let (a, b) = if s > 0.0 { (a, b) } else { (b, a) };
        lo = lo.max(a);
        hi = hi.min(b);
        if lo >= hi {
            return None;
        }
    }
    Some((lo, hi))
}

fn edge_normals(poly: &[Vec2]) -> impl Iterator<Item = Vec2> + '_ {
    let n = poly.len();
    (0..n).map(move |i| (poly[(i + 1) % n] - poly[i]).perp())
}

/// Minimum translation vector pushing convex `b` out of convex `a`, or `None`
/// when the interiors are disjoint.
pub fn convex_mtv(a: &[Vec2], b: &[Vec2]) -> Option<Vec2> {
    let mut best: Option<(f64, Vec2)> = None;
    for n in edge_normals(a).chain(edge_normals(b)) {
        let Some(axis) = n.normalized() else { continue };
        let (amin, amax) = project(a, axis);
        let (bmin, bmax) = project(b, axis);
        let overlap = (amax - bmin).min(bmax - amin);
        if overlap <= 0.0 {
            return None;
        }
        if best.is_none_or(|(d, _)| overlap < d) {
            let push = if amax - bmin < bmax - amin { axis } else { -axis };
            best = Some((overlap, push * overlap));
        }
    }
    best.map(|(_, v)| v)
}

/// Area of the intersection of two convex polygons (Sutherland–Hodgman).
pub fn convex_intersection_area(a: &[Vec2], b: &[Vec2]) -> f64 {
    let ccw = |p: &[Vec2]| -> Vec<Vec2> {
        let mut v = p.to_vec();
        if signed_area2(&v) < 0.0 {
            v.reverse();
        }
        v
    };
    let subject = ccw(a);
    let clip = ccw(b);
    let mut out = subject;
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (c0, c1) = (clip[i], clip[(i + 1) % clip.len()]);
        let inside = |p: Vec2| (c1 - c0).cross(p - c0) >= 0.0;
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let e = c1 - c0;
                let denom = e.cross(cur - prev);
                if denom.abs() > 1e-15 {
                    let t = e.cross(c0 - prev) / denom;
                    out.push(prev + (cur - prev) * t);
                }
            }
            if ci {
                out.push(cur);
            }
        }
    }
    if out.len() < 3 {
        0.0
    } else {
        polygon_area(&out)
    }
}
