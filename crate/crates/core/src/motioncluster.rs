//! Density-based clustering of flow into rigid-motion segments.
//!
//! Every flow sample becomes a point `[x, ℳ, 𝒜]`. Two points are neighbors
//! when they are close in the image, have similar flow magnitude and similar
//! flow direction (with 2π wraparound). DBSCAN over that predicate groups
//! pixels that moved together; isolated points are dropped as noise.

use std::collections::HashMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::Vec2;
use crate::hypothesis::SegmentationHypothesis;
use crate::raster::{connected_components8, open3, Grid, Mask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPoint {
    pub pos: Vec2,
    pub mag: f64,
    /// Direction in [0, 2π).
    pub ang: f64,
}

fn default_tau_d() -> f64 {
    15.0
}
fn default_tau_m() -> f64 {
    1.5
}
fn default_tau_a() -> f64 {
    0.35
}
fn default_min_pts() -> usize {
    10
}
fn default_stride() -> usize {
    2
}
fn default_min_magnitude() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    /// Image distance threshold (px, strict).
    #[serde(default = "default_tau_d")]
    pub tau_d: f64,
    /// Flow magnitude threshold (px, strict).
    #[serde(default = "default_tau_m")]
    pub tau_m: f64,
    /// Wrapped flow angle threshold (rad, inclusive).
    #[serde(default = "default_tau_a")]
    pub tau_a: f64,
    /// Minimum neighborhood size, counting the point itself.
    #[serde(default = "default_min_pts")]
    pub min_pts: usize,
    /// Pixel subsampling stride for clustering.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Flow below this magnitude is treated as static and not clustered.
    #[serde(default = "default_min_magnitude")]
    pub min_magnitude: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            tau_d: default_tau_d(),
            tau_m: default_tau_m(),
            tau_a: default_tau_a(),
            min_pts: default_min_pts(),
            stride: default_stride(),
            min_magnitude: default_min_magnitude(),
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tau_d, self.tau_m, self.tau_a].iter().all(|&t| t > 0.0);
        if !positive || self.min_pts < 1 || self.stride < 1 || self.min_magnitude < 0.0 {
            return Err(Error::Config(format!("invalid cluster parameters {self:?}")));
        }
        Ok(())
    }
}

/// min(|a−b|, 2π−|a−b|), always in [0, π] for inputs in [0, 2π).
pub fn wrapped_angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(TAU);
    d.min(TAU - d)
}

/// The three membership criteria: strict image distance, strict magnitude
/// difference, inclusive wrapped angle difference.
pub fn neighbor_predicate(x: &FlowPoint, y: &FlowPoint, p: &ClusterParams) -> bool {
    (x.pos - y.pos).norm() < p.tau_d
        && (x.mag - y.mag).abs() < p.tau_m
        && wrapped_angle_distance(x.ang, y.ang) <= p.tau_a
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Cluster per point, −1 for noise.
    pub labels: Vec<i32>,
    pub k: usize,
}

/// Neighbor lists (excluding self) using a uniform grid of `tau_d` cells.
fn neighborhoods(points: &[FlowPoint], p: &ClusterParams) -> Vec<Vec<u32>> {
    let cell = p.tau_d;
    let key = |q: &FlowPoint| ((q.pos.x / cell).floor() as i64, (q.pos.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
    for (i, q) in points.iter().enumerate() {
        grid.entry(key(q)).or_default().push(i as u32);
    }
    points
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let (cx, cy) = key(q);
            let mut out = Vec::new();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                        out.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&j| j as usize != i && neighbor_predicate(q, &points[j as usize], p)),
                        );
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// DBSCAN with `neighbor_predicate` as the ε-test.
///
/// A point is core when its neighborhood, itself included, holds at least
/// `min_pts` points. Clusters are the density-connected components of core
/// points, numbered in order of their lowest-index core point. A border
/// point joins the cluster of its lowest-index core neighbor; everything
/// else is noise.
pub fn dbscan(points: &[FlowPoint], p: &ClusterParams) -> ClusterAssignment {
    let nbrs = neighborhoods(points, p);
    let core: Vec<bool> = nbrs.iter().map(|n| n.len() + 1 >= p.min_pts).collect();
    let mut labels = vec![-1i32; points.len()];
    let mut k = 0usize;
    let mut stack = Vec::new();
    for seed in 0..points.len() {
        if !core[seed] || labels[seed] != -1 {
            continue;
        }
        let c = k as i32;
        k += 1;
        labels[seed] = c;
        stack.push(seed);
        while let Some(i) = stack.pop() {
            for &j in &nbrs[i] {
                let j = j as usize;
                if core[j] && labels[j] == -1 {
                    labels[j] = c;
                    stack.push(j);
                }
            }
        }
    }
    for i in 0..points.len() {
        if !core[i] {
            // neighbor lists are sorted, so the first core neighbor has the lowest index
            if let Some(&c) = nbrs[i].iter().find(|&&j| core[j as usize]) {
                labels[i] = labels[c as usize];
            }
        }
    }
    ClusterAssignment { labels, k }
}

/// Rasterizes each cluster into a mask (mask id = cluster + 1); noise
/// points stay unassigned.
pub fn masks_from_assignment(
    assign: &ClusterAssignment,
    points: &[FlowPoint],
    image_size: (usize, usize),
) -> SegmentationHypothesis {
    let (w, h) = image_size;
    let mut labels = Grid::new(w, h, 0u32);
    for (pt, &l) in points.iter().zip(&assign.labels) {
        if l < 0 {
            continue;
        }
        let (x, y) = (pt.pos.x.floor(), pt.pos.y.floor());
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            labels.set(x as usize, y as usize, l as u32 + 1);
        }
    }
    SegmentationHypothesis::from_labels(labels, 0)
}

/// Flow sample at pixel `i`, positioned at the pixel's integer coordinates.
pub fn flow_point(flow: &FlowField, i: usize) -> FlowPoint {
    FlowPoint {
        pos: Vec2::new((i % flow.width) as f64, (i / flow.width) as f64),
        mag: flow.magnitude(i),
        ang: flow.angle(i),
    }
}

/// Pixels that carry usable motion: valid, above the static threshold and
/// inside `region` when given.
pub fn moving_pixels(flow: &FlowField, p: &ClusterParams, region: Option<&Mask>) -> Mask {
    let data = (0..flow.len())
        .map(|i| flow.valid[i] && flow.magnitude(i) >= p.min_magnitude && region.is_none_or(|r| r.data[i]))
        .collect();
    Grid::from_vec(flow.width, flow.height, data)
}

/// Clusters the moving pixels of `flow` on the stride grid and fills the
/// result back to full resolution: each moving pixel takes the label of
/// the nearest clustered grid sample whose flow passes the neighbor
/// predicate with its own. Returns per-pixel labels (0 = none) and the
/// cluster count.
pub fn cluster_flow(flow: &FlowField, p: &ClusterParams, region: Option<&Mask>) -> (Grid<u32>, usize) {
    let moving = moving_pixels(flow, p, region);
    let (w, h, s) = (flow.width, flow.height, p.stride);
    let mut sample_index: Vec<usize> = Vec::new();
    for y in (0..h).step_by(s) {
        for x in (0..w).step_by(s) {
            let i = y * w + x;
            if moving.data[i] {
                sample_index.push(i);
            }
        }
    }
    let points: Vec<FlowPoint> = sample_index.iter().map(|&i| flow_point(flow, i)).collect();
    let assign = dbscan(&points, p);
    let mut sample_label = Grid::new(w, h, 0u32);
    for (&i, &l) in sample_index.iter().zip(&assign.labels) {
        if l >= 0 {
            sample_label.data[i] = l as u32 + 1;
        }
    }
    if s == 1 {
        return (sample_label, assign.k);
    }
    let mut out = Grid::new(w, h, 0u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !moving.data[i] {
                continue;
            }
            let me = flow_point(flow, i);
            let (x0, y0) = (x - x % s, y - y % s);
            let mut best: Option<(f64, u32)> = None;
            for (cx, cy) in [(x0, y0), (x0 + s, y0), (x0, y0 + s), (x0 + s, y0 + s)] {
                if cx >= w || cy >= h {
                    continue;
                }
                let j = cy * w + cx;
                let l = sample_label.data[j];
                if l == 0 || !neighbor_predicate(&me, &flow_point(flow, j), p) {
                    continue;
                }
                let d = (cx as f64 - x as f64).powi(2) + (cy as f64 - y as f64).powi(2);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, l));
                }
            }
            if let Some((_, l)) = best {
                out.data[i] = l;
            }
        }
    }
    (out, assign.k)
}

/// Static parts of each prior mask: pixels with valid sub-threshold flow,
/// opened with a 3×3 square, split into 8-connected components of at least
/// `min_area` pixels. Returned as pixel index lists.
pub fn static_segments(
    flow: &FlowField,
    prior: &SegmentationHypothesis,
    p: &ClusterParams,
    min_area: usize,
) -> Vec<Vec<usize>> {
    let (w, h) = (flow.width, flow.height);
    let mut out = Vec::new();
    for (_, pixels) in prior.masks() {
        // Work on the mask's bounding box plus a margin wide enough that the
        // 3×3 opening sees the same neighborhood as on the full frame.
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &i in &pixels {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (x0, y0) = (x0.saturating_sub(2), y0.saturating_sub(2));
        let (x1, y1) = ((x1 + 2).min(w - 1), (y1 + 2).min(h - 1));
        let cw = x1 - x0 + 1;
        let mut m: Mask = Grid::new(cw, y1 - y0 + 1, false);
        for &i in &pixels {
            if flow.valid[i] && flow.magnitude(i) < p.min_magnitude {
                m.set(i % w - x0, i / w - y0, true);
            }
        }
        let opened = open3(&m);
        let (cc, n) = connected_components8(&opened);
        let mut comps: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (j, &l) in cc.data.iter().enumerate() {
            if l > 0 {
                comps[l as usize - 1].push((y0 + j / cw) * w + x0 + j % cw);
            }
        }
        out.extend(comps.into_iter().filter(|c| c.len() >= min_area));
    }
    out
}
