//! Reference implementations used as test oracles. Deliberately naive:
//! quadratic scans, explicit matrices, exhaustive assignment.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nudgeseg_core::motioncluster::{ClusterParams, FlowPoint};

/// Membership test written out from the three thresholds.
pub fn oracle_neighbors(a: &FlowPoint, b: &FlowPoint, p: &ClusterParams) -> bool {
    let dx = a.pos.x - b.pos.x;
    let dy = a.pos.y - b.pos.y;
    let mut dang = (a.ang - b.ang).abs();
    while dang > 2.0 * PI {
        dang -= 2.0 * PI;
    }
    let dang = dang.min(2.0 * PI - dang);
    (dx * dx + dy * dy).sqrt() < p.tau_d && (a.mag - b.mag).abs() < p.tau_m && dang <= p.tau_a
}

/// DBSCAN by transitive closure over the full adjacency matrix. Returns a
/// label per point (−1 noise). Border points take the component of their
/// lowest-index core neighbor.
pub fn oracle_dbscan(points: &[FlowPoint], p: &ClusterParams) -> Vec<i64> {
    let n = points.len();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            adj[i][j] = i != j && oracle_neighbors(&points[i], &points[j], p);
        }
    }
    let core: Vec<bool> = (0..n).map(|i| adj[i].iter().filter(|&&b| b).count() + 1 >= p.min_pts).collect();
    // reach[i][j]: j reachable from i through core points (Warshall)
    let mut reach: Vec<Vec<bool>> =
        (0..n).map(|i| (0..n).map(|j| i == j || (core[i] && core[j] && adj[i][j])).collect()).collect();
    for k in 0..n {
        if !core[k] {
            continue;
        }
        for i in 0..n {
            if reach[i][k] {
                let via = reach[k].clone();
                for (r, v) in reach[i].iter_mut().zip(via) {
                    *r |= v;
                }
            }
        }
    }
    let mut label = vec![-1i64; n];
    for i in 0..n {
        if core[i] {
            // component id = smallest core index reachable
            label[i] = (0..n).find(|&j| core[j] && reach[i][j]).unwrap() as i64;
        }
    }
    let core_label = label.clone();
    for i in 0..n {
        if !core[i] {
            if let Some(j) = (0..n).find(|&j| core[j] && adj[i][j]) {
                label[i] = core_label[j];
            }
        }
    }
    label
}

/// Groups of indices sharing a nonnegative label, sorted; label values are
/// irrelevant.
pub fn partition_of<L: Ord + Copy>(labels: &[L], ignore: Option<L>) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if Some(l) != ignore {
            groups.entry(l).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

/// IoU by set counting over label images.
pub fn oracle_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best achievable mean over rows of a one-to-one assignment (rows may stay
/// unassigned), by exhaustive search over column subsets.
pub fn optimal_assignment_mean(matrix: &[Vec<f64>]) -> f64 {
    let rows = matrix.len();
    if rows == 0 {
        return 0.0;
    }
    let cols = matrix[0].len();
    fn go(r: usize, used: u32, m: &[Vec<f64>], cols: usize) -> f64 {
        if r == m.len() {
            return 0.0;
        }
        let mut best = go(r + 1, used, m, cols);
        for c in 0..cols {
            if used & (1 << c) == 0 {
                best = best.max(m[r][c] + go(r + 1, used | (1 << c), m, cols));
            }
        }
        best
    }
    go(0, 0, matrix, cols) / rows as f64
}

/// Labels of a Voronoi partition of a `w`×`h` grid around `sites`
/// (label = site index + 1); pixels farther than `radius` from every site
/// stay 0.
pub fn voronoi_labels(w: usize, h: usize, sites: &[(f64, f64)], radius: f64) -> Vec<u32> {
    let mut out = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best = None;
            for (k, &(sx, sy)) in sites.iter().enumerate() {
                let d = (x as f64 - sx).hypot(y as f64 - sy);
                if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            if let Some((_, k)) = best {
                out[y * w + x] = k as u32 + 1;
            }
        }
    }
    out
}
