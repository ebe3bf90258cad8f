//! Where and how to nudge: the first contact from the uncertainty map, later
//! ones from the eigen-structure of each cluster's flow covariance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowField, UncertaintyMap};
use crate::geometry::{convex_hull, polygon_area, polygon_centroid, Vec2};
use crate::hypothesis::{boundary_pixels, pixel_center, SegmentationHypothesis};
use crate::raster::{connected_components8, open3, Grid};
use crate::scene::NudgeCommand;

const KAPPA_EPS: f64 = 1e-6;

/// Connected high-uncertainty region. `pixels` are row-major indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub pixels: Vec<usize>,
    pub mean_rho: f64,
    pub width: usize,
}

impl Blob {
    pub fn centroid(&self) -> Vec2 {
        let sum = self.pixels.iter().fold(Vec2::ZERO, |acc, &i| acc + pixel_center(i, self.width));
        sum / self.pixels.len() as f64
    }
}

/// Thresholds ρ at mean + `thresh_k`·std, opens with a 3×3 square and keeps
/// 8-connected components of at least `min_area` pixels, brightest first.
pub fn extract_blobs(rho: &UncertaintyMap, thresh_k: f64, min_area: usize) -> Result<Vec<Blob>> {
    assert!(min_area >= 1, "min_area must be positive");
    let data = &rho.rho.data;
    let n = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / n;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let thresh = mean + thresh_k * std;
    let (w, h) = (rho.width(), rho.height());
    let bin = Grid::from_vec(w, h, data.iter().map(|&v| v > thresh).collect());
    let (labels, k) = connected_components8(&open3(&bin));
    let mut comps: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.data.iter().enumerate() {
        if l != 0 {
            comps[l as usize - 1].push(i);
        }
    }
    let mut blobs: Vec<Blob> = comps
        .into_iter()
        .filter(|c| c.len() >= min_area)
        .map(|pixels| {
            let mean_rho = pixels.iter().map(|&i| data[i]).sum::<f64>() / pixels.len() as f64;
            Blob { pixels, mean_rho, width: w }
        })
        .collect();
    if blobs.is_empty() {
        return Err(Error::NoPileDetected);
    }
    // stable sort keeps raster order among equal means
    blobs.sort_by(|a, b| b.mean_rho.total_cmp(&a.mean_rho));
    Ok(blobs)
}

/// Which hull vertex becomes the first contact point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstNudgeRule {
    /// Vertex closest to the centroid of the most uncertain blob.
    #[default]
    Nearest,
    /// Vertex farthest from it.
    Farthest,
}

/// First nudge: a vertex of the joint convex hull of all blobs, chosen
/// relative to the most uncertain blob, pushing toward the hull centroid.
pub fn first_nudge(blobs: &[Blob], rule: FirstNudgeRule, magnitude: f64) -> Result<NudgeCommand> {
    assert!(!blobs.is_empty(), "first_nudge needs at least one blob");
    let star = blobs.iter().fold(&blobs[0], |best, b| if b.mean_rho > best.mean_rho { b } else { best });
    let target = star.centroid();
    let points: Vec<Vec2> = blobs.iter().flat_map(|b| b.pixels.iter().map(|&i| pixel_center(i, b.width))).collect();
    let hull = convex_hull(&points);
    if hull.len() < 3 || polygon_area(&hull) <= 0.0 {
        return Err(Error::PileDegenerate(hull.len()));
    }
    let better = |d: f64, p: Vec2, bd: f64, bp: Vec2| {
        let closer = match rule {
            FirstNudgeRule::Nearest => d < bd,
            FirstNudgeRule::Farthest => d > bd,
        };
        closer || (d == bd && (p.y, p.x) < (bp.y, bp.x))
    };
    let mut pick = hull[0];
    let mut pick_d = pick.distance(target);
    for &v in &hull[1..] {
        let d = v.distance(target);
        if better(d, v, pick_d, pick) {
            pick = v;
            pick_d = d;
        }
    }
    let direction = (polygon_centroid(&hull) - pick).normalized().ok_or(Error::PileDegenerate(hull.len()))?;
    Ok(NudgeCommand { point: pick, direction, magnitude, twist: 0.0 })
}

/// Flow covariance of one mask and its eigen-decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenStats {
    pub mask_id: u32,
    /// `[[a, b], [b, c]]` stored as `[a, b, c]`.
    pub sigma: [f64; 3],
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub v_min: Vec2,
    pub v_max: Vec2,
    pub kappa: f64,
}

/// Closed-form eigen-decomposition of a symmetric 2×2 matrix.
pub fn eigen_stats(mask_id: u32, sigma: [f64; 3]) -> EigenStats {
    let [a, b, c] = sigma;
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (lambda_max, lambda_min) = (mid + rad, mid - rad);
    let phi = 0.5 * (2.0 * b).atan2(a - c);
    let v_max = Vec2::new(phi.cos(), phi.sin());
    let v_min = v_max.perp();
    let kappa = (lambda_max.abs() + KAPPA_EPS) / (lambda_min.abs() + KAPPA_EPS);
    EigenStats { mask_id, sigma, lambda_min, lambda_max, v_min, v_max, kappa: kappa.max(1.0) }
}

/// Population covariance of the valid flow samples `(u, v)`.
pub fn flow_covariance(samples: &[(f64, f64)]) -> [f64; 3] {
    let n = samples.len() as f64;
    let (mu, mv) = samples.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
    let (mu, mv) = (mu / n, mv / n);
    let mut s = [0.0; 3];
    for &(u, v) in samples {
        let (du, dv) = (u - mu, v - mv);
        s[0] += du * du;
        s[1] += du * dv;
        s[2] += dv * dv;
    }
    s.map(|x| x / n)
}

/// Per-mask flow statistics, ascending mask id. Masks with fewer than two
/// valid flow samples are left out and reported in the second list.
pub fn cluster_stats(flow: &FlowField, hyp: &SegmentationHypothesis) -> (Vec<EigenStats>, Vec<u32>) {
    let mut stats = Vec::new();
    let mut flagged = Vec::new();
    for (id, pixels) in hyp.masks() {
        let samples: Vec<(f64, f64)> =
            pixels.iter().filter(|&&i| flow.valid[i]).map(|&i| (flow.u[i], flow.v[i])).collect();
        if samples.len() < 2 {
            flagged.push(id);
            continue;
        }
        stats.push(eigen_stats(id, flow_covariance(&samples)));
    }
    (stats, flagged)
}

/// Index into `kappas` of the cluster to nudge: the second largest κ when it
/// exceeds `tau_kappa`, the largest otherwise. Equal κ order by position.
pub fn select_cluster(kappas: &[f64], tau_kappa: f64) -> usize {
    assert!(!kappas.is_empty(), "select_cluster needs candidates");
    let mut order: Vec<usize> = (0..kappas.len()).collect();
    order.sort_by(|&a, &b| kappas[b].total_cmp(&kappas[a]).then(a.cmp(&b)));
    if order.len() >= 2 && kappas[order[1]] > tau_kappa {
        order[1]
    } else {
        order[0]
    }
}

/// Mask pixels hit walking from `from` along `dir` in unit steps before the
/// ray leaves the mask.
fn chord_length(hyp: &SegmentationHypothesis, id: u32, from: Vec2, dir: Vec2) -> usize {
    let mut n = 0;
    let mut p = from;
    loop {
        match hyp.labels.get_signed(p.x.floor() as i64, p.y.floor() as i64) {
            Some(&l) if l == id => n += 1,
            _ => return n,
        }
        p += dir;
    }
}

/// Nudge along the minor eigenvector of the selected cluster, entering at
/// the boundary pixel that sits on the minor axis behind the centroid.
pub fn next_nudge(stats: &[EigenStats], hyp: &SegmentationHypothesis, tau_kappa: f64, magnitude: f64) -> NudgeCommand {
    assert!(!stats.is_empty(), "next_nudge needs cluster statistics");
    let kappas: Vec<f64> = stats.iter().map(|s| s.kappa).collect();
    let chosen = &stats[select_cluster(&kappas, tau_kappa)];
    let pixels = hyp.masks().remove(&chosen.mask_id).expect("stats refer to an existing mask");
    let w = hyp.width();
    let centroid = pixels.iter().fold(Vec2::ZERO, |acc, &i| acc + pixel_center(i, w)) / pixels.len() as f64;
    let mut axis = chosen.v_min;
    if axis.y < 0.0 || (axis.y == 0.0 && axis.x < 0.0) {
        axis = -axis;
    }
    let boundary = boundary_pixels(&hyp.labels, chosen.mask_id, &pixels);

    let entry = |dir: Vec2| -> Option<Vec2> {
        let mut best: Option<(f64, f64, Vec2)> = None;
        for &i in &boundary {
            let p = pixel_center(i, w);
            let rel = p - centroid;
            let along = rel.dot(dir);
            if along > 0.0 {
                continue;
            }
            let off = rel.cross(dir).abs();
            let better = match best {
                None => true,
                Some((bo, ba, _)) => off < bo || (off == bo && along < ba),
            };
            if better {
                best = Some((off, along, p));
            }
        }
        best.map(|b| b.2)
    };

    let mut pick: Option<(usize, Vec2, Vec2)> = None;
    for dir in [axis, -axis] {
        if let Some(p) = entry(dir) {
            let len = chord_length(hyp, chosen.mask_id, p, dir);
            if pick.is_none_or(|(best, _, _)| len > best) {
                pick = Some((len, p, dir));
            }
        }
    }
    let (point, direction) = match pick {
        Some((_, p, d)) => (p, d),
        None => (centroid, axis),
    };
    NudgeCommand { point, direction, magnitude, twist: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rho_with_patches(w: usize, h: usize, patches: &[(usize, usize, usize, f64)]) -> UncertaintyMap {
        let mut g = Grid::new(w, h, 0.0);
        for &(x0, y0, s, v) in patches {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    g.set(x, y, v);
                }
            }
        }
        UncertaintyMap { rho: g }
    }

    #[test]
    fn flat_field_has_no_pile() {
        let m = UncertaintyMap { rho: Grid::new(50, 50, 0.01) };
        assert!(matches!(extract_blobs(&m, 1.0, 10), Err(Error::NoPileDetected)));
    }

    #[test]
    fn single_patch_is_one_blob() {
        let m = rho_with_patches(120, 100, &[(30, 30, 40, 1.0)]);
        let blobs = extract_blobs(&m, 1.0, 100).unwrap();
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].pixels.len(), 1600);
    }

    #[test]
    fn blobs_sorted_by_mean() {
        let m = rho_with_patches(250, 80, &[(10, 10, 30, 0.3), (140, 10, 30, 0.8)]);
        let blobs = extract_blobs(&m, 0.5, 50).unwrap();
        assert_eq!(blobs.len(), 2);
        assert!(blobs[0].mean_rho > blobs[1].mean_rho);
        let c = blobs[0].centroid();
        assert!(c.x > 140.0);
    }

    #[test]
    fn square_blob_first_nudge_aims_at_center() {
        let m = rho_with_patches(100, 100, &[(20, 30, 40, 1.0)]);
        let blobs = extract_blobs(&m, 0.5, 10).unwrap();
        let cmd = first_nudge(&blobs, FirstNudgeRule::Nearest, 10.0).unwrap();
        // all four corners are equidistant; the tie goes to the top-left
        assert_eq!(cmd.point, Vec2::new(20.5, 30.5));
        let want = (Vec2::new(40.0, 50.0) - cmd.point).normalized().unwrap();
        assert!((cmd.direction - want).norm() < 1e-6);
    }

    #[test]
    fn selection_rule_examples() {
        assert_eq!(select_cluster(&[8.0, 5.0, 2.0], 3.0), 1);
        assert_eq!(select_cluster(&[8.0, 2.5, 2.0], 3.0), 0);
        assert_eq!(select_cluster(&[4.0], 3.0), 0);
        assert_eq!(select_cluster(&[2.0, 9.0, 4.0], 3.0), 2);
    }

    #[test]
    fn two_sample_covariance() {
        let s = eigen_stats(1, flow_covariance(&[(1.0, 0.0), (-1.0, 0.0)]));
        assert_eq!(s.sigma, [1.0, 0.0, 0.0]);
        assert!((s.v_max.x.abs() - 1.0).abs() < 1e-12);
        assert!((s.kappa - 1.000001 / 1e-6).abs() < 1e-3);
    }

    #[test]
    fn translation_has_unit_kappa() {
        let s = eigen_stats(1, flow_covariance(&[(3.0, 1.0); 10]));
        assert_eq!(s.kappa, 1.0);
    }

    #[test]
    fn next_nudge_crosses_thin_bar() {
        // a 40×6 bar translating with shear noise along y: v_min is along x
        let w = 60;
        let pixels: Vec<usize> = (10..16).flat_map(|y| (10..50).map(move |x| y * w + x)).collect();
        let hyp = SegmentationHypothesis::from_masks(w, 30, &[(1, pixels)]);
        let stats = [eigen_stats(1, [0.1, 0.0, 2.0])];
        let cmd = next_nudge(&stats, &hyp, 3.0, 20.0);
        assert!((cmd.direction.x.abs() - 1.0).abs() < 1e-12);
        // enters at the end of the bar that lies behind the travel direction
        if cmd.direction.x > 0.0 {
            assert_eq!(cmd.point.x, 10.5);
        } else {
            assert_eq!(cmd.point.x, 49.5);
        }
        assert!((cmd.point.y - 12.5).abs() <= 1.0);
    }
}
