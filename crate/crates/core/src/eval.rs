//! Segmentation metrics, per-trial records and experiment summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::hypothesis::SegmentationHypothesis;
use crate::raster::{LabelImage, Mask};
use crate::scene::{render_labels, SceneState};

/// Intersection over union; two empty masks score 1, one empty mask 0.
pub fn iou(pred: &Mask, gt: &Mask) -> f64 {
    assert!(pred.same_size(gt), "masks must share a frame");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy one-to-one matching on an IoU matrix (rows × columns): repeatedly
/// take the largest remaining positive entry, ties broken by (row, column).
/// Returns `(row, column, iou)` in the order the pairs were taken.
pub fn greedy_match(iou: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let mut cells: Vec<(usize, usize, f64)> = iou
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &v)| (r, c, v)))
        .filter(|c| c.2 > 0.0)
        .collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let rows = iou.len();
    let cols = iou.first().map_or(0, Vec::len);
    let (mut row_used, mut col_used) = (vec![false; rows], vec![false; cols]);
    let mut out = Vec::new();
    for (r, c, v) in cells {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            out.push((r, c, v));
        }
    }
    out
}

/// Ground-truth labels for scoring. With `merge_glued`, every glue group is
/// relabeled to the smallest object id in it.
pub fn scoring_labels(scene: &SceneState, merge_glued: bool) -> LabelImage {
    let mut labels = render_labels(scene);
    if merge_glued {
        let mut group_min: BTreeMap<u32, u16> = BTreeMap::new();
        for o in &scene.objects {
            if let Some(g) = o.glue_group {
                let e = group_min.entry(g).or_insert(o.id);
                *e = (*e).min(o.id);
            }
        }
        let remap: BTreeMap<u16, u16> =
            scene.objects.iter().filter_map(|o| o.glue_group.map(|g| (o.id, group_min[&g]))).collect();
        for l in labels.data.iter_mut() {
            if let Some(&to) = remap.get(l) {
                *l = to;
            }
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub gt_id: u16,
    pub best_iou: f64,
    pub success: bool,
}

/// Scores each visible ground-truth region against its greedily matched
/// mask. Regions left unmatched score 0.
pub fn match_and_score(hyp: &SegmentationHypothesis, gt: &LabelImage, tau: f64) -> Vec<ObjectScore> {
    assert!(tau > 0.0 && tau < 1.0, "tau must lie in (0, 1)");
    assert!(hyp.labels.same_size(gt), "hypothesis and ground truth differ in size");
    let mut gt_area: BTreeMap<u16, usize> = BTreeMap::new();
    for &g in &gt.data {
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
    }
    let masks = hyp.masks();
    let gt_ids: Vec<u16> = gt_area.keys().copied().collect();
    let mask_ids: Vec<u32> = masks.keys().copied().collect();
    let gt_idx: BTreeMap<u16, usize> = gt_ids.iter().enumerate().map(|(k, &g)| (g, k)).collect();
    let mask_idx: BTreeMap<u32, usize> = mask_ids.iter().enumerate().map(|(k, &m)| (m, k)).collect();
    let mut inter = vec![vec![0usize; mask_ids.len()]; gt_ids.len()];
    for (i, &g) in gt.data.iter().enumerate() {
        let m = hyp.labels.data[i];
        if g != 0 && m != 0 {
            inter[gt_idx[&g]][mask_idx[&m]] += 1;
        }
    }
    let matrix: Vec<Vec<f64>> = inter
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(c, &n)| n as f64 / (gt_area[&gt_ids[r]] + masks[&mask_ids[c]].len() - n) as f64)
                .collect()
        })
        .collect();
    let mut best = vec![0.0; gt_ids.len()];
    for (r, _, v) in greedy_match(&matrix) {
        best[r] = v;
    }
    gt_ids
        .iter()
        .zip(best)
        .map(|(&gt_id, best_iou)| ObjectScore { gt_id, best_iou, success: best_iou >= tau })
        .collect()
}

/// Scene-level metrics of one hypothesis snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub iou: f64,
    pub dr50: f64,
    pub dr75: f64,
    /// Mean IoU over objects detected at 0.5 (0 when there are none).
    pub iou_s: f64,
    pub n_success50: usize,
}

pub fn score_snapshot(hyp: &SegmentationHypothesis, gt: &LabelImage) -> SnapshotMetrics {
    let scores = match_and_score(hyp, gt, 0.5);
    if scores.is_empty() {
        return SnapshotMetrics::default();
    }
    let n = scores.len() as f64;
    let iou = scores.iter().map(|s| s.best_iou).sum::<f64>() / n;
    let hits: Vec<f64> = scores.iter().filter(|s| s.success).map(|s| s.best_iou).collect();
    let dr75 = scores.iter().filter(|s| s.best_iou >= 0.75).count() as f64 / n;
    let iou_s = if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 };
    SnapshotMetrics { iou, dr50: hits.len() as f64 / n, dr75, iou_s, n_success50: hits.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NudgeMetrics {
    /// 0 is the hypothesis before any nudge.
    pub nudge_index: usize,
    pub iou: f64,
    pub dr50: f64,
    pub dr75: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub iou: f64,
    pub dr50: f64,
    pub dr75: f64,
    pub iou_s: f64,
    pub n_success50: usize,
    pub nudges_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub n_objects: usize,
    pub per_nudge: Vec<NudgeMetrics>,
    pub final_metrics: FinalMetrics,
    /// Error code when the trial aborted.
    pub failure: Option<String>,
}

impl TrialRecord {
    /// Final metrics are the best values seen over all snapshots; IoU_s is
    /// taken from the snapshot with the best IoU.
    pub fn from_snapshots(seed: u64, n_objects: usize, snaps: &[SnapshotMetrics], nudges_used: usize) -> Self {
        let per_nudge: Vec<NudgeMetrics> = snaps
            .iter()
            .enumerate()
            .map(|(k, s)| NudgeMetrics { nudge_index: k, iou: s.iou, dr50: s.dr50, dr75: s.dr75 })
            .collect();
        let mut fin = FinalMetrics { nudges_used, ..FinalMetrics::default() };
        let mut best_iou = f64::NEG_INFINITY;
        for s in snaps {
            fin.dr50 = fin.dr50.max(s.dr50);
            fin.dr75 = fin.dr75.max(s.dr75);
            if s.iou > best_iou {
                best_iou = s.iou;
                fin.iou = s.iou;
                fin.iou_s = s.iou_s;
                fin.n_success50 = s.n_success50;
            }
        }
        TrialRecord { seed, n_objects, per_nudge, final_metrics: fin, failure: None }
    }

    pub fn failed(seed: u64, n_objects: usize, code: &str) -> Self {
        TrialRecord {
            seed,
            n_objects,
            per_nudge: Vec::new(),
            final_metrics: FinalMetrics::default(),
            failure: Some(code.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub trials: usize,
    pub failures: usize,
    pub mean_iou: f64,
    pub dr50: f64,
    pub dr75: f64,
    pub iou_s: f64,
    pub mean_nudges: f64,
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

/// Means over trials. Failed trials count with zero metrics. IoU_s pools all
/// objects detected at 0.5 across trials. Sums run over sorted values so the
/// result does not depend on trial order.
pub fn aggregate(trials: &[TrialRecord]) -> SummaryTable {
    assert!(!trials.is_empty(), "aggregate needs at least one trial");
    let n = trials.len() as f64;
    let mean = |f: &dyn Fn(&FinalMetrics) -> f64| sorted_sum(trials.iter().map(|t| f(&t.final_metrics)).collect()) / n;
    let hits: usize = trials.iter().map(|t| t.final_metrics.n_success50).sum();
    let iou_s = if hits == 0 {
        0.0
    } else {
        sorted_sum(trials.iter().map(|t| t.final_metrics.iou_s * t.final_metrics.n_success50 as f64).collect())
            / hits as f64
    };
    SummaryTable {
        trials: trials.len(),
        failures: trials.iter().filter(|t| t.failure.is_some()).count(),
        mean_iou: mean(&|f| f.iou),
        dr50: mean(&|f| f.dr50),
        dr75: mean(&|f| f.dr75),
        iou_s,
        mean_nudges: mean(&|f| f.nudges_used as f64),
    }
}

pub const TRIALS_CSV_HEADER: &str = "seed,n_objects,nudges,iou,dr50,dr75,iou_s";
pub const SWEEP_CSV_HEADER: &str = "eps_m,eps_a,mean_iou,dr50,dr75";

pub fn trials_csv(trials: &[TrialRecord]) -> String {
    let mut out = format!("{TRIALS_CSV_HEADER}\n");
    for t in trials {
        let f = &t.final_metrics;
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            t.seed, t.n_objects, f.nudges_used, f.iou, f.dr50, f.dr75, f.iou_s
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps_m: f64,
    pub eps_a: f64,
    pub summary: SummaryTable,
}

/// Sweep cells: the clean cell, then magnitude noise alone, then angle noise
/// alone. Zero entries in the lists are folded into the clean cell.
pub fn sweep_cells(eps_m: &[f64], eps_a: &[f64]) -> Vec<(f64, f64)> {
    let mut cells = vec![(0.0, 0.0)];
    cells.extend(eps_m.iter().filter(|&&m| m > 0.0).map(|&m| (m, 0.0)));
    cells.extend(eps_a.iter().filter(|&&a| a > 0.0).map(|&a| (0.0, a)));
    cells
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6},{:.6}", r.eps_m, r.eps_a, r.summary.mean_iou, r.summary.dr50, r.summary.dr75)
            .unwrap();
    }
    out
}
