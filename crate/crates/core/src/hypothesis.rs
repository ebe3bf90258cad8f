//! The evolving instance segmentation: forward warping by flow,
//! reconciliation with fresh motion clusters, termination and verification.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::greedy_match;
use crate::flow::{ground_truth_flow, inject_noise, FlowField, NoiseSpec};
use crate::geometry::Vec2;
use crate::motioncluster::{cluster_flow, static_segments, ClusterParams};
use crate::raster::{close3, Grid, LabelImage, Mask};
use crate::scene::{apply_nudge, NudgeCommand, SceneState};

/// Disjoint instance masks stored as a label image (0 = unassigned).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationHypothesis {
    pub labels: Grid<u32>,
    pub time_index: usize,
    /// Smallest id guaranteed unused by any mask so far.
    pub next_id: u32,
}

impl SegmentationHypothesis {
    pub fn empty(width: usize, height: usize) -> Self {
        SegmentationHypothesis { labels: Grid::new(width, height, 0), time_index: 0, next_id: 1 }
    }

    pub fn from_labels(labels: Grid<u32>, time_index: usize) -> Self {
        let next_id = labels.data.iter().copied().max().unwrap_or(0) + 1;
        SegmentationHypothesis { labels, time_index, next_id }
    }

    /// Builds a hypothesis from explicit masks; panics when masks overlap.
    pub fn from_masks(width: usize, height: usize, masks: &[(u32, Vec<usize>)]) -> Self {
        let mut labels = Grid::new(width, height, 0u32);
        for (id, pixels) in masks {
            assert!(*id > 0, "mask id 0 is reserved");
            for &i in pixels {
                assert_eq!(labels.data[i], 0, "masks must be disjoint");
                labels.data[i] = *id;
            }
        }
        Self::from_labels(labels, 0)
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    /// Pixel lists per mask id, ascending ids; empty masks never appear.
    pub fn masks(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.data.iter().enumerate() {
            if l != 0 {
                out.entry(l).or_default().push(i);
            }
        }
        out
    }

    pub fn mask_count(&self) -> usize {
        self.masks().len()
    }

    pub fn mask(&self, id: u32) -> Mask {
        Grid::from_vec(self.width(), self.height(), self.labels.data.iter().map(|&l| l == id).collect())
    }

    /// Snapshot as a 16-bit label image; errors if an id exceeds 65535.
    pub fn to_label_image(&self) -> Result<LabelImage> {
        let data = self
            .labels
            .data
            .iter()
            .map(|&l| u16::try_from(l).map_err(|_| Error::Format(format!("mask id {l} exceeds 16 bits"))))
            .collect::<Result<Vec<u16>>>()?;
        Ok(Grid::from_vec(self.width(), self.height(), data))
    }

    pub fn from_label_image(img: &LabelImage) -> Self {
        Self::from_labels(Grid::from_vec(img.width, img.height, img.data.iter().map(|&v| v as u32).collect()), 0)
    }

    /// Canonical partition: masks as sorted pixel lists, ordered by first
    /// pixel. Two hypotheses partition identically iff these are equal.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut parts: Vec<Vec<usize>> = self.masks().into_values().collect();
        parts.sort();
        parts
    }
}

/// Forward-splats every mask pixel to `round(x + flow(x))`. Where labels
/// collide the source with the larger flow norm wins (earlier scan order on
/// ties); targets outside the frame are dropped. Each mask that actually
/// moved is then closed with a 3×3 square to fill splat holes, writing only
/// into unassigned pixels. Zero flow is the exact identity.
pub fn warp_masks(hyp: &SegmentationHypothesis, flow: &FlowField) -> SegmentationHypothesis {
    let (w, h) = (hyp.width(), hyp.height());
    assert!(flow.width == w && flow.height == h, "flow and hypothesis dimensions differ");
    let mut out = Grid::new(w, h, 0u32);
    let mut best = vec![f64::NEG_INFINITY; w * h];
    let mut moved: BTreeSet<u32> = BTreeSet::new();
    for (i, &l) in hyp.labels.data.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let tx = (x + flow.u[i]).round();
        let ty = (y + flow.v[i]).round();
        if tx != x || ty != y {
            moved.insert(l);
        }
        if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
            continue;
        }
        let t = ty as usize * w + tx as usize;
        let norm = flow.magnitude(i);
        if norm > best[t] {
            best[t] = norm;
            out.data[t] = l;
        }
    }
    for &l in &moved {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for (i, &v) in out.data.iter().enumerate() {
            if v == l {
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
        if x0 == usize::MAX {
            continue;
        }
        // crop with a margin so the 3×3 closing behaves as on the full frame
        let (cx0, cy0) = (x0.saturating_sub(2), y0.saturating_sub(2));
        let (cx1, cy1) = ((x1 + 2).min(w - 1), (y1 + 2).min(h - 1));
        let (cw, ch) = (cx1 - cx0 + 1, cy1 - cy0 + 1);
        let mut crop = Grid::new(cw, ch, false);
        for y in 0..ch {
            for x in 0..cw {
                crop.set(x, y, *out.get(cx0 + x, cy0 + y) == l);
            }
        }
        let closed = close3(&crop);
        for y in 0..ch {
            for x in 0..cw {
                let t = (cy0 + y) * w + cx0 + x;
                if *closed.get(x, y) && out.data[t] == 0 {
                    out.data[t] = l;
                }
            }
        }
    }
    SegmentationHypothesis { labels: out, time_index: hyp.time_index + 1, next_id: hyp.next_id }
}

/// Reconciles propagated masks with fresh clusters observed in the same
/// frame.
///
/// Each fresh cluster claims the propagated mask it overlaps most, measured
/// as |fresh ∩ prop| / |fresh|, when that ratio exceeds `tau_h`. A claimed
/// mask keeps its id and absorbs its largest claimant; the pixels of any
/// further claimant are split off into a new mask. Unclaimed propagated
/// masks persist, unmatched fresh clusters become new masks, and pixels left
/// claimed by several masks go to the largest of them.
pub fn refine(prop: &SegmentationHypothesis, fresh: &SegmentationHypothesis, tau_h: f64) -> SegmentationHypothesis {
    assert!(prop.labels.same_size(&fresh.labels), "refine needs hypotheses of one frame");
    let prop_masks = prop.masks();
    let fresh_masks = fresh.masks();
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (i, &f) in fresh.labels.data.iter().enumerate() {
        let p = prop.labels.data[i];
        if f != 0 && p != 0 {
            *overlap.entry((f, p)).or_default() += 1;
        }
    }

    let mut claims: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
    let mut unmatched: Vec<u32> = Vec::new();
    for (&f, pixels) in &fresh_masks {
        let best = prop_masks.keys().filter_map(|&p| overlap.get(&(f, p)).map(|&c| (p, c))).fold(
            None::<(u32, usize)>,
            |acc, (p, c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            },
        );
        match best {
            Some((p, c)) if c as f64 / pixels.len() as f64 > tau_h => claims.entry(p).or_default().push((f, c)),
            _ => unmatched.push(f),
        }
    }

    let mut next_id = prop.next_id.max(prop_masks.keys().next_back().map_or(1, |m| m + 1));
    let mut out_masks: Vec<(u32, Vec<usize>)> = Vec::new();
    for (&p, pixels) in &prop_masks {
        let Some(claimants) = claims.get(&p) else {
            out_masks.push((p, pixels.clone()));
            continue;
        };
        let keeper = claimants.iter().fold(claimants[0], |best, &c| if c.1 > best.1 { c } else { best }).0;
        let others: BTreeSet<u32> = claimants.iter().map(|c| c.0).filter(|&f| f != keeper).collect();
        let mut merged: BTreeSet<usize> = pixels.iter().copied().collect();
        merged.extend(fresh_masks[&keeper].iter().copied());
        merged.retain(|&i| !others.contains(&fresh.labels.data[i]));
        out_masks.push((p, merged.into_iter().collect()));
        for f in others {
            out_masks.push((next_id, fresh_masks[&f].clone()));
            next_id += 1;
        }
    }
    for f in unmatched {
        out_masks.push((next_id, fresh_masks[&f].clone()));
        next_id += 1;
    }

    // Disjointify: contested pixels go to the largest claiming mask.
    let size: HashMap<u32, usize> = out_masks.iter().map(|(id, px)| (*id, px.len())).collect();
    let mut labels = Grid::new(prop.width(), prop.height(), 0u32);
    for (id, pixels) in &out_masks {
        for &i in pixels {
            let cur = labels.data[i];
            let wins = cur == 0 || size[id] > size[&cur] || (size[id] == size[&cur] && *id < cur);
            if wins {
                labels.data[i] = *id;
            }
        }
    }
    SegmentationHypothesis { labels, time_index: prop.time_index, next_id }
}

/// Removes masks smaller than `min_area` pixels (their pixels become
/// unassigned). Ids of the remaining masks are unchanged.
pub fn drop_small_masks(mut hyp: SegmentationHypothesis, min_area: usize) -> SegmentationHypothesis {
    let small: BTreeSet<u32> =
        hyp.masks().into_iter().filter(|(_, px)| px.len() < min_area).map(|(id, _)| id).collect();
    if !small.is_empty() {
        hyp.labels.data.iter_mut().filter(|l| small.contains(l)).for_each(|l| *l = 0);
    }
    hyp
}

/// Mean IoU over greedily matched mask pairs; unmatched masks count as 0 and
/// two empty hypotheses score 1.
pub fn mean_iou_between(a: &SegmentationHypothesis, b: &SegmentationHypothesis) -> f64 {
    let am = a.masks();
    let bm = b.masks();
    if am.is_empty() && bm.is_empty() {
        return 1.0;
    }
    let a_ids: Vec<u32> = am.keys().copied().collect();
    let b_ids: Vec<u32> = bm.keys().copied().collect();
    let a_idx: HashMap<u32, usize> = a_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let b_idx: HashMap<u32, usize> = b_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut inter = vec![vec![0usize; b_ids.len()]; a_ids.len()];
    for (i, &la) in a.labels.data.iter().enumerate() {
        let lb = b.labels.data[i];
        if la != 0 && lb != 0 {
            inter[a_idx[&la]][b_idx[&lb]] += 1;
        }
    }
    let iou: Vec<Vec<f64>> = (0..a_ids.len())
        .map(|r| {
            (0..b_ids.len())
                .map(|c| {
                    let n = inter[r][c];
                    let u = am[&a_ids[r]].len() + bm[&b_ids[c]].len() - n;
                    n as f64 / u as f64
                })
                .collect()
        })
        .collect();
    let total = greedy_match(&iou).iter().fold(0.0, |acc, m| acc + m.2);
    total / a_ids.len().max(b_ids.len()) as f64
}

/// True once the last `window_n` changes of the mean-IoU history are all
/// below `tau_stable`. Needs at least `window_n + 1` entries.
pub fn check_termination(iou_history: &[f64], tau_stable: f64, window_n: usize) -> bool {
    assert!(window_n >= 1, "window_n must be at least 1");
    if iou_history.len() < window_n + 1 {
        return false;
    }
    iou_history.windows(2).rev().take(window_n).all(|w| (w[1] - w[0]).abs() < tau_stable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Exploring,
    Verifying,
    Done,
}

#[derive(Debug, Clone)]
pub struct LoopState {
    pub hyp: SegmentationHypothesis,
    pub iou_history: Vec<f64>,
    pub nudge_count: usize,
    pub phase: Phase,
}

impl LoopState {
    pub fn new(hyp: SegmentationHypothesis) -> Self {
        LoopState { hyp, iou_history: Vec::new(), nudge_count: 0, phase: Phase::Exploring }
    }

    /// Allowed moves: exploring → verifying → exploring | done.
    pub fn transition(&mut self, to: Phase) {
        let ok = matches!(
            (self.phase, to),
            (Phase::Exploring, Phase::Verifying)
                | (Phase::Verifying, Phase::Exploring)
                | (Phase::Verifying, Phase::Done)
        );
        assert!(ok, "illegal phase transition {:?} -> {:?}", self.phase, to);
        if to == Phase::Exploring {
            self.iou_history.clear();
        }
        self.phase = to;
    }
}

fn default_tau_h() -> f64 {
    0.5
}
fn default_tau_stable() -> f64 {
    0.05
}
fn default_window_n() -> usize {
    2
}
fn default_budget() -> usize {
    20
}
fn default_static_min_area() -> usize {
    60
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisParams {
    #[serde(default = "default_tau_h")]
    pub tau_h: f64,
    #[serde(default = "default_tau_stable")]
    pub tau_stable: f64,
    #[serde(default = "default_window_n")]
    pub window_n: usize,
    /// Hard cap on nudges per trial.
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Minimum size (px) of a static mask part or verification cluster.
    #[serde(default = "default_static_min_area")]
    pub static_min_area: usize,
}

impl Default for HypothesisParams {
    fn default() -> Self {
        HypothesisParams {
            tau_h: default_tau_h(),
            tau_stable: default_tau_stable(),
            window_n: default_window_n(),
            budget: default_budget(),
            static_min_area: default_static_min_area(),
        }
    }
}

impl HypothesisParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_h > 0.0 && self.tau_h < 1.0) || self.tau_stable <= 0.0 || self.window_n < 1 {
            return Err(Error::Config(format!("invalid hypothesis parameters {self:?}")));
        }
        Ok(())
    }
}

/// Everything needed to turn a nudge into an updated hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct Perception {
    pub cluster: ClusterParams,
    pub hypothesis: HypothesisParams,
    pub noise: NoiseSpec,
}

/// Result of executing one nudge and updating the hypothesis.
#[derive(Debug, Clone)]
pub struct Observation {
    pub scene: SceneState,
    /// Observed (possibly noisy) flow from the previous frame.
    pub flow: FlowField,
    /// Fresh segments in the previous frame: moving clusters followed by
    /// static parts of prior masks.
    pub fresh: SegmentationHypothesis,
    pub fresh_count: usize,
    /// Refined hypothesis, still in the previous frame.
    pub refined: SegmentationHypothesis,
    /// Refined hypothesis propagated into the new frame.
    pub next: SegmentationHypothesis,
    /// Mean IoU between the prior and the refined hypothesis.
    pub mean_iou: f64,
}

/// Builds the fresh hypothesis for one flow observation: DBSCAN motion
/// clusters plus the static parts of each prior mask.
pub fn fresh_segments(
    flow: &FlowField,
    prior: &SegmentationHypothesis,
    cluster: &ClusterParams,
    static_min_area: usize,
) -> (SegmentationHypothesis, usize) {
    let (mut labels, k) = cluster_flow(flow, cluster, None);
    let statics = static_segments(flow, prior, cluster, static_min_area);
    let mut next = k as u32 + 1;
    for comp in &statics {
        for &i in comp {
            labels.data[i] = next;
        }
        next += 1;
    }
    let hyp = SegmentationHypothesis { labels, time_index: prior.time_index, next_id: next };
    (hyp, k + statics.len())
}

/// Executes `cmd`, observes the induced flow (with noise drawn from
/// `noise_seed`), reconciles the hypothesis and propagates it.
pub fn observe(
    scene: &SceneState,
    hyp: &SegmentationHypothesis,
    cmd: &NudgeCommand,
    perception: &Perception,
    noise_seed: u64,
) -> Result<Observation> {
    let after = apply_nudge(scene, cmd)?;
    let clean = ground_truth_flow(scene, &after)?;
    let flow = inject_noise(&clean, &NoiseSpec { rng_seed: noise_seed, ..perception.noise });
    let (fresh, fresh_count) = fresh_segments(&flow, hyp, &perception.cluster, perception.hypothesis.static_min_area);
    let refined =
        drop_small_masks(refine(hyp, &fresh, perception.hypothesis.tau_h), perception.hypothesis.static_min_area);
    let mean_iou = mean_iou_between(hyp, &refined);
    let next = warp_masks(&refined, &flow);
    Ok(Observation { scene: after, flow, fresh, fresh_count, refined, next, mean_iou })
}

/// Marches from `from` along `dir` (1 px steps, up to `max_travel`) until the
/// tool touches an object silhouette.
pub fn approach(scene: &SceneState, from: Vec2, dir: Vec2, max_travel: f64) -> Option<Vec2> {
    let mut t = 0.0;
    while t <= max_travel {
        let p = from + dir * t;
        if scene.topmost_at(p).is_some() {
            return Some(p);
        }
        t += 1.0;
    }
    None
}

pub(crate) fn pixel_center(i: usize, width: usize) -> Vec2 {
    Vec2::new((i % width) as f64 + 0.5, (i / width) as f64 + 0.5)
}

/// Mask pixels with a 4-neighbor outside the mask or on the frame edge.
pub fn boundary_pixels(labels: &Grid<u32>, id: u32, pixels: &[usize]) -> Vec<usize> {
    let (w, h) = (labels.width, labels.height);
    pixels
        .iter()
        .copied()
        .filter(|&i| {
            let (x, y) = (i % w, i / w);
            x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || labels.data[i - 1] != id
                || labels.data[i + 1] != id
                || labels.data[i - w] != id
                || labels.data[i + w] != id
        })
        .collect()
}

/// Verification nudge for one mask: contact at the boundary pixel farthest
/// from the mask centroid (ties by row, then column), pushing toward the
/// centroid.
pub fn verification_nudge(hyp: &SegmentationHypothesis, id: u32, magnitude: f64) -> Option<NudgeCommand> {
    let pixels = hyp.masks().remove(&id)?;
    let w = hyp.width();
    let centroid = pixels.iter().fold(Vec2::ZERO, |acc, &i| acc + pixel_center(i, w)) / pixels.len() as f64;
    let boundary = boundary_pixels(&hyp.labels, id, &pixels);
    // boundary is in raster order, so keeping the first maximum breaks ties by (y, x)
    let far = boundary.iter().copied().fold(None::<(usize, f64)>, |acc, i| {
        let d = pixel_center(i, w).distance(centroid);
        match acc {
            Some((_, bd)) if bd >= d => acc,
            _ => Some((i, d)),
        }
    })?;
    let point = pixel_center(far.0, w);
    let direction = (centroid - point).normalized()?;
    Some(NudgeCommand { point, direction, magnitude, twist: 0.0 })
}

/// Segments seen inside one mask's region: moving clusters and static
/// parts, both of at least the static minimum area.
pub fn rigid_segments(
    flow: &FlowField,
    hyp: &SegmentationHypothesis,
    id: u32,
    perception: &Perception,
) -> (usize, usize) {
    let region = hyp.mask(id);
    let min_area = perception.hypothesis.static_min_area;
    let (local, k) = cluster_flow(flow, &perception.cluster, Some(&region));
    let mut sizes = vec![0usize; k + 1];
    local.data.iter().for_each(|&l| sizes[l as usize] += 1);
    let moving = sizes[1..].iter().filter(|&&s| s >= min_area).count();
    let only_mask = SegmentationHypothesis::from_labels(
        Grid::from_vec(region.width, region.height, region.data.iter().map(|&b| b as u32).collect()),
        hyp.time_index,
    );
    let still = static_segments(flow, &only_mask, &perception.cluster, min_area).len();
    (moving, still)
}

/// One executed verification nudge.
#[derive(Debug, Clone)]
pub struct VerificationStep {
    pub mask_id: u32,
    pub split_found: bool,
    /// Other masks this nudge moved as a single rigid piece.
    pub co_verified: Vec<u32>,
    pub scene: SceneState,
    pub hyp: SegmentationHypothesis,
}

#[derive(Debug, Clone)]
pub struct VerificationOutcome {
    pub scene: SceneState,
    pub hyp: SegmentationHypothesis,
    pub split_found: bool,
    pub steps: Vec<VerificationStep>,
    /// Flow and refined hypothesis of the final executed nudge.
    pub last: Option<(FlowField, SegmentationHypothesis)>,
}

/// Verifies every mask not yet in `verified`: nudges it toward its centroid
/// and reclusters the flow inside the mask's own region. Two or more
/// segments there (moving clusters or static parts) mean the mask hides
/// several rigid bodies. Other masks that the same nudge moved as a single
/// rigid segment count as verified too. Masks created during the round are
/// verified in the same round. Stops early once `nudges_left` is spent.
#[allow(clippy::too_many_arguments)]
pub fn verification_round<R: Rng>(
    scene: &SceneState,
    hyp: &SegmentationHypothesis,
    perception: &Perception,
    magnitude: f64,
    twist_max: f64,
    twist_rng: &mut R,
    verified: &mut BTreeSet<u32>,
    nudges_left: usize,
    mut noise_seed: impl FnMut() -> u64,
) -> Result<VerificationOutcome> {
    let mut scene = scene.clone();
    let mut hyp = hyp.clone();
    let mut split_found = false;
    let mut steps = Vec::new();
    let mut attempted: BTreeSet<u32> = BTreeSet::new();
    let mut last = None;
    while steps.len() < nudges_left {
        let Some(id) = hyp.masks().keys().copied().find(|id| !verified.contains(id) && !attempted.contains(id)) else {
            break;
        };
        attempted.insert(id);
        let Some(mut cmd) = verification_nudge(&hyp, id, magnitude) else {
            verified.insert(id);
            continue;
        };
        let Some(contact) = approach(&scene, cmd.point, cmd.direction, 2.0 * magnitude) else {
            verified.insert(id);
            continue;
        };
        cmd.point = contact;
        cmd.twist = if twist_max > 0.0 { twist_rng.random_range(-twist_max..=twist_max) } else { 0.0 };
        let obs = observe(&scene, &hyp, &cmd, perception, noise_seed())?;
        let (moving, still) = rigid_segments(&obs.flow, &hyp, id, perception);
        let split = moving + still >= 2;
        if split {
            split_found = true;
            verified.remove(&id);
        } else {
            verified.insert(id);
        }
        // Any other mask this nudge moved as one piece has passed the same test.
        let mut co_verified = Vec::new();
        for other in hyp.masks().into_keys() {
            if other != id && !verified.contains(&other) && rigid_segments(&obs.flow, &hyp, other, perception) == (1, 0)
            {
                verified.insert(other);
                co_verified.push(other);
            }
        }
        scene = obs.scene;
        hyp = obs.next;
        last = Some((obs.flow, obs.refined));
        steps.push(VerificationStep {
            mask_id: id,
            split_found: split,
            co_verified,
            scene: scene.clone(),
            hyp: hyp.clone(),
        });
    }
    Ok(VerificationOutcome { scene, hyp, split_found, steps, last })
}
