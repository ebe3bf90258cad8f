//! Trial orchestration: active phase, nudge loop, verification and scoring,
//! plus run configuration and on-disk outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    aggregate, score_snapshot, scoring_labels, sweep_cells, sweep_csv, trials_csv, SnapshotMetrics, SummaryTable,
    SweepRow, TrialRecord,
};
use crate::flow::{synthesize_uncertainty, FlowField, NoiseSpec};
use crate::geometry::{convex_hull, polygon_centroid, Vec2};
use crate::hypothesis::{
    approach, check_termination, observe, pixel_center, verification_round, HypothesisParams, LoopState, Perception,
    Phase, SegmentationHypothesis,
};
use crate::motioncluster::ClusterParams;
use crate::policy::{cluster_stats, extract_blobs, first_nudge, next_nudge, select_cluster, FirstNudgeRule};
use crate::raster::{connected_components8, dilate3, write_pgm16, Grid, LabelImage, Mask};
use crate::rng::forked_rng;
use crate::scene::{fill_polygon, generate_scene, NudgeCommand, SceneConfig, SceneState};

fn default_thresh_k() -> f64 {
    1.0
}
fn default_min_area() -> usize {
    100
}
fn default_tau_kappa() -> f64 {
    3.0
}
fn default_nudge_magnitude() -> f64 {
    25.0
}
fn default_cam_shift() -> [f64; 2] {
    [8.0, 6.0]
}
fn default_true() -> bool {
    true
}
fn default_explore_min_area() -> usize {
    400
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    /// Blob threshold is mean(ρ) + thresh_k · std(ρ).
    #[serde(default = "default_thresh_k")]
    pub thresh_k: f64,
    /// Smallest blob kept (px).
    #[serde(default = "default_min_area")]
    pub min_area: usize,
    #[serde(default = "default_tau_kappa")]
    pub tau_kappa: f64,
    #[serde(default = "default_nudge_magnitude")]
    pub nudge_magnitude: f64,
    #[serde(default)]
    pub first_nudge: FirstNudgeRule,
    /// Virtual camera shift (px) for the uncertainty map.
    #[serde(default = "default_cam_shift")]
    pub cam_shift: [f64; 2],
    /// Probe parts of the pile that no mask covers before falling back to
    /// the condition-number policy.
    #[serde(default = "default_true")]
    pub explore_unmasked: bool,
    #[serde(default = "default_explore_min_area")]
    pub explore_min_area: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            thresh_k: default_thresh_k(),
            min_area: default_min_area(),
            tau_kappa: default_tau_kappa(),
            nudge_magnitude: default_nudge_magnitude(),
            first_nudge: FirstNudgeRule::default(),
            cam_shift: default_cam_shift(),
            explore_unmasked: true,
            explore_min_area: default_explore_min_area(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    /// Score each glued group as a single ground-truth object.
    #[serde(default = "default_true")]
    pub merge_glued: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { merge_glued: true }
    }
}

fn default_trials() -> usize {
    25
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default)]
    pub policy: PolicyParams,
    #[serde(default)]
    pub hypothesis: HypothesisParams,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub eval: EvalParams,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            cluster: ClusterParams::default(),
            policy: PolicyParams::default(),
            hypothesis: HypothesisParams::default(),
            noise: NoiseSpec::default(),
            eval: EvalParams::default(),
            trials: default_trials(),
            out_dir: default_out_dir(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.cluster.validate()?;
        self.hypothesis.validate()?;
        if self.trials < 1 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        let p = &self.policy;
        if p.min_area < 1
            || p.nudge_magnitude.is_nan()
            || p.nudge_magnitude <= 0.0
            || p.tau_kappa.is_nan()
            || p.tau_kappa < 1.0
        {
            return Err(Error::Config(format!("invalid policy parameters {p:?}")));
        }
        if self.noise.eps_m < 0.0 || self.noise.eps_a < 0.0 {
            return Err(Error::Config("noise bounds must be nonnegative".into()));
        }
        Ok(())
    }

    fn perception(&self) -> Perception {
        Perception { cluster: self.cluster, hypothesis: self.hypothesis, noise: self.noise }
    }
}

/// Why a nudge was executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NudgeKind {
    First,
    Probe,
    Policy,
    Verify,
}

/// Everything a trial produced besides its record.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    /// Hypothesis after every nudge, starting with the initial one.
    pub snapshots: Vec<LabelImage>,
    pub final_scene: Option<SceneState>,
    pub final_hyp: Option<SegmentationHypothesis>,
    /// `(mask id, split found)` for every verification nudge, followed by
    /// `(id, false)` for each mask that nudge co-verified.
    pub verification: Vec<(u32, bool)>,
    /// Whether the loop ended by verification rather than by budget.
    pub terminated: bool,
    /// Kind of every executed nudge, in order.
    pub nudges: Vec<NudgeKind>,
    /// Mean IoU between consecutive hypotheses during exploration.
    pub iou_history: Vec<f64>,
}

/// How far the tool travels looking for contact before giving up.
const APPROACH_FACTOR: f64 = 4.0;

struct Trial<'a> {
    cfg: &'a RunConfig,
    perception: Perception,
    scene: SceneState,
    state: LoopState,
    snaps: Vec<SnapshotMetrics>,
    images: Vec<LabelImage>,
    twist_rng: rand_chacha::ChaCha8Rng,
    noise_rng: rand_chacha::ChaCha8Rng,
    /// Filled hull of the pile as seen by the active phase.
    pile: Mask,
    pile_center: Vec2,
    exhausted: Mask,
    /// Flow and refined hypothesis of the latest nudge, for the κ policy.
    last: Option<(FlowField, SegmentationHypothesis)>,
    verification: Vec<(u32, bool)>,
    kinds: Vec<NudgeKind>,
    history: Vec<f64>,
}

impl Trial<'_> {
    fn record(&mut self) -> Result<()> {
        let gt = scoring_labels(&self.scene, self.cfg.eval.merge_glued);
        self.snaps.push(score_snapshot(&self.state.hyp, &gt));
        self.images.push(self.state.hyp.to_label_image()?);
        Ok(())
    }

    fn twist(&mut self) -> f64 {
        let t = self.cfg.scene.twist_max;
        if t > 0.0 {
            self.twist_rng.random_range(-t..=t)
        } else {
            0.0
        }
    }

    fn budget_left(&self) -> usize {
        self.cfg.hypothesis.budget - self.state.nudge_count
    }

    fn explore_nudge(&mut self, mut cmd: NudgeCommand, kind: NudgeKind) -> Result<()> {
        self.kinds.push(kind);
        cmd.twist = self.twist();
        let noise_seed = self.noise_rng.random();
        let obs = observe(&self.scene, &self.state.hyp, &cmd, &self.perception, noise_seed)?;
        self.scene = obs.scene;
        self.state.hyp = obs.next;
        self.last = Some((obs.flow, obs.refined));
        self.state.iou_history.push(obs.mean_iou);
        self.history.push(obs.mean_iou);
        self.state.nudge_count += 1;
        self.record()
    }

    /// Pile components not covered by any mask, largest first.
    fn unexplored(&self) -> Vec<Vec<usize>> {
        let covered = dilate3(&Grid::from_vec(
            self.state.hyp.width(),
            self.state.hyp.height(),
            self.state.hyp.labels.data.iter().map(|&l| l != 0).collect(),
        ));
        let free = Grid::from_vec(
            covered.width,
            covered.height,
            (0..covered.data.len()).map(|i| self.pile.data[i] && !covered.data[i] && !self.exhausted.data[i]).collect(),
        );
        let (labels, k) = connected_components8(&free);
        let mut comps = vec![Vec::new(); k];
        for (i, &l) in labels.data.iter().enumerate() {
            if l != 0 {
                comps[l as usize - 1].push(i);
            }
        }
        comps.retain(|c| c.len() >= self.cfg.policy.explore_min_area);
        comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
        comps
    }

    /// Nudge into the largest uncovered pile region that still shows an
    /// object: the object pixel nearest the region centroid, pushed away from
    /// the pile center. Regions without objects are retired on the way.
    fn probe_target(&mut self) -> Option<(Vec<usize>, NudgeCommand)> {
        let w = self.state.hyp.width();
        while let Some(comp) = self.unexplored().into_iter().next() {
            let c = comp.iter().fold(Vec2::ZERO, |acc, &i| acc + pixel_center(i, w)) / comp.len() as f64;
            let mut order: Vec<(f64, usize)> = comp.iter().map(|&i| (pixel_center(i, w).distance(c), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let target = order.iter().map(|&(_, i)| i).find(|&i| self.scene.topmost_at(pixel_center(i, w)).is_some());
            let Some(i) = target else {
                comp.iter().for_each(|&i| self.exhausted.data[i] = true);
                continue;
            };
            let point = pixel_center(i, w);
            let direction = (c - self.pile_center).normalized().unwrap_or(Vec2::new(1.0, 0.0));
            let cmd = NudgeCommand { point, direction, magnitude: self.cfg.policy.nudge_magnitude, twist: 0.0 };
            return Some((comp, cmd));
        }
        None
    }

    /// Executes a probe; a region whose probe revealed no new mask is
    /// retired.
    fn probe(&mut self, comp: &[usize], cmd: NudgeCommand) -> Result<()> {
        let before = self.state.hyp.mask_count();
        self.explore_nudge(cmd, NudgeKind::Probe)?;
        if self.state.hyp.mask_count() <= before {
            comp.iter().for_each(|&i| self.exhausted.data[i] = true);
        }
        Ok(())
    }

    /// Condition-number policy with contact fallback: if the tool finds
    /// nothing along the chosen approach, the next cluster in κ order is
    /// tried.
    fn policy_nudge(&mut self) -> Result<()> {
        let present: BTreeSet<u32> = self.state.hyp.masks().keys().copied().collect();
        let (flow, refined) = self.last.as_ref().expect("policy runs after a first nudge");
        let (mut stats, _) = cluster_stats(flow, refined);
        stats.retain(|s| present.contains(&s.mask_id));
        let magnitude = self.cfg.policy.nudge_magnitude;
        while !stats.is_empty() {
            let mut cmd = next_nudge(&stats, &self.state.hyp, self.cfg.policy.tau_kappa, magnitude);
            if let Some(p) = approach(&self.scene, cmd.point, cmd.direction, APPROACH_FACTOR * magnitude) {
                cmd.point = p;
                return self.explore_nudge(cmd, NudgeKind::Policy);
            }
            let kappas: Vec<f64> = stats.iter().map(|s| s.kappa).collect();
            stats.remove(select_cluster(&kappas, self.cfg.policy.tau_kappa));
        }
        Err(Error::NudgeMissed { x: f64::NAN, y: f64::NAN })
    }
}

fn pile_region(blobs: &[crate::policy::Blob], w: usize, h: usize) -> (Mask, Vec2) {
    let points: Vec<Vec2> = blobs.iter().flat_map(|b| b.pixels.iter().map(|&i| pixel_center(i, w))).collect();
    let hull = convex_hull(&points);
    let mut img: LabelImage = Grid::new(w, h, 0);
    fill_polygon(&mut img, &hull, 1);
    let mask = Grid::from_vec(w, h, img.data.iter().map(|&v| v != 0).collect());
    (mask, polygon_centroid(&hull))
}

fn noise_stream_seed(trial_seed: u64, noise: &NoiseSpec) -> u64 {
    trial_seed ^ noise.rng_seed.rotate_left(29)
}

/// Runs one complete trial. Errors inside the trial become a failed record.
pub fn run_trial(cfg: &RunConfig, seed: u64) -> TrialOutcome {
    let scene = match generate_scene(&cfg.scene, seed) {
        Ok(s) => s,
        Err(e) => return failed_outcome(seed, 0, &e),
    };
    let n = scene.objects.len();
    match run_loop(cfg, seed, scene) {
        Ok(o) => o,
        Err(e) => failed_outcome(seed, n, &e),
    }
}

fn failed_outcome(seed: u64, n: usize, e: &Error) -> TrialOutcome {
    TrialOutcome {
        record: TrialRecord::failed(seed, n, e.code()),
        snapshots: Vec::new(),
        final_scene: None,
        final_hyp: None,
        verification: Vec::new(),
        terminated: false,
        nudges: Vec::new(),
        iou_history: Vec::new(),
    }
}

fn run_loop(cfg: &RunConfig, seed: u64, scene: SceneState) -> Result<TrialOutcome> {
    let (w, h) = scene.image_size;
    let n_objects = scene.objects.len();
    let mut t = Trial {
        cfg,
        perception: cfg.perception(),
        scene,
        state: LoopState::new(SegmentationHypothesis::empty(w, h)),
        snaps: Vec::new(),
        images: Vec::new(),
        twist_rng: forked_rng(seed, "twist"),
        noise_rng: forked_rng(noise_stream_seed(seed, &cfg.noise), "noise-seeds"),
        pile: Grid::new(w, h, false),
        pile_center: Vec2::ZERO,
        exhausted: Grid::new(w, h, false),
        last: None,
        verification: Vec::new(),
        kinds: Vec::new(),
        history: Vec::new(),
    };
    t.record()?;
    let mut terminated = false;

    if cfg.hypothesis.budget > 0 {
        let magnitude = cfg.policy.nudge_magnitude;
        let shift = Vec2::new(cfg.policy.cam_shift[0], cfg.policy.cam_shift[1]);
        let rho = synthesize_uncertainty(&t.scene, shift, seed);
        let blobs = extract_blobs(&rho, cfg.policy.thresh_k, cfg.policy.min_area)?;
        (t.pile, t.pile_center) = pile_region(&blobs, w, h);
        let mut cmd = first_nudge(&blobs, cfg.policy.first_nudge, magnitude)?;
        // the tool may cross gaps in the pile, so allow travel across the whole frame
        let reach = (w + h) as f64;
        cmd.point = approach(&t.scene, cmd.point, cmd.direction, reach)
            .ok_or(Error::NudgeMissed { x: cmd.point.x, y: cmd.point.y })?;
        t.explore_nudge(cmd, NudgeKind::First)?;

        let mut verified: BTreeSet<u32> = BTreeSet::new();
        while t.budget_left() > 0 {
            match t.state.phase {
                Phase::Exploring => {
                    let target = if cfg.policy.explore_unmasked { t.probe_target() } else { None };
                    let stable =
                        check_termination(&t.state.iou_history, cfg.hypothesis.tau_stable, cfg.hypothesis.window_n);
                    match target {
                        None if stable => t.state.transition(Phase::Verifying),
                        None => t.policy_nudge()?,
                        Some((comp, cmd)) => t.probe(&comp, cmd)?,
                    }
                }
                Phase::Verifying => {
                    let left = t.budget_left();
                    let noise_rng = &mut t.noise_rng;
                    let outcome = verification_round(
                        &t.scene,
                        &t.state.hyp,
                        &t.perception,
                        magnitude,
                        cfg.scene.twist_max,
                        &mut t.twist_rng,
                        &mut verified,
                        left,
                        || noise_rng.random(),
                    )?;
                    let executed = !outcome.steps.is_empty();
                    for step in outcome.steps {
                        t.verification.push((step.mask_id, step.split_found));
                        t.verification.extend(step.co_verified.iter().map(|&id| (id, false)));
                        t.kinds.push(NudgeKind::Verify);
                        t.scene = step.scene;
                        t.state.hyp = step.hyp;
                        t.state.nudge_count += 1;
                        t.record()?;
                    }
                    if outcome.last.is_some() {
                        t.last = outcome.last;
                    }
                    if outcome.split_found {
                        t.state.transition(Phase::Exploring);
                    } else if !executed || t.state.hyp.masks().keys().all(|id| verified.contains(id)) {
                        t.state.transition(Phase::Done);
                        terminated = true;
                    }
                }
                Phase::Done => break,
            }
        }
    }

    let nudges = t.state.nudge_count;
    Ok(TrialOutcome {
        record: TrialRecord::from_snapshots(seed, n_objects, &t.snaps, nudges),
        snapshots: t.images,
        final_scene: Some(t.scene),
        final_hyp: Some(t.state.hyp),
        verification: t.verification,
        terminated,
        nudges: t.kinds,
        iou_history: t.history,
    })
}

/// Trial `t` of a batch uses seed `base_seed + t`.
pub fn trial_seeds(base_seed: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|t| base_seed.wrapping_add(t)).collect()
}

/// Runs trials in parallel; results come back in seed order.
pub fn run_batch(cfg: &RunConfig, base_seed: u64, trials: usize) -> Vec<TrialOutcome> {
    trial_seeds(base_seed, trials).par_iter().map(|&s| run_trial(cfg, s)).collect()
}

pub fn summary_csv(s: &SummaryTable) -> String {
    format!(
        "trials,failures,mean_iou,dr50,dr75,iou_s,mean_nudges\n{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        s.trials, s.failures, s.mean_iou, s.dr50, s.dr75, s.iou_s, s.mean_nudges
    )
}

/// Writes `trials.csv`, `summary.csv` and, when asked, one label PGM per
/// trial and nudge named `hyp_<trial>_<nudge>.pgm`.
pub fn write_run(out_dir: &Path, outcomes: &[TrialOutcome], snapshots: bool) -> Result<SummaryTable> {
    fs::create_dir_all(out_dir)?;
    let records: Vec<TrialRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let summary = aggregate(&records);
    fs::write(out_dir.join("trials.csv"), trials_csv(&records))?;
    fs::write(out_dir.join("summary.csv"), summary_csv(&summary))?;
    if snapshots {
        for (t, o) in outcomes.iter().enumerate() {
            for (k, img) in o.snapshots.iter().enumerate() {
                write_pgm16(out_dir.join(format!("hyp_{t}_{k}.pgm")), img)?;
            }
        }
    }
    Ok(summary)
}

/// Noise study: every cell runs the same trial seeds with its own noise
/// bounds (magnitude in percent, angle in degrees).
pub fn run_sweep(cfg: &RunConfig, eps_m: &[f64], eps_a: &[f64], base_seed: u64, trials: usize) -> Vec<SweepRow> {
    sweep_cells(eps_m, eps_a)
        .into_iter()
        .map(|(m, a)| {
            let mut cell = cfg.clone();
            cell.noise.eps_m = m;
            cell.noise.eps_a = a;
            let records: Vec<TrialRecord> = run_batch(&cell, base_seed, trials).into_iter().map(|o| o.record).collect();
            SweepRow { eps_m: m, eps_a: a, summary: aggregate(&records) }
        })
        .collect()
}

pub fn write_sweep(out_dir: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("sweep.csv"), sweep_csv(rows))?;
    Ok(())
}
