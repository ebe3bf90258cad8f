//! Synthetic tabletop clutter: randomized piles of rigid polygons,
//! quasi-static push dynamics and ground-truth label rendering.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    convex_hull, convex_mtv, is_simple_polygon, point_in_polygon, polygon_centroid, sweep_interval, triangulate, Pose,
    Vec2,
};
use crate::raster::{Grid, LabelImage};
use crate::rng::forked_rng;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Vec2 {
        (self.min + self.max) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidObject {
    pub id: u16,
    /// Body-frame polygon, counter-clockwise.
    pub vertices: Vec<Vec2>,
    pub pose: Pose,
    pub glue_group: Option<u32>,
    /// Larger ranks occlude smaller ones.
    pub z_rank: i32,
    triangles: Vec<[Vec2; 3]>,
}

impl RigidObject {
    /// Panics on a polygon with fewer than three vertices or self-crossings.
    pub fn new(id: u16, vertices: Vec<Vec2>, pose: Pose) -> Self {
        assert!(vertices.len() >= 3, "object needs at least 3 vertices");
        assert!(is_simple_polygon(&vertices), "object polygon must be simple");
        let triangles = triangulate(&vertices);
        RigidObject { id, vertices, pose, glue_group: None, z_rank: 0, triangles }
    }

    pub fn with_z_rank(mut self, z: i32) -> Self {
        self.z_rank = z;
        self
    }

    pub fn with_glue(mut self, group: u32) -> Self {
        self.glue_group = Some(group);
        self
    }

    pub fn world_polygon(&self) -> Vec<Vec2> {
        self.vertices.iter().map(|&v| self.pose.apply(v)).collect()
    }

    fn world_triangles(&self) -> Vec<[Vec2; 3]> {
        self.triangles.iter().map(|t| [self.pose.apply(t[0]), self.pose.apply(t[1]), self.pose.apply(t[2])]).collect()
    }

    /// World-frame area centroid.
    pub fn centroid(&self) -> Vec2 {
        self.pose.apply(polygon_centroid(&self.vertices))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        point_in_polygon(self.pose.inverse().apply(p), &self.vertices)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub objects: Vec<RigidObject>,
    pub image_size: (usize, usize),
    pub table_bounds: Rect,
    pub rng_seed: u64,
}

/// A single poke: the tool contacts `point` and displaces the touched body by
/// `magnitude · direction` while rotating it by `twist` about the contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NudgeCommand {
    pub point: Vec2,
    pub direction: Vec2,
    pub magnitude: f64,
    pub twist: f64,
}

impl NudgeCommand {
    pub fn validate(&self) -> Result<()> {
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("nudge direction must be unit, got norm {}", self.direction.norm())));
        }
        if self.magnitude.is_nan() || self.magnitude <= 0.0 {
            return Err(Error::Config(format!("nudge magnitude must be positive, got {}", self.magnitude)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeSet {
    Square,
    Convex,
    Concave,
    Mixed,
}

fn default_image_w() -> usize {
    800
}
fn default_image_h() -> usize {
    600
}
fn default_table_w() -> f64 {
    760.0
}
fn default_table_h() -> f64 {
    560.0
}
fn default_twist_max() -> f64 {
    0.15
}
fn default_radius_min() -> f64 {
    30.0
}
fn default_radius_max() -> f64 {
    90.0
}
fn default_gap_max() -> f64 {
    2.0
}
fn default_shape_set() -> ShapeSet {
    ShapeSet::Mixed
}
fn default_n_min() -> usize {
    5
}
fn default_n_max() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_shape_set")]
    pub shape_set: ShapeSet,
    #[serde(default = "default_table_w")]
    pub table_w: f64,
    #[serde(default = "default_table_h")]
    pub table_h: f64,
    /// Per-nudge twist is drawn from [-twist_max, twist_max] rad.
    #[serde(default = "default_twist_max")]
    pub twist_max: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_image_w")]
    pub image_w: usize,
    #[serde(default = "default_image_h")]
    pub image_h: usize,
    #[serde(default = "default_radius_min")]
    pub radius_min: f64,
    #[serde(default = "default_radius_max")]
    pub radius_max: f64,
    /// Number of permanently glued object pairs among the N objects.
    #[serde(default)]
    pub glued_pairs: usize,
    /// Placement clearance between neighbors is drawn from [0, gap_max] px.
    #[serde(default = "default_gap_max")]
    pub gap_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_min: default_n_min(),
            n_max: default_n_max(),
            shape_set: default_shape_set(),
            table_w: default_table_w(),
            table_h: default_table_h(),
            twist_max: default_twist_max(),
            seed: 0,
            image_w: default_image_w(),
            image_h: default_image_h(),
            radius_min: default_radius_min(),
            radius_max: default_radius_max(),
            glued_pairs: 0,
            gap_max: default_gap_max(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::Config(format!("empty object range [{}, {}]", self.n_min, self.n_max)));
        }
        if 2 * self.glued_pairs > self.n_min {
            return Err(Error::Config("glued pairs exceed the minimum object count".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config("bad radius range".into()));
        }
        if self.twist_max < 0.0 || self.gap_max < 0.0 {
            return Err(Error::Config("twist_max and gap_max must be nonnegative".into()));
        }
        if self.image_w == 0 || self.image_h == 0 || self.table_w <= 0.0 || self.table_h <= 0.0 {
            return Err(Error::Config("image and table sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn table_bounds(&self) -> Rect {
        let c = Vec2::new(self.image_w as f64 / 2.0, self.image_h as f64 / 2.0);
        let half = Vec2::new(self.table_w / 2.0, self.table_h / 2.0);
        Rect { min: c - half, max: c + half }
    }
}

fn recenter(mut verts: Vec<Vec2>) -> Vec<Vec2> {
    let c = polygon_centroid(&verts);
    verts.iter_mut().for_each(|v| *v -= c);
    verts
}

fn random_shape<R: Rng>(rng: &mut R, set: ShapeSet, r_min: f64, r_max: f64) -> Vec<Vec2> {
    let set = match set {
        ShapeSet::Mixed => {
            if rng.random_bool(0.5) {
                ShapeSet::Convex
            } else {
                ShapeSet::Concave
            }
        }
        s => s,
    };
    let radius = rng.random_range(r_min..=r_max);
    loop {
        let verts = match set {
            ShapeSet::Square => {
                let h = radius / 2f64.sqrt();
                vec![Vec2::new(-h, -h), Vec2::new(h, -h), Vec2::new(h, h), Vec2::new(-h, h)]
            }
            ShapeSet::Convex => {
                let n = rng.random_range(3..=12usize);
                let step = 2.0 * PI / n as f64;
                let stretch = rng.random_range(0.65..=1.0);
                let pts: Vec<Vec2> = (0..n)
                    .map(|i| {
                        let a = i as f64 * step + rng.random_range(-0.3..=0.3) * step;
                        let r = radius * rng.random_range(0.85..=1.0);
                        Vec2::new(r * a.cos(), stretch * r * a.sin())
                    })
                    .collect();
                convex_hull(&pts)
            }
            ShapeSet::Concave => {
                let n = rng.random_range(3..=6usize) * 2;
                let step = 2.0 * PI / n as f64;
                let inner = rng.random_range(0.45..=0.7);
                (0..n)
                    .map(|i| {
                        let a = i as f64 * step + rng.random_range(-0.2..=0.2) * step;
                        let r = if i % 2 == 0 { radius } else { radius * inner };
                        Vec2::new(r * a.cos(), r * a.sin())
                    })
                    .collect()
            }
            ShapeSet::Mixed => unreachable!(),
        };
        if verts.len() >= 3 && is_simple_polygon(&verts) {
            return recenter(verts);
        }
    }
}

/// Bodies are glue groups; an unglued object is its own body.
fn body_of(objects: &[RigidObject], idx: usize) -> Vec<usize> {
    match objects[idx].glue_group {
        None => vec![idx],
        Some(g) => (0..objects.len()).filter(|&j| objects[j].glue_group == Some(g)).collect(),
    }
}

fn bodies(objects: &[RigidObject]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; objects.len()];
    let mut out = Vec::new();
    for i in 0..objects.len() {
        if !seen[i] {
            let b = body_of(objects, i);
            b.iter().for_each(|&j| seen[j] = true);
            out.push(b);
        }
    }
    out
}

fn body_triangles(objects: &[RigidObject], body: &[usize]) -> Vec<[Vec2; 3]> {
    body.iter().flat_map(|&i| objects[i].world_triangles()).collect()
}

/// Open intervals of travel `t` along `dir` during which `moving` overlaps
/// `fixed`.
fn sweep_intervals(fixed: &[[Vec2; 3]], moving: &[[Vec2; 3]], dir: Vec2) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for f in fixed {
        for m in moving {
            if let Some(iv) = sweep_interval(f, m, dir) {
                out.push(iv);
            }
        }
    }
    out
}

/// Smallest travel `t ≥ 0` along `dir` that clears every overlap interval.
fn clearing_distance(intervals: &[(f64, f64)]) -> f64 {
    let mut t = 0.0f64;
    loop {
        let blocking = intervals.iter().filter(|&&(lo, hi)| lo < t + 1e-9 && hi > t + 1e-9).map(|&(_, hi)| hi);
        match blocking.fold(None, |acc: Option<f64>, hi| Some(acc.map_or(hi, |a| a.max(hi)))) {
            Some(hi) => t = hi,
            None => return t,
        }
    }
}

/// Penetration depth between two bodies: the shortest clearing travel over a
/// fan of candidate directions (0 when disjoint).
fn penetration(a: &[[Vec2; 3]], b: &[[Vec2; 3]]) -> f64 {
    let overlapping = a.iter().any(|ta| b.iter().any(|tb| convex_mtv(ta, tb).is_some()));
    if !overlapping {
        return 0.0;
    }
    (0..32)
        .map(|k| {
            let ang = k as f64 * PI / 16.0;
            let dir = Vec2::new(ang.cos(), ang.sin());
            clearing_distance(&sweep_intervals(a, b, dir))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Maximum pairwise interpenetration (px) between distinct bodies.
pub fn max_interpenetration(scene: &SceneState) -> f64 {
    let bs = bodies(&scene.objects);
    let tris: Vec<_> = bs.iter().map(|b| body_triangles(&scene.objects, b)).collect();
    let mut worst = 0.0f64;
    for i in 0..bs.len() {
        for j in i + 1..bs.len() {
            worst = worst.max(penetration(&tris[i], &tris[j]));
        }
    }
    worst
}

fn translate_body(objects: &mut [RigidObject], body: &[usize], shift: Vec2) {
    for &i in body {
        objects[i].pose.x += shift.x;
        objects[i].pose.y += shift.y;
    }
}

/// Shifts a body so every member centroid lies inside the table.
fn clamp_body(objects: &mut [RigidObject], body: &[usize], table: &Rect) {
    let mut shift = Vec2::ZERO;
    for &i in body {
        let c = objects[i].centroid();
        if c.x < table.min.x {
            shift.x = shift.x.max(table.min.x - c.x);
        }
        if c.x > table.max.x {
            shift.x = shift.x.min(table.max.x - c.x);
        }
        if c.y < table.min.y {
            shift.y = shift.y.max(table.min.y - c.y);
        }
        if c.y > table.max.y {
            shift.y = shift.y.min(table.max.y - c.y);
        }
    }
    if shift != Vec2::ZERO {
        translate_body(objects, body, shift);
    }
}

fn polygon_bbox(poly: &[Vec2]) -> (Vec2, Vec2) {
    poly.iter().fold(
        (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
        |(lo, hi), p| (Vec2::new(lo.x.min(p.x), lo.y.min(p.y)), Vec2::new(hi.x.max(p.x), hi.y.max(p.y))),
    )
}

/// Generates a contiguous random pile. Objects are dropped in from random
/// bearings and slid toward the table center until they touch the pile, so
/// every object borders at least one other; deterministic given
/// `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneState> {
    config.validate()?;
    let mut rng = forked_rng(seed, "scene");
    let n = rng.random_range(config.n_min..=config.n_max);
    let table = config.table_bounds();
    let (w, h) = (config.image_w as f64, config.image_h as f64);
    let center = table.center();
    let mut objects: Vec<RigidObject> = Vec::with_capacity(n);
    const RETRIES: usize = 200;

    for k in 0..n {
        let id = (k + 1) as u16;
        // Objects 2j and 2j+1 form glued pair j.
        let glue = (k < 2 * config.glued_pairs).then_some((k / 2) as u32);
        let partner = (glue.is_some() && k % 2 == 1).then(|| k - 1);
        let mut placed = None;
        for _ in 0..RETRIES {
            let verts = random_shape(&mut rng, config.shape_set, config.radius_min, config.radius_max);
            let theta = rng.random_range(0.0..2.0 * PI);
            let mut obj = RigidObject::new(id, verts, Pose::new(center.x, center.y, theta));
            if let Some(g) = glue {
                obj = obj.with_glue(g);
            }
            if objects.is_empty() {
                let jitter = Vec2::new(rng.random_range(-20.0..=20.0), rng.random_range(-20.0..=20.0));
                obj.pose.x += jitter.x;
                obj.pose.y += jitter.y;
            } else {
                let bearing = rng.random_range(0.0..2.0 * PI);
                let u = Vec2::new(bearing.cos(), bearing.sin());
                let far = 4.0 * (w + h);
                let target = match partner {
                    Some(p) => objects[p].centroid(),
                    None => center,
                };
                obj.pose.x = target.x + u.x * far;
                obj.pose.y = target.y + u.y * far;
                let gap = if partner.is_some() { 0.0 } else { rng.random_range(0.0..=config.gap_max) };
                let moving = obj.world_triangles();
                let obstacles: Vec<usize> = match partner {
                    Some(p) => vec![p],
                    None => (0..objects.len()).collect(),
                };
                let fixed: Vec<[Vec2; 3]> = obstacles.iter().flat_map(|&i| objects[i].world_triangles()).collect();
                let first_contact = sweep_intervals(&fixed, &moving, -u)
                    .into_iter()
                    .filter(|&(_, hi)| hi > 0.0)
                    .map(|(lo, _)| lo)
                    .fold(f64::INFINITY, f64::min);
                if !first_contact.is_finite() {
                    continue;
                }
                let travel = (first_contact - gap).max(0.0);
                obj.pose.x -= u.x * travel;
                obj.pose.y -= u.y * travel;
                if partner.is_some() {
                    // the partner slide ignores the rest of the pile
                    let me = obj.world_triangles();
                    let clash = objects
                        .iter()
                        .enumerate()
                        .any(|(i, o)| Some(i) != partner && penetration(&o.world_triangles(), &me) > 1e-6);
                    if clash {
                        continue;
                    }
                }
            }
            let (lo, hi) = polygon_bbox(&obj.world_polygon());
            let in_frame = lo.x >= 1.0 && lo.y >= 1.0 && hi.x <= w - 1.0 && hi.y <= h - 1.0;
            if in_frame && table.contains(obj.centroid()) {
                placed = Some(obj);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::CannotPackPile(format!(
                    "object {} of {} did not fit after {RETRIES} attempts",
                    k + 1,
                    n
                )))
            }
        }
    }

    let mut ranks: Vec<i32> = (1..=n as i32).collect();
    ranks.shuffle(&mut rng);
    for (o, r) in objects.iter_mut().zip(ranks) {
        o.z_rank = r;
    }
    Ok(SceneState { objects, image_size: (config.image_w, config.image_h), table_bounds: table, rng_seed: seed })
}

impl SceneState {
    pub fn new(objects: Vec<RigidObject>, image_size: (usize, usize), table_bounds: Rect) -> Self {
        SceneState { objects, image_size, table_bounds, rng_seed: 0 }
    }

    pub fn object(&self, id: u16) -> Option<&RigidObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Index of the topmost object whose silhouette contains `p`.
    pub fn topmost_at(&self, p: Vec2) -> Option<usize> {
        self.objects.iter().enumerate().filter(|(_, o)| o.contains(p)).max_by_key(|(_, o)| o.z_rank).map(|(i, _)| i)
    }
}

const MAX_PUSHES: usize = 4000;

/// Executes a nudge quasi-statically: the contacted body (topmost silhouette
/// at the contact point, plus its glue group) follows the command exactly;
/// every body it overlaps is slid out along the contact normal, cascading
/// through the pile until no interpenetration remains.
pub fn apply_nudge(scene: &SceneState, cmd: &NudgeCommand) -> Result<SceneState> {
    cmd.validate()?;
    let hit = scene.topmost_at(cmd.point).ok_or(Error::NudgeMissed { x: cmd.point.x, y: cmd.point.y })?;
    let mut next = scene.clone();
    let objects = &mut next.objects;
    let contacted = body_of(objects, hit);
    for &i in &contacted {
        objects[i].pose = objects[i].pose.pushed(cmd.point, cmd.twist, cmd.direction * cmd.magnitude);
    }
    clamp_body(objects, &contacted, &scene.table_bounds);

    let all = bodies(objects);
    let contacted_key = contacted[0];
    let key_of = |b: &Vec<usize>| b[0];
    let mut queue: VecDeque<usize> = VecDeque::new();
    let body_index = all.iter().position(|b| key_of(b) == contacted_key).expect("contacted body exists");
    queue.push_back(body_index);
    let mut pushes = 0usize;
    while let Some(m) = queue.pop_front() {
        if pushes > MAX_PUSHES {
            break;
        }
        for b in 0..all.len() {
            if b == m {
                continue;
            }
            let tm = body_triangles(objects, &all[m]);
            let tb = body_triangles(objects, &all[b]);
            // The contacted body is driven by the tool and never yields.
            let (pusher, pushed, tp, tq) = if b == body_index { (b, m, tb, tm) } else { (m, b, tm, tb) };
            let mut normal = Vec2::ZERO;
            for a in &tp {
                for q in &tq {
                    if let Some(v) = convex_mtv(a, q) {
                        normal += v;
                    }
                }
            }
            if normal == Vec2::ZERO {
                continue;
            }
            let centroid_of = |body: &[usize], objs: &[RigidObject]| {
                body.iter().fold(Vec2::ZERO, |acc, &i| acc + objs[i].centroid()) / body.len() as f64
            };
            let dir = normal
                .normalized()
                .or_else(|| (centroid_of(&all[pushed], objects) - centroid_of(&all[pusher], objects)).normalized())
                .unwrap_or(cmd.direction);
            let travel = clearing_distance(&sweep_intervals(&tp, &tq, dir));
            if travel <= 1e-9 {
                continue;
            }
            translate_body(objects, &all[pushed], dir * (travel + 1e-6));
            clamp_body(objects, &all[pushed], &scene.table_bounds);
            pushes += 1;
            if !queue.contains(&pushed) {
                queue.push_back(pushed);
            }
            if pushed == m {
                // m moved itself; re-examine it from scratch later
                break;
            }
        }
    }
    Ok(next)
}

/// Rasterizes ground-truth instance labels (pixel centers at half-integer
/// coordinates); higher `z_rank` wins where silhouettes overlap.
pub fn render_labels(scene: &SceneState) -> LabelImage {
    let (w, h) = scene.image_size;
    let mut img = Grid::new(w, h, 0u16);
    let mut order: Vec<&RigidObject> = scene.objects.iter().collect();
    order.sort_by_key(|o| o.z_rank);
    for o in order {
        fill_polygon(&mut img, &o.world_polygon(), o.id);
    }
    img
}

/// Scanline fill of a simple polygon with the even-odd rule.
pub fn fill_polygon(img: &mut LabelImage, poly: &[Vec2], label: u16) {
    let (lo, hi) = polygon_bbox(poly);
    let (w, h) = (img.width as i64, img.height as i64);
    let y0 = ((lo.y - 0.5).floor() as i64).max(0);
    let y1 = ((hi.y - 0.5).ceil() as i64).min(h - 1);
    let n = poly.len();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for y in y0..=y1 {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a.y > yc) != (b.y > yc) {
                xs.push(a.x + (yc - a.y) / (b.y - a.y) * (b.x - a.x));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // pixel x is inside when its center x + 0.5 lies in [pair0, pair1)
            let xa = ((pair[0] - 0.5).ceil() as i64).max(0);
            let xb = ((pair[1] - 0.5).ceil() as i64 - 1).min(w - 1);
            for x in xa..=xb {
                img.data[(y * w + x) as usize] = label;
            }
        }
    }
}
