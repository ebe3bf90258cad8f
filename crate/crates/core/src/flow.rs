//! Dense flow between scene states, the synthetic uncertainty map, flow
//! noise injection and Middlebury `.flo` I/O.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::raster::{gaussian_blur, Grid, LabelImage};
use crate::rng::forked_rng;
use crate::scene::{render_labels, RigidObject, SceneState};

/// Per-pixel displacement between two frames, sampled at pixel centers of
/// the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// False where the correspondence is occluded or leaves the frame.
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        FlowField { width, height, u: vec![0.0; n], v: vec![0.0; n], valid: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn at(&self, i: usize) -> Vec2 {
        Vec2::new(self.u[i], self.v[i])
    }

    /// Magnitude ℳ = √(u²+v²).
    pub fn magnitude(&self, i: usize) -> f64 {
        self.u[i].hypot(self.v[i])
    }

    /// Direction 𝒜 = atan2(v, u) wrapped to [0, 2π).
    pub fn angle(&self, i: usize) -> f64 {
        wrap_angle(self.v[i].atan2(self.u[i]))
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Displacement of world point `p` carried rigidly by `before → after`.
pub fn rigid_point_flow(before: &RigidObject, after: &RigidObject, p: Vec2) -> Vec2 {
    after.pose.apply(before.pose.inverse().apply(p)) - p
}

fn pixel_center(i: usize, width: usize) -> Vec2 {
    Vec2::new((i % width) as f64 + 0.5, (i / width) as f64 + 0.5)
}

/// Ground-truth flow from `before` to `after`. Background pixels get zero
/// flow; a pixel is invalid when its correspondence is hidden by a
/// higher-ranked object in `after`, leaves the frame, or (for background)
/// is covered in `after`.
pub fn ground_truth_flow(before: &SceneState, after: &SceneState) -> Result<FlowField> {
    if before.image_size != after.image_size || before.objects.len() != after.objects.len() {
        return Err(Error::TopologyChanged);
    }
    let pairs: Vec<(&RigidObject, &RigidObject)> = before
        .objects
        .iter()
        .map(|b| after.object(b.id).map(|a| (b, a)).ok_or(Error::TopologyChanged))
        .collect::<Result<_>>()?;
    let (w, h) = before.image_size;
    let labels0 = render_labels(before);
    let labels1 = render_labels(after);
    let mut flow = FlowField::zeros(w, h);
    let slot: std::collections::HashMap<u16, usize> = pairs.iter().enumerate().map(|(k, (b, _))| (b.id, k)).collect();
    for i in 0..w * h {
        let id = labels0.data[i];
        if id == 0 {
            flow.valid[i] = labels1.data[i] == 0;
            continue;
        }
        let (b, a) = pairs[slot[&id]];
        let p = pixel_center(i, w);
        let d = rigid_point_flow(b, a, p);
        flow.u[i] = d.x;
        flow.v[i] = d.y;
        let q = p + d;
        let in_frame = q.x >= 0.0 && q.y >= 0.0 && q.x < w as f64 && q.y < h as f64;
        let covered = after.objects.iter().any(|o| o.z_rank > a.z_rank && o.id != a.id && o.contains(q));
        flow.valid[i] = in_frame && !covered;
    }
    Ok(flow)
}

/// Per-pixel flow uncertainty ρ ≥ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub rho: Grid<f64>,
}

impl UncertaintyMap {
    pub fn width(&self) -> usize {
        self.rho.width
    }

    pub fn height(&self) -> usize {
        self.rho.height
    }

    /// 16-bit dump: ρ·10000, clamped to the u16 range.
    pub fn to_label_image(&self) -> LabelImage {
        let data = self.rho.data.iter().map(|&r| (r * 10000.0).round().clamp(0.0, 65535.0) as u16).collect();
        Grid::from_vec(self.rho.width, self.rho.height, data)
    }
}

/// Parallax factor of the table plane relative to the raised pile.
const BACKGROUND_PARALLAX: f64 = 0.25;
const UNCERTAINTY_BLUR_SIGMA: f64 = 3.0;
const UNCERTAINTY_NOISE_FLOOR: f64 = 0.05;

fn label_at(img: &LabelImage, p: Vec2) -> Option<u16> {
    img.get_signed(p.x.floor() as i64, p.y.floor() as i64).copied()
}

/// Simulates a small camera translation over the pile: objects shift by
/// `cam_shift`, the table by a quarter of it. ρ is the blurred indicator of
/// pixels that get occluded or disoccluded by that motion, plus a uniform
/// noise floor in [0, 0.05].
pub fn synthesize_uncertainty(before: &SceneState, cam_shift: Vec2, seed: u64) -> UncertaintyMap {
    let (w, h) = before.image_size;
    let labels0 = render_labels(before);
    let mut moved = before.clone();
    for o in &mut moved.objects {
        o.pose.x += cam_shift.x;
        o.pose.y += cam_shift.y;
    }
    let labels1 = render_labels(&moved);
    let bg_shift = cam_shift * BACKGROUND_PARALLAX;
    let mut indicator = Grid::new(w, h, 0.0f64);
    for i in 0..w * h {
        let p = pixel_center(i, w);
        let k0 = labels0.data[i];
        let occluded = if k0 == 0 {
            label_at(&labels1, p + bg_shift).is_some_and(|k| k != 0)
        } else {
            label_at(&labels1, p + cam_shift) != Some(k0)
        };
        let k1 = labels1.data[i];
        let disoccluded = if k1 == 0 {
            label_at(&labels0, p - bg_shift).is_some_and(|k| k != 0)
        } else {
            label_at(&labels0, p - cam_shift) != Some(k1)
        };
        if occluded || disoccluded {
            indicator.data[i] = 1.0;
        }
    }
    let mut rho = gaussian_blur(&indicator, UNCERTAINTY_BLUR_SIGMA);
    let mut rng = forked_rng(seed, "uncertainty");
    for r in &mut rho.data {
        *r = r.max(0.0) + rng.random_range(0.0..=UNCERTAINTY_NOISE_FLOOR);
    }
    UncertaintyMap { rho }
}

/// How angular noise is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleNoise {
    /// 𝒜̃ = 𝒜 + 𝒰(ε_𝒜), ε_𝒜 in degrees.
    #[default]
    Additive,
    /// 𝒜̃ = (1 + 𝒰(ε_𝒜))·𝒜 with ε_𝒜 used as a raw number, kept for comparison.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Magnitude noise bound in percent.
    #[serde(default)]
    pub eps_m: f64,
    /// Angle noise bound in degrees.
    #[serde(default)]
    pub eps_a: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub angle_mode: AngleNoise,
}

impl NoiseSpec {
    pub fn is_zero(&self) -> bool {
        self.eps_m == 0.0 && self.eps_a == 0.0
    }
}

fn symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    let x: f64 = rng.random();
    (2.0 * x - 1.0) * bound
}

/// Perturbs every pixel's magnitude by a uniform percentage in ±ε_ℳ and its
/// angle by a uniform offset in ±ε_𝒜. The valid mask is kept; zero bounds
/// return the input unchanged.
pub fn inject_noise(flow: &FlowField, spec: &NoiseSpec) -> FlowField {
    if spec.is_zero() {
        return flow.clone();
    }
    let mut rng = forked_rng(spec.rng_seed, "flow-noise");
    let mut out = flow.clone();
    for i in 0..flow.len() {
        let m = symmetric(&mut rng, spec.eps_m);
        let a = symmetric(&mut rng, spec.eps_a);
        let mag = flow.magnitude(i) * (1.0 + m / 100.0);
        let ang = match spec.angle_mode {
            AngleNoise::Additive => flow.angle(i) + a.to_radians(),
            AngleNoise::Multiplicative => (1.0 + a) * flow.angle(i),
        };
        out.u[i] = mag * ang.cos();
        out.v[i] = mag * ang.sin();
    }
    out
}

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Middlebury encoding: "PIEH", i32 width, i32 height, then row-major
/// interleaved f32 (u, v), all little-endian. Values are rounded to f32.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.len() * 8);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for i in 0..flow.len() {
        out.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        out.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated .flo header".into()));
    }
    if &bytes[0..4] != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let dim = |b: &[u8]| i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let (w, h) = (dim(&bytes[4..8]), dim(&bytes[8..12]));
    if w < 0 || h < 0 {
        return Err(Error::Format(format!("negative .flo dimensions {w}×{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w.checked_mul(h).ok_or_else(|| Error::Format("oversized .flo dimensions".into()))?;
    if bytes.len() != 12 + n * 8 {
        return Err(Error::Format(format!("expected {} bytes of flow data, found {}", n * 8, bytes.len() - 12)));
    }
    let mut flow = FlowField::zeros(w, h);
    for (i, c) in bytes[12..].chunks_exact(8).enumerate() {
        flow.u[i] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        flow.v[i] = f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64;
    }
    Ok(flow)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}
