//! Synthetic tabletop scenes with an exact ground-truth feature field.
//!
//! Up to eight floating cubes sit on a 3x3 lattice of slots above a floor
//! plane. Each cube carries one unit prototype from a shared palette; every
//! other surface carries the background prototype. Cubes are placed so that
//! no finest-level (0.12 m) vertex is shared between two cubes or between a
//! cube and the floor. Depth and per-patch embeddings are ray cast from an
//! orbiting camera, so rendered samples agree with [`SynthScene::query`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetFrame, Split};
use crate::error::{Error, Result};
use crate::geometry::Bounds;
use crate::grid::GridConfig;
use crate::ingest::{CameraFrame, CameraIntrinsics, CameraPose, DepthImage, DynamicMask, EmbeddingGrid};

const SLOT_PITCH: f64 = 0.6;
const CUBE_OFFSET: f64 = 0.15;
const CUBE_SIDE: f64 = 0.3;
/// Slack used when classifying back-projected points against cube faces.
const SURFACE_TOL: f64 = 1e-6;
const LOOK_AT: [f64; 3] = [0.9, 0.9, 0.2];
/// Floor height, lifted off the bounds' min face so back-projection rounding
/// cannot push floor samples outside the scene.
const FLOOR_Z: f64 = 1e-6;

/// Moves one region into the free slot from `at_frame` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relocation {
    pub region: usize,
    pub at_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Picks slot arrangement, prototype assignment and noise.
    pub seed: u64,
    /// Picks the prototype palette; scenes sharing it share prototypes.
    pub palette_seed: u64,
    pub num_regions: usize,
    pub embedding_dim: usize,
    pub train_frames: usize,
    pub heldout_frames: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patch_stride: u32,
    pub fov_deg: f64,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub heldout_height: f64,
    /// Std-dev of Gaussian noise added to embeddings before renormalizing.
    pub noise: f64,
    /// Adds a moving box with a junk embedding, flagged in each frame's mask.
    pub dynamic_arm: bool,
    pub relocation: Option<Relocation>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            palette_seed: 0,
            num_regions: 8,
            embedding_dim: 64,
            train_frames: 50,
            heldout_frames: 10,
            patch_rows: 48,
            patch_cols: 48,
            patch_stride: 3,
            fov_deg: 45.0,
            orbit_radius: 2.2,
            orbit_height: 1.5,
            heldout_height: 1.3,
            noise: 0.0,
            dynamic_arm: false,
            relocation: None,
        }
    }
}

impl SynthSpec {
    pub fn bounds() -> Bounds {
        GridConfig::default().bounds
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_regions == 0 || self.num_regions > 8 {
            return bad(format!("num_regions must be in 1..=8, got {}", self.num_regions));
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be >= 2".into());
        }
        if self.patch_rows == 0 || self.patch_cols == 0 || self.patch_stride == 0 {
            return bad("patch grid and stride must be positive".into());
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) {
            return bad(format!("fov_deg {} outside (1, 170)", self.fov_deg));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative".into());
        }
        if let Some(r) = self.relocation {
            if r.region >= self.num_regions {
                return bad(format!("relocation region {} does not exist", r.region));
            }
        }
        for (what, v) in [
            ("orbit_radius", self.orbit_radius),
            ("orbit_height", self.orbit_height),
            ("heldout_height", self.heldout_height),
        ] {
            if !v.is_finite() {
                return Err(Error::DegenerateTrajectory(format!("{what} is not finite")));
            }
        }
        if self.orbit_radius <= 0.0 {
            return Err(Error::DegenerateTrajectory(
                "orbit radius must be positive; the camera would look straight down".into(),
            ));
        }
        let b = Self::bounds();
        for h in [self.orbit_height, self.heldout_height] {
            if h <= b.max[2] && self.orbit_radius <= 0.9 * 2f64.sqrt() {
                return Err(Error::DegenerateTrajectory(format!(
                    "camera at height {h} and radius {} lies inside the scene",
                    self.orbit_radius
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn slot(index: usize) -> Self {
        let (i, j) = ((index % 3) as f64, (index / 3) as f64);
        let min = [SLOT_PITCH * i + CUBE_OFFSET, SLOT_PITCH * j + CUBE_OFFSET, CUBE_OFFSET];
        Aabb {
            min,
            max: [min[0] + CUBE_SIDE, min[1] + CUBE_SIDE, min[2] + CUBE_SIDE],
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    fn contains(&self, p: &[f64; 3], tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }

    /// Entry distance of the ray, if it hits in front of the origin.
    fn hit(&self, o: &[f64; 3], d: &[f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

/// What a camera ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Hit {
    Region(usize),
    Floor,
    Arm,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    spec: SynthSpec,
    /// Region prototypes followed by the background prototype.
    prototypes: Vec<Vec<f64>>,
    junk: Vec<f64>,
    slots: Vec<usize>,
    free_slot: usize,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

/// Rescales to unit norm, repeating until rescaling no longer changes any
/// bit so that ingest's own normalization leaves the vector untouched.
fn normalize(v: &mut [f64]) {
    for _ in 0..8 {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 1.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-9).then(|| v.map(|x| x / n))
}

/// OpenCV-convention pose at `eye` looking at `target` with world +z up.
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<CameraPose> {
    let f = unit(sub(&target, &eye))
        .ok_or_else(|| Error::DegenerateTrajectory("camera coincides with its target".into()))?;
    let r = unit(cross(&f, &[0.0, 0.0, 1.0]))
        .ok_or_else(|| Error::DegenerateTrajectory("view direction is parallel to up".into()))?;
    let d = cross(&f, &r);
    Ok(CameraPose {
        rotation: [[r[0], d[0], f[0]], [r[1], d[1], f[1]], [r[2], d[2], f[2]]],
        translation: eye,
    })
}

impl SynthScene {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.embedding_dim;
        let mut palette_rng = ChaCha8Rng::seed_from_u64(spec.palette_seed);
        let palette: Vec<Vec<f64>> = (0..10).map(|_| unit_gaussian(&mut palette_rng, k)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut slots: Vec<usize> = (0..9).collect();
        slots.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut rng);

        let mut prototypes: Vec<Vec<f64>> = order[..spec.num_regions].iter().map(|&p| palette[p].clone()).collect();
        prototypes.push(palette[8].clone());
        Ok(SynthScene {
            free_slot: slots[spec.num_regions],
            slots: slots[..spec.num_regions].to_vec(),
            prototypes,
            junk: palette[9].clone(),
            spec,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn num_regions(&self) -> usize {
        self.slots.len()
    }

    pub fn prototype(&self, region: usize) -> &[f64] {
        &self.prototypes[region]
    }

    pub fn background(&self) -> &[f64] {
        self.prototypes.last().expect("background is always present")
    }

    /// Phase 1 once the relocation (if any) has happened.
    pub fn phase_of(&self, frame_index: usize) -> usize {
        match self.spec.relocation {
            Some(r) if frame_index >= r.at_frame => 1,
            _ => 0,
        }
    }

    pub fn region_box(&self, region: usize, phase: usize) -> Aabb {
        match self.spec.relocation {
            Some(r) if phase > 0 && r.region == region => Aabb::slot(self.free_slot),
            _ => Aabb::slot(self.slots[region]),
        }
    }

    pub fn region_center(&self, region: usize, phase: usize) -> [f64; 3] {
        self.region_box(region, phase).center()
    }

    /// Box the moved region occupied before relocating, if any.
    pub fn vacated_box(&self) -> Option<Aabb> {
        self.spec.relocation.map(|r| Aabb::slot(self.slots[r.region]))
    }

    /// Region containing `x` in `phase`, or `None` for background.
    pub fn region_at(&self, x: &[f64; 3], phase: usize) -> Option<usize> {
        (0..self.num_regions()).find(|&r| self.region_box(r, phase).contains(x, SURFACE_TOL))
    }

    /// Ground-truth embedding at `x`.
    pub fn query(&self, x: &[f64; 3], phase: usize) -> &[f64] {
        match self.region_at(x, phase) {
            Some(r) => self.prototype(r),
            None => self.background(),
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let s = self.spec.patch_stride as f64;
        let (h, w) = (self.spec.patch_rows as f64 * s, self.spec.patch_cols as f64 * s);
        let f = 0.5 * w / (0.5 * self.spec.fov_deg.to_radians()).tan();
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * (w - 1.0),
            cy: 0.5 * (h - 1.0),
            patch_stride: self.spec.patch_stride,
        }
    }

    fn orbit_pose(&self, angle: f64, height: f64) -> Result<CameraPose> {
        let r = self.spec.orbit_radius;
        let eye = [LOOK_AT[0] + r * angle.cos(), LOOK_AT[1] + r * angle.sin(), height];
        look_at(eye, LOOK_AT)
    }

    pub fn train_pose(&self, i: usize) -> Result<CameraPose> {
        let a = std::f64::consts::TAU * i as f64 / self.spec.train_frames.max(1) as f64;
        self.orbit_pose(a, self.spec.orbit_height + 0.15 * (3.0 * a).sin())
    }

    pub fn heldout_pose(&self, i: usize) -> Result<CameraPose> {
        let a = std::f64::consts::TAU * (i as f64 + 0.5) / self.spec.heldout_frames.max(1) as f64 + 0.1;
        self.orbit_pose(a, self.spec.heldout_height)
    }

    fn arm_box(&self, frame_index: usize) -> Aabb {
        let phi = 0.7 * frame_index as f64;
        let c = [LOOK_AT[0] + 0.5 * phi.cos(), LOOK_AT[1] + 0.5 * phi.sin()];
        Aabb {
            min: [c[0] - 0.05, c[1] - 0.05, 0.55],
            max: [c[0] + 0.05, c[1] + 0.05, 1.05],
        }
    }

    fn cast(&self, o: &[f64; 3], d: &[f64; 3], phase: usize, arm: Option<&Aabb>) -> Option<(f64, Hit)> {
        let mut best: Option<(f64, Hit)> = None;
        let mut consider = |t: f64, h: Hit| {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, h));
            }
        };
        for r in 0..self.num_regions() {
            if let Some(t) = self.region_box(r, phase).hit(o, d) {
                consider(t, Hit::Region(r));
            }
        }
        if let Some(t) = arm.and_then(|a| a.hit(o, d)) {
            consider(t, Hit::Arm);
        }
        if d[2] < 0.0 {
            let t = (FLOOR_Z - o[2]) / d[2];
            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
            let b = SynthSpec::bounds();
            if t > 0.0 && (b.min[0]..=b.max[0]).contains(&x) && (b.min[1]..=b.max[1]).contains(&y) {
                consider(t, Hit::Floor);
            }
        }
        best
    }

    /// Renders one frame; `frame_index` seeds noise and places the arm.
    pub fn render(&self, pose: &CameraPose, phase: usize, frame_index: usize) -> CameraFrame {
        let intr = self.intrinsics();
        let s = self.spec.patch_stride as usize;
        let (ph, pw, k) = (self.spec.patch_rows, self.spec.patch_cols, self.spec.embedding_dim);
        let (rows, cols) = (ph * s, pw * s);
        let arm = self.spec.dynamic_arm.then(|| self.arm_box(frame_index));
        let o = pose.translation;
        let rm = pose.rotation;

        let mut depth = vec![0.0; rows * cols];
        let mut hits = vec![None; rows * cols];
        for v in 0..rows {
            for u in 0..cols {
                // camera-frame direction with unit z, so ray distance t equals depth
                let dc = [(u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0];
                let dw = [0, 1, 2].map(|a| rm[a][0] * dc[0] + rm[a][1] * dc[1] + rm[a][2] * dc[2]);
                if let Some((t, h)) = self.cast(&o, &dw, phase, arm.as_ref()) {
                    depth[v * cols + u] = t;
                    hits[v * cols + u] = Some(h);
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(frame_index as u64 + 1);
        let mut emb = Vec::with_capacity(ph * pw * k);
        let mut mask = vec![0u8; ph * pw];
        for i in 0..ph {
            for j in 0..pw {
                let (pr, pc) = (intr.patch_pixel(i), intr.patch_pixel(j));
                let hit = hits[pr * cols + pc];
                let base = match hit {
                    Some(Hit::Region(r)) => self.prototype(r),
                    Some(Hit::Arm) => {
                        mask[i * pw + j] = 1;
                        &self.junk
                    }
                    _ => self.background(),
                };
                let mut y = base.to_vec();
                if self.spec.noise > 0.0 {
                    for v in &mut y {
                        *v += self.spec.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                    normalize(&mut y);
                }
                emb.extend(y);
            }
        }
        CameraFrame {
            depth: DepthImage::new(rows, cols, depth).expect("sized above"),
            embeddings: EmbeddingGrid::new(ph, pw, k, emb).expect("sized above"),
            pose: *pose,
            intrinsics: intr,
            dynamic_mask: self
                .spec
                .dynamic_arm
                .then(|| DynamicMask::new(ph, pw, mask).expect("sized above")),
        }
    }

    /// All training frames (`t000`, ...) followed by held-out frames (`h000`, ...).
    ///
    /// Held-out frames show the final arrangement.
    pub fn dataset(&self) -> Result<Dataset> {
        let final_phase = self.spec.relocation.map_or(0, |_| 1);
        let mut jobs = Vec::new();
        for i in 0..self.spec.train_frames {
            jobs.push((
                format!("t{i:03}"),
                Split::Train,
                self.train_pose(i)?,
                self.phase_of(i),
                i,
            ));
        }
        for i in 0..self.spec.heldout_frames {
            let idx = self.spec.train_frames + i;
            jobs.push((
                format!("h{i:03}"),
                Split::Heldout,
                self.heldout_pose(i)?,
                final_phase,
                idx,
            ));
        }
        let frames = jobs
            .into_par_iter()
            .map(|(id, split, pose, phase, idx)| DatasetFrame {
                id,
                split,
                frame: self.render(&pose, phase, idx),
            })
            .collect();
        Ok(Dataset {
            bounds: Some(SynthSpec::bounds()),
            frames,
        })
    }
}
