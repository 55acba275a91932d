//! Lifting posed depth frames with per-patch embeddings into 3D samples.
//!
//! Each embedding patch is read at its center pixel `((i + 0.5) * stride - 0.5)`,
//! back-projected with the pinhole model and the camera-to-world pose, and
//! paired with its L2-normalized embedding. Depth values `<= 0` (or non-finite)
//! mark invalid pixels.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Bounds;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Pixels per embedding patch along each image axis.
    pub patch_stride: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidFrame(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidFrame("non-finite principal point".into()));
        }
        if self.patch_stride == 0 {
            return Err(Error::InvalidFrame("patch_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Pixel coordinate of the center of patch `(row, col)`, as `(u, v)`.
    pub fn patch_center(&self, row: usize, col: usize) -> [f64; 2] {
        let s = self.patch_stride as f64;
        [(col as f64 + 0.5) * s - 0.5, (row as f64 + 0.5) * s - 0.5]
    }

    /// Integer pixel index holding the depth for patch index `i` along one axis.
    ///
    /// Equal to the patch center for odd strides; for even strides the center
    /// falls between pixels and the lower/right neighbour is used.
    pub fn patch_pixel(&self, i: usize) -> usize {
        let s = self.patch_stride as usize;
        ((2 * i + 1) * s) / 2
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Row-major world-from-camera rotation.
    pub rotation: [[f64; 3]; 3],
    /// Camera origin in world coordinates (meters).
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        CameraPose {
            translation: t,
            ..Self::identity()
        }
    }

    /// Builds a pose from a row-major 4x4 homogeneous matrix.
    pub fn from_matrix4(m: &[f64; 16]) -> Result<Self> {
        let bottom = [m[12], m[13], m[14], m[15]];
        let expected = [0.0, 0.0, 0.0, 1.0];
        if bottom.iter().zip(expected).any(|(a, b)| (a - b).abs() > ROTATION_TOL) {
            return Err(Error::InvalidFrame(format!(
                "pose bottom row must be [0 0 0 1], got {bottom:?}"
            )));
        }
        let pose = CameraPose {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2], //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub(crate) fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation {
                deviation: f64::INFINITY,
            });
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        let det = (r.determinant() - 1.0).abs();
        let deviation = ortho.max(det);
        if deviation > ROTATION_TOL {
            return Err(Error::InvalidRotation { deviation });
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &[f64; 3]) -> [f64; 3] {
        let w = self.rotation_matrix() * Vector3::from(*p) + Vector3::from(self.translation);
        [w.x, w.y, w.z]
    }
}

/// Row-major depth image in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "depth image",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(DepthImage { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DepthImage {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Row-major grid of per-patch `dim`-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidFrame("embedding dimension must be >= 1".into()));
        }
        if data.len() != rows * cols * dim {
            return Err(Error::DimensionMismatch {
                what: "embedding grid",
                expected: rows * cols * dim,
                got: data.len(),
            });
        }
        Ok(EmbeddingGrid { rows, cols, dim, data })
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Per-patch dynamic-element mask; nonzero entries are excluded from mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl DynamicMask {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "dynamic mask",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(DynamicMask { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DynamicMask {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn is_dynamic(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col] != 0
    }
}

/// One posed RGB-D observation with per-patch target embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub depth: DepthImage,
    pub embeddings: EmbeddingGrid,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub dynamic_mask: Option<DynamicMask>,
}

impl CameraFrame {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        let s = self.intrinsics.patch_stride as usize;
        let (h, w) = (self.embeddings.rows, self.embeddings.cols);
        if h * s > self.depth.rows || w * s > self.depth.cols {
            return Err(Error::InvalidFrame(format!(
                "patch grid {h}x{w} at stride {s} exceeds depth image {}x{}",
                self.depth.rows, self.depth.cols
            )));
        }
        if let Some(mask) = &self.dynamic_mask {
            if (mask.rows, mask.cols) != (h, w) {
                return Err(Error::MaskShape {
                    expected: (h, w),
                    got: (mask.rows, mask.cols),
                });
            }
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.embeddings.rows, self.embeddings.cols)
    }
}

/// A world-space coordinate paired with its unit-norm target embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: [f64; 3],
    pub y: Vec<f64>,
    /// Originating patch as `(row, col)`.
    pub patch: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBatch {
    pub samples: Vec<Sample>,
    pub source_frame_id: String,
    /// Patch grid `(rows, cols)` of the originating frame.
    pub patch_grid: (usize, usize),
    pub embedding_dim: usize,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Drops samples outside `bounds`, returning how many were removed.
    pub fn retain_in_bounds(&mut self, bounds: &Bounds) -> usize {
        let before = self.samples.len();
        self.samples.retain(|s| bounds.contains(&s.x));
        before - self.samples.len()
    }
}

/// Per-reason counts of patches that did not become samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub emitted: usize,
    pub invalid_depth: usize,
    pub masked: usize,
    pub degenerate_embedding: usize,
    pub out_of_bounds: usize,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.emitted += other.emitted;
        self.invalid_depth += other.invalid_depth;
        self.masked += other.masked;
        self.degenerate_embedding += other.degenerate_embedding;
        self.out_of_bounds += other.out_of_bounds;
    }
}

/// Back-projects every valid, unmasked patch of `frame` into world space.
pub fn back_project(frame: &CameraFrame, frame_id: &str) -> Result<(SampleBatch, IngestStats)> {
    frame.validate()?;
    let intr = &frame.intrinsics;
    let rot = frame.pose.rotation_matrix();
    let t = Vector3::from(frame.pose.translation);
    let (h, w) = frame.patch_grid();
    let k = frame.embeddings.dim;

    let mut stats = IngestStats::default();
    let mut samples = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            if frame.dynamic_mask.as_ref().is_some_and(|m| m.is_dynamic(row, col)) {
                stats.masked += 1;
                continue;
            }
            let z = frame.depth.at(intr.patch_pixel(row), intr.patch_pixel(col));
            if !(z.is_finite() && z > 0.0) {
                stats.invalid_depth += 1;
                continue;
            }
            let Some(y) = normalized(frame.embeddings.at(row, col)) else {
                stats.degenerate_embedding += 1;
                continue;
            };
            let [u, v] = intr.patch_center(row, col);
            let ray = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
            let p = rot * (ray * z) + t;
            samples.push(Sample {
                x: [p.x, p.y, p.z],
                y,
                patch: (row as u32, col as u32),
            });
        }
    }
    stats.emitted = samples.len();
    Ok((
        SampleBatch {
            samples,
            source_frame_id: frame_id.to_string(),
            patch_grid: (h, w),
            embedding_dim: k,
        },
        stats,
    ))
}

/// Projects a world point into the camera, returning pixel `(u, v)` and depth.
pub fn forward_project(x: &[f64; 3], pose: &CameraPose, intrinsics: &CameraIntrinsics) -> Result<([f64; 2], f64)> {
    let rot = pose.rotation_matrix();
    let pc = rot.transpose() * (Vector3::from(*x) - Vector3::from(pose.translation));
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera { z: pc.z });
    }
    let u = intrinsics.fx * pc.x / pc.z + intrinsics.cx;
    let v = intrinsics.fy * pc.y / pc.z + intrinsics.cy;
    Ok(([u, v], pc.z))
}

/// Removes samples whose originating patch is flagged dynamic, preserving order.
pub fn filter_dynamic(batch: &SampleBatch, mask: &DynamicMask) -> Result<SampleBatch> {
    if (mask.rows, mask.cols) != batch.patch_grid {
        return Err(Error::MaskShape {
            expected: batch.patch_grid,
            got: (mask.rows, mask.cols),
        });
    }
    let samples = batch
        .samples
        .iter()
        .filter(|s| !mask.is_dynamic(s.patch.0 as usize, s.patch.1 as usize))
        .cloned()
        .collect();
    Ok(SampleBatch {
        samples,
        ..batch.clone()
    })
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    Some(v.iter().map(|a| a / norm).collect())
}
