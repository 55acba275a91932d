use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("point ({:.6}, {:.6}, {:.6}) lies outside the grid bounds", .point[0], .point[1], .point[2])]
    OutOfBounds { point: [f64; 3] },

    #[error("vertex ({}, {}, {}) lies outside level dims ({}, {}, {})", .coord[0], .coord[1], .coord[2], .dims[0], .dims[1], .dims[2])]
    VertexOutOfRange { coord: [u32; 3], dims: [u32; 3] },

    #[error("rotation is not orthonormal with determinant +1 (deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("point is behind the camera (camera-frame z = {z})")]
    BehindCamera { z: f64 },

    #[error("mask shape {got:?} does not match patch grid {expected:?}")]
    MaskShape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("backward pass called without a cached forward pass")]
    MissingForwardCache,

    #[error("embedding dimension differs across scenes: {expected} vs {got}")]
    InconsistentEmbeddingDim { expected: usize, got: usize },

    #[error("map has no occupied vertices")]
    EmptyMap,

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("{what}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("{what}: unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("{what}: truncated at byte offset {offset}, needed {needed} more bytes but {available} remain")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("{what}: malformed at byte offset {offset}: {message}")]
    Malformed {
        what: &'static str,
        offset: usize,
        message: String,
    },

    #[error("{what}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum {
        what: &'static str,
        stored: u64,
        computed: u64,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used in machine-readable CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::VertexOutOfRange { .. } => "vertex_out_of_range",
            Error::InvalidRotation { .. } => "invalid_rotation",
            Error::InvalidFrame(_) => "invalid_frame",
            Error::BehindCamera { .. } => "behind_camera",
            Error::MaskShape { .. } => "mask_shape",
            Error::EmptyBatch => "empty_batch",
            Error::MissingForwardCache => "missing_forward_cache",
            Error::InconsistentEmbeddingDim { .. } => "inconsistent_embedding_dim",
            Error::EmptyMap => "empty_map",
            Error::DegenerateTrajectory(_) => "degenerate_trajectory",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::Malformed { .. } => "malformed",
            Error::Checksum { .. } => "checksum",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True when the failure is a caller/configuration mistake rather than bad data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}
