//! Incremental 3D latent feature mapping.
//!
//! Posed RGB-D frames carrying dense per-patch embeddings are lifted into 3D
//! coordinate/feature samples ([`ingest`]), fused into a multiresolution latent
//! voxel grid ([`grid`]) that is read out through a small MLP decoder
//! ([`decoder`]), and optimized with a cosine reconstruction loss
//! ([`trainer`]). The map can be kept current from a stream of frames
//! ([`online`]) and summarized into a single global token ([`token`]).
//! Persistence, synthetic ground-truth scenes and PCA export live in
//! [`store`].
//!
//! All arithmetic is `f64`; binary files store `f32` unless asked otherwise.

// `!(x > 0.0)` is used on purpose: it also routes NaN to the zero branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder;
pub mod error;
mod gemm;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod ingest;
pub mod online;
pub mod store;
pub mod token;
pub mod trainer;

pub use decoder::{ForwardCache, Mlp, MlpGradients};
pub use error::{Error, Result};
pub use geometry::Bounds;
pub use grid::{GridConfig, GridGradient, LatentGrid, LevelLayout, StorageMode};
pub use ingest::{CameraFrame, CameraIntrinsics, CameraPose, Sample, SampleBatch};
pub use online::{OnlineConfig, OnlineMapper, SkipReason, StepReport};
pub use store::LatentMap;
pub use token::{AggregatorWeights, MapToken, PosEncConfig};
pub use trainer::{AdamState, LossKind, TrainConfig, Trainer};
