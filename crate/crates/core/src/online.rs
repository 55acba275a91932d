//! Periodic online re-optimization of grid features from a frame stream.
//!
//! Every `t_update`-th step (unless the robot is grasping) the current frame is
//! lifted into samples and `k_update` optimizer steps are run on the grid with
//! the decoder frozen. Nothing else touches the map.

use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Mlp;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::ingest::{back_project, CameraFrame, IngestStats, Sample};
use crate::trainer::{optimize_step, AdamParams, AdamState, LossKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    /// Environment steps between map updates.
    pub t_update: u64,
    /// Optimizer steps per update.
    pub k_update: usize,
    /// Grid learning rate.
    pub eta: f64,
    pub freeze_decoder: bool,
    /// Decoder learning rate, only used when `freeze_decoder` is false.
    pub lr_decoder: f64,
    /// Upper bound on samples per optimizer step, drawn from the current frame.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        OnlineConfig {
            t_update: 5,
            k_update: 20,
            eta: t.lr_grid,
            freeze_decoder: true,
            lr_decoder: t.lr_decoder,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_update == 0 || self.k_update == 0 {
            return Err(Error::InvalidConfig("t_update and k_update must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.lr_decoder > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0 && self.eps > 0.0) {
            return Err(Error::InvalidConfig("invalid adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NotUpdateTick,
    Grasping,
    MissingFrame,
    /// The frame produced no usable in-bounds samples.
    EmptyFrame,
}

impl SkipReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            SkipReason::NotUpdateTick => "not_update_tick",
            SkipReason::Grasping => "grasping",
            SkipReason::MissingFrame => "missing_frame",
            SkipReason::EmptyFrame => "empty_frame",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub tau: u64,
    pub frame_id: Option<String>,
    pub grasping: bool,
    pub updated: bool,
    pub skip_reason: Option<SkipReason>,
    pub ingest: IngestStats,
    /// Pre-update mean loss of every optimizer step run this tick.
    pub losses: Vec<f64>,
}

impl StepReport {
    pub fn optimization_steps(&self) -> usize {
        self.losses.len()
    }
}

/// Streaming map updater holding a grid, a decoder and their optimizer state.
#[derive(Debug, Clone)]
pub struct OnlineMapper {
    grid: LatentGrid,
    decoder: Mlp,
    cfg: OnlineConfig,
    tau: u64,
    log: Vec<StepReport>,
    grid_state: AdamState,
    decoder_state: AdamState,
    rng: ChaCha8Rng,
}

impl OnlineMapper {
    /// Starts from an offline map (`grid`, `decoder`) at `tau = 0`.
    pub fn new(grid: LatentGrid, decoder: Mlp, cfg: OnlineConfig) -> Result<Self> {
        cfg.validate()?;
        if decoder.in_dim() != grid.encoded_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder input vs grid encoding",
                expected: grid.encoded_dim(),
                got: decoder.in_dim(),
            });
        }
        Ok(OnlineMapper {
            grid_state: AdamState::for_grid(&grid),
            decoder_state: AdamState::for_mlp(&decoder),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            grid,
            decoder,
            cfg,
            tau: 0,
            log: Vec::new(),
        })
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn grid(&self) -> &LatentGrid {
        &self.grid
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn config(&self) -> &OnlineConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[StepReport] {
        &self.log
    }

    pub fn into_parts(self) -> (LatentGrid, Mlp, Vec<StepReport>) {
        (self.grid, self.decoder, self.log)
    }

    /// Advances `tau` by one and updates the map if this is an active update tick.
    ///
    /// Ingestion errors are returned after `tau` has advanced; no report is logged for them.
    pub fn step(&mut self, frame: Option<(&str, &CameraFrame)>, grasping: bool) -> Result<&StepReport> {
        self.tau += 1;
        let mut report = StepReport {
            tau: self.tau,
            frame_id: frame.map(|(id, _)| id.to_string()),
            grasping,
            updated: false,
            skip_reason: None,
            ingest: IngestStats::default(),
            losses: Vec::new(),
        };
        if !self.tau.is_multiple_of(self.cfg.t_update) {
            report.skip_reason = Some(SkipReason::NotUpdateTick);
        } else if grasping {
            report.skip_reason = Some(SkipReason::Grasping);
        } else if let Some((id, frame)) = frame {
            let (mut batch, mut stats) = back_project(frame, id)?;
            stats.out_of_bounds = batch.retain_in_bounds(self.grid.bounds());
            report.ingest = stats;
            if batch.is_empty() {
                report.skip_reason = Some(SkipReason::EmptyFrame);
            } else {
                report.losses = self.optimize(&batch.samples)?;
                report.updated = true;
            }
        } else {
            report.skip_reason = Some(SkipReason::MissingFrame);
        }
        self.log.push(report);
        Ok(self.log.last().unwrap())
    }

    fn optimize(&mut self, data: &[Sample]) -> Result<Vec<f64>> {
        let hp = AdamParams {
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.eps,
        };
        let mut losses = Vec::with_capacity(self.cfg.k_update);
        let all: Vec<&Sample> = data.iter().collect();
        for _ in 0..self.cfg.k_update {
            let batch: Vec<&Sample> = if data.len() <= self.cfg.batch_size {
                all.clone()
            } else {
                let mut idx = rand::seq::index::sample(&mut self.rng, data.len(), self.cfg.batch_size).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| &data[i]).collect()
            };
            let dec = (!self.cfg.freeze_decoder).then_some((&mut self.decoder_state, self.cfg.lr_decoder));
            losses.push(optimize_step(
                &mut self.grid,
                &mut self.grid_state,
                &mut self.decoder,
                dec,
                &batch,
                self.cfg.eta,
                LossKind::Cosine,
                hp,
            )?);
        }
        Ok(losses)
    }
}

/// One entry of a replay stream.
#[derive(Debug, Clone)]
pub struct StreamStep {
    pub frame: Option<(String, CameraFrame)>,
    pub grasping: bool,
}

/// Runs `mapper` over a whole stream and returns the reports it produced.
pub fn replay<I>(mapper: &mut OnlineMapper, stream: I) -> Result<Vec<StepReport>>
where
    I: IntoIterator<Item = Result<StreamStep>>,
{
    let start = mapper.log.len();
    for step in stream {
        let step = step?;
        let frame = step.frame.as_ref().map(|(id, f)| (id.as_str(), f));
        mapper.step(frame, step.grasping)?;
    }
    Ok(mapper.log[start..].to_vec())
}

pub const REPORT_CSV_HEADER: &str =
    "tau,frame_id,grasping,updated,skip_reason,samples,masked,invalid_depth,out_of_bounds,opt_steps,first_loss,last_loss";

pub fn write_report_csv<W: Write>(mut out: W, reports: &[StepReport]) -> std::io::Result<()> {
    writeln!(out, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        let fmt_loss = |v: Option<&f64>| v.map(|l| format!("{l:.9e}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.tau,
            r.frame_id.as_deref().unwrap_or(""),
            r.grasping as u8,
            r.updated as u8,
            r.skip_reason.map(|s| s.as_str()).unwrap_or(""),
            r.ingest.emitted - r.ingest.out_of_bounds,
            r.ingest.masked,
            r.ingest.invalid_depth,
            r.ingest.out_of_bounds,
            r.losses.len(),
            fmt_loss(r.losses.first()),
            fmt_loss(r.losses.last()),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Bounds;
    use crate::grid::GridConfig;
    use crate::ingest::{CameraIntrinsics, CameraPose, DepthImage, EmbeddingGrid};

    fn mapper(cfg: OnlineConfig) -> OnlineMapper {
        let grid = LatentGrid::new(GridConfig {
            bounds: Bounds::new([-1.0, -1.0, 0.0], [1.0, 1.0, 2.0]).unwrap(),
            levels: vec![0.5, 0.25],
            feature_dim: 4,
            table_size: 1 << 14,
            seed: 1,
        })
        .unwrap();
        let dec = Mlp::init(2, &[16], 8, 3).unwrap();
        OnlineMapper::new(grid, dec, cfg).unwrap()
    }

    fn frame() -> CameraFrame {
        CameraFrame {
            depth: DepthImage::filled(4, 4, 1.0),
            embeddings: EmbeddingGrid::new(4, 4, 3, [1.0, 0.5, 0.0].repeat(16)).unwrap(),
            pose: CameraPose::identity(),
            intrinsics: CameraIntrinsics {
                fx: 4.0,
                fy: 4.0,
                cx: 1.5,
                cy: 1.5,
                patch_stride: 1,
            },
            dynamic_mask: None,
        }
    }

    #[test]
    fn gate_examples() {
        let mut m = mapper(OnlineConfig::default());
        let f = frame();
        for _ in 0..2 {
            m.step(Some(("f", &f)), false).unwrap();
        }
        let r = m.step(Some(("f", &f)), false).unwrap();
        assert_eq!(r.tau, 3);
        assert!(!r.updated && r.losses.is_empty());
        m.step(None, false).unwrap();
        let r = m.step(Some(("f", &f)), false).unwrap().clone();
        assert_eq!(r.tau, 5);
        assert!(r.updated);
        assert_eq!(r.optimization_steps(), 20);
        for _ in 0..4 {
            m.step(Some(("f", &f)), false).unwrap();
        }
        let r = m.step(Some(("f", &f)), true).unwrap();
        assert_eq!(r.tau, 10);
        assert_eq!(r.skip_reason, Some(SkipReason::Grasping));
        assert_eq!(r.optimization_steps(), 0);
    }

    #[test]
    fn missing_frame_on_tick_is_logged() {
        let mut m = mapper(OnlineConfig {
            t_update: 1,
            ..OnlineConfig::default()
        });
        let r = m.step(None, false).unwrap();
        assert_eq!(r.skip_reason, Some(SkipReason::MissingFrame));
    }

    #[test]
    fn frozen_decoder_untouched_and_grid_changes() {
        let mut m = mapper(OnlineConfig {
            t_update: 1,
            ..OnlineConfig::default()
        });
        let dec = m.decoder().clone();
        let grid = m.grid().clone();
        m.step(Some(("f", &frame())), false).unwrap();
        assert_eq!(m.decoder(), &dec);
        assert_ne!(m.grid(), &grid);
    }

    #[test]
    fn invalid_frame_errors_propagate() {
        let mut m = mapper(OnlineConfig {
            t_update: 1,
            ..OnlineConfig::default()
        });
        let mut f = frame();
        f.pose.rotation[0][0] = 2.0;
        assert!(m.step(Some(("bad", &f)), false).is_err());
        assert_eq!(m.tau(), 1);
        assert!(m.log().is_empty());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let mut m = mapper(OnlineConfig::default());
        let f = frame();
        for _ in 0..6 {
            m.step(Some(("f", &f)), false).unwrap();
        }
        let mut buf = Vec::new();
        write_report_csv(&mut buf, m.log()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(5).unwrap().starts_with("5,f,0,1,,16,"));
    }
}
