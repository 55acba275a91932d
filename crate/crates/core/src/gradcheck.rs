//! Finite-difference verification of the analytic loss gradients.
//!
//! Each case builds a small two-level grid (the finer level hashed, so
//! collisions are exercised), a one-hidden-layer decoder with non-zero biases
//! and a handful of samples, then compares every analytic partial derivative
//! of the mean cosine loss against a central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::Mlp;
use crate::error::Result;
use crate::geometry::Bounds;
use crate::grid::{GridConfig, LatentGrid};
use crate::ingest::Sample;
use crate::trainer::{batch_gradients, evaluate_loss, LossKind};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute floor below which both derivatives count as zero.
    pub abs_tol: f64,
    pub loss: LossKind,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases: 100,
            seed: 0,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            loss: LossKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub seed: u64,
    pub checked: usize,
    /// Coordinates whose perturbation flips a rectifier and so has no derivative.
    pub skipped_kinks: usize,
    /// Partials outside `rel_tol` that passed only through `abs_tol`.
    pub floor_passes: usize,
    pub max_rel_error: f64,
    pub failures: Vec<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.checked).sum()
    }

    pub fn floor_passes(&self) -> usize {
        self.cases.iter().map(|c| c.floor_passes).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

struct Case {
    grid: LatentGrid,
    decoder: Mlp,
    samples: Vec<Sample>,
}

fn build_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=3);
    let hidden = rng.random_range(5..=8);
    let k = rng.random_range(3..=5);
    let config = GridConfig {
        bounds: Bounds::new([0.0; 3], [1.0, 0.8, 0.6])?,
        levels: vec![0.5, 0.2],
        feature_dim: c,
        table_size: 40,
        seed,
    };
    let mut grid = LatentGrid::zeros(config)?;
    for level in grid.params_mut() {
        level.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let mut decoder = Mlp::init(seed, &[hidden], 2 * c, k)?;
    for layer in decoder.layers_mut() {
        layer
            .bias_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let bounds = *grid.bounds();
    let samples = (0..4)
        .map(|i| {
            let mut x = [0, 1, 2].map(|a| rng.random_range(bounds.min[a]..bounds.max[a]));
            if i == 0 && seed.is_multiple_of(4) {
                // exercise the max-face clamp
                x[0] = bounds.max[0];
            }
            let mut y: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            y.iter_mut().for_each(|v| *v /= n);
            Sample { x, y, patch: (0, i) }
        })
        .collect();
    Ok(Case { grid, decoder, samples })
}

/// Sign pattern of every hidden pre-activation over all samples.
fn relu_pattern(grid: &LatentGrid, decoder: &Mlp, samples: &[Sample]) -> Result<Vec<bool>> {
    let mut pattern = Vec::new();
    let layers = decoder.layers();
    for s in samples {
        let mut a = grid.encode(&s.x)?;
        for layer in &layers[..layers.len() - 1] {
            let mut out = layer.bias().to_vec();
            for (o, row) in out.iter_mut().zip(layer.weights().chunks_exact(layer.in_dim())) {
                *o += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
            }
            pattern.extend(out.iter().map(|v| *v > 0.0));
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            a = out;
        }
    }
    Ok(pattern)
}

#[derive(Clone, Copy)]
enum Param {
    Grid(usize, usize),
    Decoder(usize, usize),
}

fn set(case: &mut Case, p: Param, value: f64) -> f64 {
    let slot = match p {
        Param::Grid(t, i) => &mut case.grid.params_mut()[t][i],
        Param::Decoder(t, i) => &mut case.decoder.params_mut()[t][i],
    };
    std::mem::replace(slot, value)
}

fn probe(case: &mut Case, p: Param, value: f64, loss: LossKind) -> Result<(f64, Vec<bool>)> {
    let orig = set(case, p, value);
    let out = evaluate_loss(&case.grid, &case.decoder, &case.samples, loss)
        .and_then(|l| Ok((l, relu_pattern(&case.grid, &case.decoder, &case.samples)?)));
    set(case, p, orig);
    out
}

pub fn check_case(seed: u64, cfg: &GradcheckConfig) -> Result<CaseReport> {
    let mut case = build_case(seed)?;
    let refs: Vec<&Sample> = case.samples.iter().collect();
    let grads = batch_gradients(&case.grid, &case.decoder, &refs, cfg.loss, true)?;
    let grid_grads: Vec<Vec<f64>> = grads.grid.slices().iter().map(|s| s.to_vec()).collect();
    let dec_grads: Vec<Vec<f64>> = grads
        .decoder
        .as_ref()
        .expect("decoder gradients requested")
        .slices()
        .iter()
        .map(|s| s.to_vec())
        .collect();

    let mut params = Vec::new();
    for (t, g) in grid_grads.iter().enumerate() {
        params.extend((0..g.len()).map(|i| (Param::Grid(t, i), g[i])));
    }
    for (t, g) in dec_grads.iter().enumerate() {
        params.extend((0..g.len()).map(|i| (Param::Decoder(t, i), g[i])));
    }

    let mut report = CaseReport {
        seed,
        checked: 0,
        skipped_kinks: 0,
        floor_passes: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for (p, analytic) in params {
        let orig = set(&mut case, p, 0.0);
        set(&mut case, p, orig);
        let (lp, pat_p) = probe(&mut case, p, orig + cfg.step, cfg.loss)?;
        let (lm, pat_m) = probe(&mut case, p, orig - cfg.step, cfg.loss)?;
        if pat_p != pat_m {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        report.checked += 1;
        if scale > cfg.abs_tol {
            report.max_rel_error = report.max_rel_error.max(diff / scale);
        }
        if diff > cfg.rel_tol * scale && diff <= cfg.rel_tol * scale + cfg.abs_tol {
            report.floor_passes += 1;
        }
        if diff > cfg.rel_tol * scale + cfg.abs_tol {
            let name = match p {
                Param::Grid(t, i) => format!("grid[{t}][{i}]"),
                Param::Decoder(t, i) => format!("decoder[{t}][{i}]"),
            };
            report
                .failures
                .push(format!("{name}: analytic {analytic:.6e} vs numeric {numeric:.6e}"));
        }
    }
    Ok(report)
}

/// Runs `cfg.cases` cases with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let cases = (0..cfg.cases as u64)
        .map(|i| check_case(cfg.seed.wrapping_add(i), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_cases_pass() {
        let report = run(&GradcheckConfig {
            cases: 5,
            ..Default::default()
        })
        .unwrap();
        assert!(
            report.passed(),
            "{:?}",
            report.cases.iter().flat_map(|c| &c.failures).collect::<Vec<_>>()
        );
        assert!(report.checked() > 500);
    }

    #[test]
    fn l2_loss_also_passes() {
        let cfg = GradcheckConfig {
            cases: 3,
            loss: LossKind::L2,
            ..Default::default()
        };
        assert!(run(&cfg).unwrap().passed());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // a tolerance no finite difference can meet must fail
        let cfg = GradcheckConfig {
            cases: 1,
            step: 1e-1,
            rel_tol: 1e-12,
            abs_tol: 0.0,
            ..Default::default()
        };
        assert!(!run(&cfg).unwrap().passed());
    }
}
