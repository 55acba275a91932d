//! Cosine reconstruction loss, Adam, and the per-scene / multi-scene fitting loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{BatchCache, Mlp, MlpGradients};
use crate::error::{Error, Result};
use crate::grid::{GridConfig, GridGradient, LatentGrid, Stencil};
use crate::ingest::Sample;

/// Guard on the cosine denominator so all-zero predictions stay finite.
pub const COSINE_EPS: f64 = 1e-8;

/// Samples per independently evaluated gradient chunk. Fixed so results do not
/// depend on the number of worker threads.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Cosine,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_grid: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optimization steps for a fit; ignored when `epochs` is set.
    pub max_steps: usize,
    pub epochs: Option<usize>,
    pub freeze_decoder: bool,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            lr_grid: 1e-2,
            lr_decoder: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 2000,
            epochs: None,
            freeze_decoder: false,
            seed: 0,
            loss: LossKind::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_grid > 0.0 && self.lr_decoder > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        Ok(())
    }

    /// Optimizer steps a fit over `dataset_len` samples will take.
    pub fn steps_for(&self, dataset_len: usize) -> usize {
        match self.epochs {
            Some(e) => e * dataset_len.div_ceil(self.batch_size),
            None => self.max_steps,
        }
    }
}

/// `1 - cos(pred, target)` and its gradient with respect to `pred`.
pub fn cosine_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pred.len()];
    let loss = cosine_loss_into(pred, target, &mut grad, 1.0);
    (loss, grad)
}

/// Like [`cosine_loss`], writing `scale * dloss/dpred` into `grad`.
pub fn cosine_loss_into(pred: &[f64], target: &[f64], grad: &mut [f64], scale: f64) -> f64 {
    // one pass, three independent in-order sums
    let (mut dot, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(target) {
        dot += a * b;
        pp += a * a;
        tt += b * b;
    }
    let (pn, tn) = (pp.sqrt(), tt.sqrt());
    let raw = pn * tn;
    if raw > COSINE_EPS {
        let cos = dot / raw;
        // d cos / d pred = t / (|p||t|) - cos * p / |p|^2
        let a = 1.0 / raw;
        let b = cos / (pn * pn);
        for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
            *g = -scale * (a * t - b * p);
        }
        1.0 - cos
    } else {
        for (g, t) in grad.iter_mut().zip(target) {
            *g = -scale * t / COSINE_EPS;
        }
        1.0 - dot / COSINE_EPS
    }
}

/// Squared Euclidean distance and its gradient.
pub fn l2_loss_into(pred: &[f64], target: &[f64], grad: &mut [f64], scale: f64) -> f64 {
    let mut loss = 0.0;
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
        let d = p - t;
        loss += d * d;
        *g = scale * 2.0 * d;
    }
    loss
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_loss(a, b).0
}

impl LossKind {
    fn eval_into(self, pred: &[f64], target: &[f64], grad: &mut [f64], scale: f64) -> f64 {
        match self {
            LossKind::Cosine => cosine_loss_into(pred, target, grad, scale),
            LossKind::L2 => l2_loss_into(pred, target, grad, scale),
        }
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_grid(grid: &LatentGrid) -> Self {
        let shapes: Vec<usize> = grid.levels().iter().map(|l| l.features().len()).collect();
        Self::new(&shapes)
    }

    pub fn for_mlp(mlp: &Mlp) -> Self {
        let shapes: Vec<usize> = mlp.params().iter().map(|p| p.len()).collect();
        Self::new(&shapes)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, tensor: usize) -> &[f64] {
        &self.m[tensor]
    }

    pub fn second_moment(&self, tensor: usize) -> &[f64] {
        &self.v[tensor]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam step over every tensor in `params`.
pub fn adam_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            what: "adam tensor count",
            expected: state.m.len(),
            got: params.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::DimensionMismatch {
                what: "adam tensor shape",
                expected: state.m[i].len(),
                got: p.len().max(g.len()),
            });
        }
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            if m[j] == 0.0 {
                continue;
            }
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Mean loss and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub mean_loss: f64,
    pub grid: GridGradient,
    /// Present when decoder gradients were requested.
    pub decoder: Option<MlpGradients>,
}

/// Per-thread buffers reused across chunks; contents never outlive one chunk.
#[derive(Default)]
struct ChunkScratch {
    features: Vec<f64>,
    upstream: Vec<f64>,
    cache: BatchCache,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<ChunkScratch> = std::cell::RefCell::new(ChunkScratch::default());
}

struct ChunkPass {
    loss_sum: f64,
    d_features: Vec<f64>,
    stencils: Vec<Stencil>,
    decoder: Option<MlpGradients>,
}

fn check_dims(grid: &LatentGrid, decoder: &Mlp) -> Result<()> {
    if decoder.in_dim() != grid.encoded_dim() {
        return Err(Error::DimensionMismatch {
            what: "decoder input vs grid encoding",
            expected: grid.encoded_dim(),
            got: decoder.in_dim(),
        });
    }
    Ok(())
}

fn chunk_pass(
    grid: &LatentGrid,
    decoder: &Mlp,
    samples: &[&Sample],
    loss: LossKind,
    scale: f64,
    with_decoder: bool,
) -> Result<ChunkPass> {
    let d = grid.encoded_dim();
    let k = decoder.out_dim();
    let levels = grid.num_levels();
    let n = samples.len();
    let mut stencils = vec![Stencil::default(); n * levels];
    SCRATCH.with_borrow_mut(|scratch| {
        let ChunkScratch {
            features,
            upstream,
            cache,
        } = scratch;
        features.clear();
        features.resize(n * d, 0.0);
        for (i, s) in samples.iter().enumerate() {
            if s.y.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "sample embedding",
                    expected: k,
                    got: s.y.len(),
                });
            }
            grid.encode_into(
                &s.x,
                &mut features[i * d..(i + 1) * d],
                &mut stencils[i * levels..(i + 1) * levels],
            )?;
        }
        let pred = decoder.forward_batch(features, cache)?;
        upstream.clear();
        upstream.resize(n * k, 0.0);
        let mut loss_sum = 0.0;
        for (i, s) in samples.iter().enumerate() {
            loss_sum += loss.eval_into(
                &pred[i * k..(i + 1) * k],
                &s.y,
                &mut upstream[i * k..(i + 1) * k],
                scale,
            );
        }
        let mut dec_grads = with_decoder.then(|| MlpGradients::zeros_like(decoder));
        let mut d_features = Vec::new();
        decoder.backward_batch(cache, upstream, dec_grads.as_mut(), &mut d_features)?;
        Ok(ChunkPass {
            loss_sum,
            d_features,
            stencils,
            decoder: dec_grads,
        })
    })
}

/// Mean loss over `samples` and its gradients with respect to grid features
/// and (optionally) decoder parameters. Does not modify anything.
pub fn batch_gradients(
    grid: &LatentGrid,
    decoder: &Mlp,
    samples: &[&Sample],
    loss: LossKind,
    with_decoder: bool,
) -> Result<BatchGradients> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_dims(grid, decoder)?;
    let n = samples.len();
    let scale = 1.0 / n as f64;
    let passes = samples
        .par_chunks(CHUNK)
        .map(|chunk| chunk_pass(grid, decoder, chunk, loss, scale, with_decoder))
        .collect::<Result<Vec<_>>>()?;

    let d = grid.encoded_dim();
    let c = grid.feature_dim();
    let levels = grid.num_levels();
    let mut grid_grad = GridGradient::zeros_like(grid);
    let mut dec_grad = with_decoder.then(|| MlpGradients::zeros_like(decoder));
    let mut loss_sum = 0.0;
    for pass in &passes {
        loss_sum += pass.loss_sum;
        for (i, df) in pass.d_features.chunks_exact(d).enumerate() {
            for l in 0..levels {
                grid_grad.accumulate(l, &pass.stencils[i * levels + l], &df[l * c..(l + 1) * c]);
            }
        }
        if let (Some(total), Some(g)) = (dec_grad.as_mut(), pass.decoder.as_ref()) {
            total.add_assign(g);
        }
    }
    Ok(BatchGradients {
        mean_loss: loss_sum / n as f64,
        grid: grid_grad,
        decoder: dec_grad,
    })
}

/// Mean loss without gradients.
pub fn evaluate_loss(grid: &LatentGrid, decoder: &Mlp, samples: &[Sample], loss: LossKind) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut scratch = vec![0.0; decoder.out_dim()];
    for s in samples {
        let pred = decoder.decode(&grid.encode(&s.x)?)?;
        total += loss.eval_into(&pred, &s.y, &mut scratch, 1.0);
    }
    Ok(total / samples.len() as f64)
}

/// Mean cosine similarity between decoded and target embeddings.
pub fn mean_cosine(grid: &LatentGrid, decoder: &Mlp, samples: &[Sample]) -> Result<f64> {
    Ok(1.0 - evaluate_loss(grid, decoder, samples, LossKind::Cosine)?)
}

/// One optimizer step on explicit Adam states; `decoder_state = None` freezes θ.
#[allow(clippy::too_many_arguments)]
pub fn optimize_step(
    grid: &mut LatentGrid,
    grid_state: &mut AdamState,
    decoder: &mut Mlp,
    decoder_state: Option<(&mut AdamState, f64)>,
    samples: &[&Sample],
    lr_grid: f64,
    loss: LossKind,
    hp: AdamParams,
) -> Result<f64> {
    let grads = batch_gradients(grid, decoder, samples, loss, decoder_state.is_some())?;
    grid.mark_occupied_all(samples.iter().map(|s| &s.x))?;
    adam_update(&mut grid.params_mut(), &grads.grid.slices(), grid_state, lr_grid, hp)?;
    if let (Some((state, lr)), Some(g)) = (decoder_state, grads.decoder.as_ref()) {
        adam_update(&mut decoder.params_mut(), &g.slices(), state, lr, hp)?;
    }
    Ok(grads.mean_loss)
}

/// Owns the Adam state of one grid and one decoder.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    grid_state: AdamState,
    decoder_state: AdamState,
    steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, grid: &LatentGrid, decoder: &Mlp) -> Result<Self> {
        cfg.validate()?;
        check_dims(grid, decoder)?;
        Ok(Trainer {
            grid_state: AdamState::for_grid(grid),
            decoder_state: AdamState::for_mlp(decoder),
            cfg,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One forward/backward/update over `batch`; returns the pre-update mean loss.
    pub fn train_step(&mut self, grid: &mut LatentGrid, decoder: &mut Mlp, batch: &[Sample]) -> Result<f64> {
        let refs: Vec<&Sample> = batch.iter().collect();
        self.train_step_refs(grid, decoder, &refs)
    }

    pub fn train_step_refs(&mut self, grid: &mut LatentGrid, decoder: &mut Mlp, batch: &[&Sample]) -> Result<f64> {
        let hp = AdamParams::from(&self.cfg);
        let dec = (!self.cfg.freeze_decoder).then_some((&mut self.decoder_state, self.cfg.lr_decoder));
        let loss = optimize_step(
            grid,
            &mut self.grid_state,
            decoder,
            dec,
            batch,
            self.cfg.lr_grid,
            self.cfg.loss,
            hp,
        )?;
        self.steps += 1;
        Ok(loss)
    }
}

/// Seeded epoch-wise shuffler producing mini-batch index lists.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        EpochSampler {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Next batch of at most `batch_size` indices; batches never span epochs.
    pub fn next_batch(&mut self, batch_size: usize) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let out = &self.order[self.pos..end];
        self.pos = end;
        out
    }
}

/// Resumable shuffled mini-batch fit of one scene.
#[derive(Debug, Clone)]
pub struct SceneFit {
    trainer: Trainer,
    sampler: EpochSampler,
}

impl SceneFit {
    pub fn new(cfg: TrainConfig, grid: &LatentGrid, decoder: &Mlp, dataset_len: usize) -> Result<Self> {
        if dataset_len == 0 {
            return Err(Error::EmptyBatch);
        }
        let sampler = EpochSampler::new(dataset_len, cfg.seed);
        Ok(SceneFit {
            trainer: Trainer::new(cfg, grid, decoder)?,
            sampler,
        })
    }

    pub fn steps(&self) -> u64 {
        self.trainer.steps()
    }

    /// Runs `steps` optimizer steps and returns their losses.
    pub fn run(
        &mut self,
        grid: &mut LatentGrid,
        decoder: &mut Mlp,
        dataset: &[Sample],
        steps: usize,
    ) -> Result<Vec<f64>> {
        let bs = self.trainer.config().batch_size;
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<&Sample> = self.sampler.next_batch(bs).iter().map(|&i| &dataset[i]).collect();
            history.push(self.trainer.train_step_refs(grid, decoder, &batch)?);
        }
        Ok(history)
    }
}

/// Fits `grid` (and `decoder` unless frozen) to one scene's samples.
pub fn fit_scene(grid: &mut LatentGrid, decoder: &mut Mlp, dataset: &[Sample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let steps = cfg.steps_for(dataset.len());
    let mut fit = SceneFit::new(cfg.clone(), grid, decoder, dataset.len())?;
    fit.run(grid, decoder, dataset, steps)
}

/// One scene's training data together with the grid layout it should be fit with.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub grid: GridConfig,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub decoder: Mlp,
    pub grids: Vec<LatentGrid>,
    pub history: Vec<f64>,
}

/// Jointly fits one grid per scene and a single shared decoder, visiting the
/// scenes round-robin one mini-batch at a time.
pub fn pretrain_decoder(scenes: &[SceneData], mut decoder: Mlp, cfg: &TrainConfig) -> Result<Pretrained> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("pretraining needs at least one scene".into()));
    }
    let k = decoder.out_dim();
    for scene in scenes {
        if scene.samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(bad) = scene.samples.iter().find(|s| s.y.len() != k) {
            return Err(Error::InconsistentEmbeddingDim {
                expected: k,
                got: bad.y.len(),
            });
        }
    }
    let mut grids = scenes
        .iter()
        .map(|s| LatentGrid::new(s.grid.clone()))
        .collect::<Result<Vec<_>>>()?;
    for g in &grids {
        check_dims(g, &decoder)?;
    }
    let mut grid_states: Vec<AdamState> = grids.iter().map(AdamState::for_grid).collect();
    let mut decoder_state = AdamState::for_mlp(&decoder);
    let mut samplers: Vec<EpochSampler> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| EpochSampler::new(s.samples.len(), cfg.seed.wrapping_add(i as u64)))
        .collect();
    let total = match cfg.epochs {
        Some(_) => scenes.iter().map(|s| cfg.steps_for(s.samples.len())).sum(),
        None => cfg.max_steps,
    };
    let hp = AdamParams::from(cfg);
    let mut history = Vec::with_capacity(total);
    for step in 0..total {
        let i = step % scenes.len();
        let batch: Vec<&Sample> = samplers[i]
            .next_batch(cfg.batch_size)
            .iter()
            .map(|&j| &scenes[i].samples[j])
            .collect();
        let dec = (!cfg.freeze_decoder).then_some((&mut decoder_state, cfg.lr_decoder));
        history.push(optimize_step(
            &mut grids[i],
            &mut grid_states[i],
            &mut decoder,
            dec,
            &batch,
            cfg.lr_grid,
            cfg.loss,
            hp,
        )?);
    }
    Ok(Pretrained {
        decoder,
        grids,
        history,
    })
}
