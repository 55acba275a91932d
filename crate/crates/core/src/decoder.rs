//! Feed-forward decoder from latent grid features to the target embedding space.
//!
//! Hidden layers use a rectifier, the output layer is linear. Weights are
//! row-major `(out_dim, in_dim)`. Two code paths exist: a per-sample one that
//! keeps an explicit [`ForwardCache`], and a batched one built on GEMM used by
//! the training loop. They compute the same function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gemm::{dgemm, Store};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("layer dims must be positive".into()));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                what: "layer weights",
                expected: in_dim * out_dim,
                got: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                what: "layer bias",
                expected: out_dim,
                got: bias.len(),
            });
        }
        Ok(Layer {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
}

/// Multilayer perceptron: rectifier on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::DimensionMismatch {
                    what: "layer chain",
                    expected: w[0].out_dim,
                    got: w[1].in_dim,
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// All-zero network with layer widths `dims[0] -> dims[1] -> ...`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer dims {dims:?}")));
        }
        Self::from_layers(dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())
    }

    /// He-uniform weights (`U(-sqrt(6/in), sqrt(6/in))`), zero biases.
    pub fn init(seed: u64, hidden: &[usize], in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let mut mlp = Self::zeros(&dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut mlp.layers {
            let limit = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(mlp)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Layer widths including input and output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in layer order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder input",
                expected: self.in_dim(),
                got: f.len(),
            });
        }
        Ok(())
    }

    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(f)?.output().to_vec())
    }

    /// Forward pass that records every layer's activation for [`Mlp::backward`].
    pub fn forward(&self, f: &[f64]) -> Result<ForwardCache> {
        self.check_input(f)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(f.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let mut out = layer.bias.clone();
            for (o, row) in out.iter_mut().zip(layer.weights.chunks_exact(layer.in_dim)) {
                *o += row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            }
            if i != last {
                relu_in_place(&mut out);
            }
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    /// Reverse-mode gradients for one cached sample: `(dL/dtheta, dL/df)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(MlpGradients, Vec<f64>)> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::MissingForwardCache);
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder upstream gradient",
                expected: self.out_dim(),
                got: upstream.len(),
            });
        }
        let mut grads = MlpGradients::zeros_like(self);
        let mut delta = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let (gw, gb) = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                gb[o] += d;
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (d, row) in delta.iter().zip(layer.weights.chunks_exact(layer.in_dim)) {
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            if i > 0 {
                // rectifier subgradient at 0 is 0
                for (p, a) in prev.iter_mut().zip(input) {
                    if !(*a > 0.0) {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    /// Batched forward over `n` row-major inputs; activations are kept in `cache`.
    pub fn forward_batch<'c>(&self, inputs: &[f64], cache: &'c mut BatchCache) -> Result<&'c [f64]> {
        let in_dim = self.in_dim();
        if !inputs.len().is_multiple_of(in_dim) {
            return Err(Error::DimensionMismatch {
                what: "decoder batch input",
                expected: in_dim,
                got: inputs.len() % in_dim,
            });
        }
        let n = inputs.len() / in_dim;
        cache.n = n;
        cache.activations.resize_with(self.layers.len() + 1, Vec::new);
        cache.activations[0].clear();
        cache.activations[0].extend_from_slice(inputs);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (head, tail) = cache.activations.split_at_mut(i + 1);
            let x = &head[i];
            let out = &mut tail[0];
            // every entry is overwritten, so a reused buffer only needs its length set
            out.resize(n * layer.out_dim, 0.0);
            // out (n x out) = x (n x in) * W^T (in x out) + b
            dgemm(
                n,
                layer.in_dim,
                layer.out_dim,
                x,
                (layer.in_dim as isize, 1),
                &layer.weights,
                (1, layer.in_dim as isize),
                out,
                Store::Bias {
                    bias: &layer.bias,
                    relu: i != last,
                },
            );
        }
        Ok(&cache.activations[self.layers.len()])
    }

    /// Batched backward. Parameter gradients are accumulated into `grads` when
    /// given; input gradients are written to `d_input` (`n x in_dim`).
    pub fn backward_batch(
        &self,
        cache: &mut BatchCache,
        upstream: &[f64],
        mut grads: Option<&mut MlpGradients>,
        d_input: &mut Vec<f64>,
    ) -> Result<()> {
        let n = cache.n;
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::MissingForwardCache);
        }
        if upstream.len() != n * self.out_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder batch upstream",
                expected: n * self.out_dim(),
                got: upstream.len(),
            });
        }
        let mut delta = std::mem::take(&mut cache.delta);
        let mut prev = std::mem::take(&mut cache.prev);
        delta.clear();
        delta.extend_from_slice(upstream);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = &mut g.layers[i];
                // gW (out x in) += delta^T (out x n) * input (n x in)
                dgemm(
                    out_dim,
                    n,
                    in_dim,
                    &delta,
                    (1, out_dim as isize),
                    input,
                    (in_dim as isize, 1),
                    gw,
                    Store::Add,
                );
                for row in delta.chunks_exact(out_dim) {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            // prev (n x in) = delta (n x out) * W (out x in)
            // prev (n x in) = delta (n x out) * W (out x in), masked by the
            // rectifier of the layer below
            prev.resize(n * in_dim, 0.0);
            dgemm(
                n,
                out_dim,
                in_dim,
                &delta,
                (out_dim as isize, 1),
                &layer.weights,
                (in_dim as isize, 1),
                &mut prev,
                if i > 0 { Store::Gated(input) } else { Store::Set },
            );
            std::mem::swap(&mut delta, &mut prev);
        }
        d_input.clear();
        d_input.extend_from_slice(&delta);
        cache.delta = delta;
        cache.prev = prev;
        Ok(())
    }
}

/// Activations of one per-sample forward pass; `activations[0]` is the input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Reusable activation buffers for [`Mlp::forward_batch`].
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    n: usize,
    activations: Vec<Vec<f64>>,
    // backward scratch, kept to avoid reallocating per batch
    delta: Vec<f64>,
    prev: Vec<f64>,
}

impl BatchCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Gradient buffers shaped like an [`Mlp`]'s `(weights, bias)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpGradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for (w, b) in &mut self.layers {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, c)| *a += c);
            b.iter_mut().zip(ob).for_each(|(a, c)| *a += c);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.layers[layer].0
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.layers[layer].1
    }

    /// Gradient tensors in the same order as [`Mlp::params`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if !(*x > 0.0) {
            *x = 0.0;
        }
    }
}
