//! Dense ReLU tower with a two-logit softmax head.

use rand::Rng;

use super::linalg::gemm;
use crate::error::{Error, Result};

/// Output probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Layer widths used by every tower unless overridden.
pub const DEFAULT_DIMS: [usize; 4] = [360, 200, 80, 2];

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut d = Self::zeros(in_dim, out_dim);
        for w in &mut d.weights {
            *w = rng.gen_range(-limit..=limit);
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTower {
    layers: Vec<Dense>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Shape("a tower needs at least an input and an output width".into()));
    }
    if *dims.last().unwrap() != 2 {
        return Err(Error::Shape("the output layer must have exactly 2 logits".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Shape("layer widths must be positive".into()));
    }
    Ok(())
}

impl MlpTower {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let mut dims: Vec<usize> = layers.iter().map(|l| l.in_dim).collect();
        dims.extend(layers.last().map(|l| l.out_dim));
        check_dims(&dims)?;
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!("layer {i} output does not feed layer {}", i + 1)));
            }
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Shape("layer buffers do not match declared widths".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.in_dim).collect();
        d.push(self.layers.last().map_or(0, |l| l.out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, BatchCache)> {
        let mut cache = BatchCache::default();
        self.forward_batch(x, 1, &mut cache)?;
        Ok((cache.probs[0], cache))
    }

    /// Forward pass over `batch` row-major inputs; probabilities land in
    /// `cache.probs`.
    pub fn forward_batch(&self, x: &[f64], batch: usize, cache: &mut BatchCache) -> Result<()> {
        let in_dim = self.input_dim();
        if x.len() != batch * in_dim {
            return Err(Error::Shape(format!(
                "input has {} values, expected {batch} x {in_dim}",
                x.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation);
        }
        let n_layers = self.layers.len();
        cache.batch = batch;
        cache.acts.resize_with(n_layers, Vec::new);
        cache.pre.resize_with(n_layers, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = &mut cache.pre[l];
            pre.clear();
            pre.reserve(batch * layer.out_dim);
            for _ in 0..batch {
                pre.extend_from_slice(&layer.bias);
            }
            gemm(
                batch,
                layer.in_dim,
                layer.out_dim,
                &cache.acts[l],
                false,
                &layer.weights,
                true,
                1.0,
                pre,
            );
            if l + 1 < n_layers {
                let next = &mut cache.acts[l + 1];
                next.clear();
                next.extend(cache.pre[l].iter().map(|&v| v.max(0.0)));
            }
        }
        let logits = &cache.pre[n_layers - 1];
        cache.raw.clear();
        cache.probs.clear();
        for b in 0..batch {
            let diff = logits[2 * b + 1] - logits[2 * b];
            if !diff.is_finite() {
                return Err(Error::NonFiniteActivation);
            }
            let p = sigmoid(diff);
            cache.raw.push(p);
            cache.probs.push(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `grads` given `d_prob[b] = dL/dp_b`
    /// for the clamped probabilities of the cached batch. When `d_input` is
    /// given it receives `dL/dx` (overwritten).
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        d_prob: &[f64],
        grads: &mut MlpGrads,
        d_input: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        let batch = cache.batch;
        assert_eq!(d_prob.len(), batch, "one upstream gradient per sample");
        let n_layers = self.layers.len();
        let mut dz: Vec<f64> = Vec::with_capacity(batch * 2);
        for b in 0..batch {
            let p = cache.raw[b];
            let live = (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
            let g = if live { d_prob[b] * p * (1.0 - p) } else { 0.0 };
            dz.push(-g);
            dz.push(g);
        }
        let mut da: Vec<f64> = Vec::new();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let lg = &mut grads.layers[l];
            gemm(
                layer.out_dim,
                batch,
                layer.in_dim,
                &dz,
                true,
                &cache.acts[l],
                false,
                1.0,
                &mut lg.weights,
            );
            for row in dz.chunks_exact(layer.out_dim) {
                for (g, d) in lg.bias.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 && d_input.is_none() {
                break;
            }
            da.clear();
            da.resize(batch * layer.in_dim, 0.0);
            gemm(batch, layer.out_dim, layer.in_dim, &dz, false, &layer.weights, false, 0.0, &mut da);
            if l > 0 {
                for (d, &pre) in da.iter_mut().zip(&cache.pre[l - 1]) {
                    if pre <= 0.0 {
                        *d = 0.0;
                    }
                }
                std::mem::swap(&mut dz, &mut da);
            }
        }
        if let Some(out) = d_input {
            std::mem::swap(out, &mut da);
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        Ok(())
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    batch: usize,
    /// Input of each layer.
    acts: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
    raw: Vec<f64>,
    /// Clamped class-1 probabilities.
    pub probs: Vec<f64>,
}

impl BatchCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> &[f64] {
        self.pre.last().map_or(&[], |v| v.as_slice())
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn for_tower(tower: &MlpTower) -> Self {
        Self {
            layers: tower
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}
