//! Dense feed-forward network with 32-bit parameters and 64-bit arithmetic.
//!
//! `forward` returns a [`ForwardCache`] holding every pre-activation; the
//! cache is stamped with the parameter generation it was computed under and
//! `backward` refuses caches from an older generation.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HeadError;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer; weights are row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    pub(crate) weights: Vec<f32>,
    pub(crate) bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
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

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn weight(&self, row: usize, col: usize) -> f32 {
        self.weights[row * self.in_dim + col]
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, &b)| {
                    b as f64
                        + row
                            .iter()
                            .zip(input)
                            .map(|(&w, &x)| w as f64 * x)
                            .sum::<f64>()
                }),
        );
    }
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    input: Vec<f64>,
    /// Pre-activation of every layer; the last entry is the network output.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Hidden-layer pre-activations (output layer excluded).
    pub fn hidden_pre_activations(&self) -> &[Vec<f64>] {
        &self.pre[..self.pre.len().saturating_sub(1)]
    }

    /// Smallest hidden pre-activation magnitude; `inf` for a single layer.
    pub fn min_hidden_magnitude(&self) -> f64 {
        self.hidden_pre_activations()
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    /// True when both passes put every hidden unit on the same side of zero.
    pub fn same_activation_pattern(&self, other: &ForwardCache) -> bool {
        self.hidden_pre_activations()
            .iter()
            .zip(other.hidden_pre_activations())
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0)))
    }
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            weights: mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.slices_mut().for_each(|s| s.fill(0.0));
    }

    /// Slices in parameter order: w0, b0, w1, b1, ...
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn scale(&mut self, c: f64) {
        self.slices_mut().flatten().for_each(|g| *g *= c);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().into_iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().into_iter().flatten().all(|g| g.is_finite())
    }
}

/// Parameter gradients plus the gradient with respect to the input.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Gradients,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation && self.layers == other.layers
    }
}

impl Mlp {
    /// Network with all-zero parameters. `dims` lists every layer width,
    /// input first.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self, HeadError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(HeadError::Architecture(format!("invalid layer dims {dims:?}")));
        }
        Ok(Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            activation,
            generation: next_generation(),
        })
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, HeadError> {
        let mut mlp = Mlp::zeros(dims, activation)?;
        for layer in &mut mlp.layers {
            let bound = (6.0 / layer.in_dim as f64).sqrt() as f32;
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-bound..bound));
        }
        Ok(mlp)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable layer access. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter slices in order w0, b0, w1, b1, ... Invalidates caches.
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.generation = next_generation();
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().into_iter().flatten().all(|p| p.is_finite())
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache, HeadError> {
        if input.len() != self.input_dim() {
            return Err(HeadError::Dimension {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut act = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.forward(&act, &mut z);
            if i < last {
                act.clear();
                act.extend(z.iter().map(|&v| self.activation.apply(v)));
            }
            pre.push(z);
        }
        Ok(ForwardCache {
            generation: self.generation,
            input: input.to_vec(),
            pre,
        })
    }

    /// Output only, for inference.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, HeadError> {
        let mut cache = self.forward(input)?;
        Ok(cache.pre.pop().unwrap_or_default())
    }

    fn check_cache(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(), HeadError> {
        if cache.generation != self.generation || cache.pre.len() != self.layers.len() {
            return Err(HeadError::StaleCache);
        }
        if upstream.len() != self.output_dim() {
            return Err(HeadError::Dimension {
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        Ok(())
    }

    /// Full backward pass: parameter gradients and input gradient.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Backward, HeadError> {
        let mut params = Gradients::zeros_like(self);
        let input = self.backprop(cache, upstream, 1.0, &mut params, true)?;
        Ok(Backward {
            params,
            input: input.unwrap_or_default(),
        })
    }

    /// Adds `scale` times the parameter gradient into `grads`.
    pub fn accumulate(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<(), HeadError> {
        self.backprop(cache, upstream, scale, grads, false).map(|_| ())
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        scale: f64,
        grads: &mut Gradients,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>, HeadError> {
        self.check_cache(cache, upstream)?;
        let mut delta: Vec<f64> = upstream.iter().map(|g| g * scale).collect();
        let mut input_grad = None;
        let mut prev_act = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let below: &[f64] = if l == 0 {
                &cache.input
            } else {
                prev_act.clear();
                prev_act.extend(cache.pre[l - 1].iter().map(|&z| self.activation.apply(z)));
                &prev_act
            };
            let gw = &mut grads.weights[l];
            for (row, &d) in gw.chunks_exact_mut(layer.in_dim).zip(&delta) {
                if d != 0.0 {
                    row.iter_mut().zip(below).for_each(|(g, &a)| *g += d * a);
                }
            }
            grads.biases[l].iter_mut().zip(&delta).for_each(|(g, &d)| *g += d);

            if l == 0 && !want_input {
                break;
            }
            let mut next = vec![0.0; layer.in_dim];
            for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                if d != 0.0 {
                    next.iter_mut().zip(row).for_each(|(n, &w)| *n += w as f64 * d);
                }
            }
            if l == 0 {
                input_grad = Some(next);
                break;
            }
            for (n, &z) in next.iter_mut().zip(&cache.pre[l - 1]) {
                *n *= self.activation.derivative(z);
            }
            delta = next;
        }
        Ok(input_grad)
    }
}
