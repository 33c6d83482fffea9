//! Multilayer perceptron over a flat parameter vector.
//!
//! Parameters for layer `l` (mapping `n_in -> n_out`) are stored as an
//! `n_out x n_in` row-major weight block followed by `n_out` biases, layers in
//! order. Hidden layers use ReLU; the output layer is a softmax.

use std::ops::{Index, IndexMut};

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Number of scalars needed for a network with the given layer widths.
pub fn param_count(layers: &[usize]) -> usize {
    layers.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

/// A flat parameter (or update) vector tagged with the layer widths it
/// belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layers: Vec<usize>,
}

impl ParamVector {
    pub fn zeros(layers: &[usize]) -> Self {
        ParamVector {
            values: vec![0.0; param_count(layers)],
            layers: layers.to_vec(),
        }
    }

    pub fn from_values(layers: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected = param_count(layers);
        if values.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: values.len(),
            });
        }
        Ok(ParamVector {
            values,
            layers: layers.to_vec(),
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(layers: &[usize], rng: &mut impl Rng) -> Self {
        let mut values = Vec::with_capacity(param_count(layers));
        for w in layers.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        ParamVector {
            values,
            layers: layers.to_vec(),
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(&self.layers)
    }

    /// Builds a vector of the same shape from raw values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::from_values(&self.layers, values)
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            layers: self.layers.clone(),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Weight block and bias slice of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, n_in, n_out) = self.layer_offset(l);
        let w_end = start + n_out * n_in;
        (&self.values[start..w_end], &self.values[w_end..w_end + n_out])
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let start = param_count(&self.layers[..=l]);
        (start, self.layers[l], self.layers[l + 1])
    }

    /// Splits into one `(weights, biases)` pair per layer.
    pub fn unflatten(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..self.layers.len().saturating_sub(1))
            .map(|l| {
                let (w, b) = self.layer(l);
                (w.to_vec(), b.to_vec())
            })
            .collect()
    }

    pub fn flatten(layers: &[usize], blocks: &[(Vec<f64>, Vec<f64>)]) -> Result<ParamVector> {
        let values = blocks
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect();
        ParamVector::from_values(layers, values)
    }

    /// Checkpoint encoding: `u32` layer count, `u32` widths, then `f32`
    /// values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.layers.len() + 4 * self.len());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for &w in &self.layers {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamVector> {
        let word = |i: usize| -> Result<[u8; 4]> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| [b[0], b[1], b[2], b[3]])
                .ok_or_else(|| Error::CorruptPayload(format!("checkpoint truncated at word {i}")))
        };
        let n_layers = u32::from_le_bytes(word(0)?) as usize;
        let layers = (0..n_layers)
            .map(|i| word(1 + i).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = param_count(&layers);
        if bytes.len() != 4 * (1 + n_layers + n) {
            return Err(Error::CorruptPayload(format!(
                "checkpoint holds {} bytes, expected {}",
                bytes.len(),
                4 * (1 + n_layers + n)
            )));
        }
        let values = (0..n)
            .map(|i| word(1 + n_layers + i).map(|b| f64::from(f32::from_le_bytes(b))))
            .collect::<Result<Vec<_>>>()?;
        ParamVector::from_values(&layers, values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// Layer widths for `input -> hidden (ReLU) -> classes (softmax)`.
pub fn default_layers(input: usize, classes: usize) -> Vec<usize> {
    vec![input, DEFAULT_HIDDEN, classes]
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Runs the network; returns pre-activations of the output layer and the
/// post-activation values of every layer (index 0 is the input).
fn forward_trace(omega: &ParamVector, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let layers = omega.layers();
    if x.len() != layers[0] {
        return Err(Error::Shape {
            expected: layers[0],
            actual: x.len(),
        });
    }
    let n_layers = layers.len() - 1;
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(x.to_vec());
    let mut logits = Vec::new();
    for l in 0..n_layers {
        let (w, b) = omega.layer(l);
        let input = &acts[l];
        let n_in = layers[l];
        let mut z: Vec<f64> = b.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            *zo += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        }
        if l + 1 == n_layers {
            logits = z;
        } else {
            acts.push(z.into_iter().map(|v| v.max(0.0)).collect());
        }
    }
    Ok((logits, acts))
}

/// Class probabilities for one input.
pub fn forward(omega: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let (mut z, _) = forward_trace(omega, x)?;
    softmax_in_place(&mut z);
    Ok(z)
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// One training example with a mask weight in `{0, 1}`.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

/// Weighted mean cross-entropy over the unmasked examples and its gradient.
/// A fully masked batch yields `(0, 0)`.
pub fn loss_and_grad(omega: &ParamVector, batch: &[Example<'_>]) -> Result<(f64, ParamVector)> {
    let layers = omega.layers();
    let n_layers = layers.len() - 1;
    let mut grad = omega.zeros_like();
    let total_weight: f64 = batch.iter().map(|e| e.weight).sum();
    if total_weight <= 0.0 {
        return Ok((0.0, grad));
    }
    let classes = layers[n_layers];
    let mut loss = 0.0;
    for ex in batch.iter().filter(|e| e.weight > 0.0) {
        if ex.label >= classes {
            return Err(Error::Shape {
                expected: classes,
                actual: ex.label,
            });
        }
        let (logits, acts) = forward_trace(omega, ex.features)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += ex.weight * (lse - logits[ex.label]);

        let scale = ex.weight / total_weight;
        // dL/dz at the output: softmax - onehot
        let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp() * scale).collect();
        delta[ex.label] -= scale;

        for l in (0..n_layers).rev() {
            let n_in = layers[l];
            let n_out = layers[l + 1];
            let input = &acts[l];
            let (start, _, _) = omega.layer_offset(l);
            let g = grad.as_mut_slice();
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut g[start + o * n_in..start + (o + 1) * n_in];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
                g[start + n_out * n_in + o] += d;
            }
            if l > 0 {
                let (w, _) = omega.layer(l);
                let mut prev = vec![0.0; n_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
                // ReLU gate: the stored activation is positive iff the unit fired.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    Ok((loss / total_weight, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffer: ParamVector,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(like: &ParamVector, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            momentum_buffer: like.zeros_like(),
            learning_rate,
            momentum,
        }
    }
}

/// `buf = momentum * buf + grad; omega -= lr * buf`.
pub fn sgd_step(omega: &mut ParamVector, grad: &ParamVector, state: &mut OptimizerState) -> Result<()> {
    omega.check_len(grad)?;
    omega.check_len(&state.momentum_buffer)?;
    let mu = state.momentum;
    let lr = state.learning_rate;
    let buf = state.momentum_buffer.as_mut_slice();
    for ((w, b), g) in omega.values.iter_mut().zip(buf.iter_mut()).zip(&grad.values) {
        *b = mu * *b + g;
        *w -= lr * *b;
    }
    Ok(())
}
