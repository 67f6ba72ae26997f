//! Two-hidden-layer tanh MLP with hand-written reverse mode.
//!
//! Parameters live in one flat vector laid out as
//! `W₁ (h×in) | b₁ | W₂ (h×h) | b₂ | W₃ (out×h) | b₃`, row-major.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub theta: Vec<f64>,
}

/// Activations kept by [`MlpParams::forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl MlpParams {
    pub fn n_params(n_in: usize, n_hidden: usize, n_out: usize) -> usize {
        n_hidden * n_in + n_hidden + n_hidden * n_hidden + n_hidden + n_out * n_hidden + n_out
    }

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_hidden,
            n_out,
            theta: vec![0.0; Self::n_params(n_in, n_hidden, n_out)],
        }
    }

    /// Glorot-uniform weights, zero biases; the output layer is scaled by `out_scale`.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_hidden: usize, n_out: usize, out_scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_in, n_hidden, n_out);
        let o = p.offsets();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize, scale: f64, theta: &mut [f64]| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
            for w in &mut theta[range] {
                *w = rng.random_range(-a..a);
            }
        };
        fill(0..o.b1, n_in, n_hidden, 1.0, &mut p.theta);
        fill(o.w2..o.b2, n_hidden, n_hidden, 1.0, &mut p.theta);
        fill(o.w3..o.b3, n_hidden, n_out, out_scale, &mut p.theta);
        p
    }

    fn offsets(&self) -> Offsets {
        let (i, h, o) = (self.n_in, self.n_hidden, self.n_out);
        let b1 = h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Offsets {
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + o,
        }
    }

    /// Output-layer bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.theta[o.b3..o.end]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache), AgentError> {
        if x.len() != self.n_in {
            return Err(AgentError::ShapeMismatch {
                expected: self.n_in,
                got: x.len(),
            });
        }
        let o = self.offsets();
        let t = &self.theta;
        let h1 = dense(&t[..o.b1], &t[o.b1..o.w2], x, true);
        let h2 = dense(&t[o.w2..o.b2], &t[o.b2..o.w3], &h1, true);
        let y = dense(&t[o.w3..o.b3], &t[o.b3..o.end], &h2, false);
        Ok((
            y,
            MlpCache {
                x: x.to_vec(),
                h1,
                h2,
            },
        ))
    }

    /// Gradient of `dy·y` with respect to the flat parameters and the input.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut grad = vec![0.0; self.theta.len()];
        let dx = self.backward_into(cache, dy, &mut grad);
        (grad, dx)
    }

    /// Like [`MlpParams::backward`] but accumulates into `grad`.
    pub fn backward_into(&self, cache: &MlpCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(dy.len(), self.n_out);
        let o = self.offsets();
        let t = &self.theta;
        let dh2 = dense_back(&t[o.w3..o.b3], &cache.h2, dy, &mut grad[o.w3..o.end], o.b3 - o.w3);
        let dz2: Vec<f64> = dh2.iter().zip(&cache.h2).map(|(g, h)| g * (1.0 - h * h)).collect();
        let dh1 = dense_back(&t[o.w2..o.b2], &cache.h1, &dz2, &mut grad[o.w2..o.w3], o.b2 - o.w2);
        let dz1: Vec<f64> = dh1.iter().zip(&cache.h1).map(|(g, h)| g * (1.0 - h * h)).collect();
        dense_back(&t[..o.b1], &cache.x, &dz1, &mut grad[..o.w2], o.b1)
    }
}

/// `act(W·x + b)` with `W` row-major `(len(b) × len(x))`.
fn dense(w: &[f64], b: &[f64], x: &[f64], tanh: bool) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let z = w[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias;
            if tanh {
                z.tanh()
            } else {
                z
            }
        })
        .collect()
}

/// Accumulates `∂/∂W` and `∂/∂b` into `grad` (weights then biases, split at
/// `w_len`) and returns the gradient with respect to `x`.
fn dense_back(w: &[f64], x: &[f64], dz: &[f64], grad: &mut [f64], w_len: usize) -> Vec<f64> {
    let n = x.len();
    let (gw, gb) = grad.split_at_mut(w_len);
    let mut dx = vec![0.0; n];
    for (r, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[r] += d;
        let row = &w[r * n..(r + 1) * n];
        for c in 0..n {
            gw[r * n + c] += d * x[c];
            dx[c] += d * row[c];
        }
    }
    dx
}
