//! Fully-connected layer, ReLU and L2 normalization on flat vectors.

use rand::Rng;

use crate::error::{Result, TcnnError};

use super::conv3d::gaussian;

#[derive(Debug, Clone)]
pub struct FCLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FCGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FCLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        FCLayer {
            out_dim,
            in_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weights[i * dim + i] = 1.0;
        }
        l
    }

    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(out_dim, in_dim);
        let std = (2.0 / in_dim as f64).sqrt();
        for w in l.weights.iter_mut() {
            *w = gaussian(rng) * std;
        }
        l
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(TcnnError::ShapeMismatch(format!(
                "fc expects input dim {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut y = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0f64;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            y.push(acc + self.bias[o]);
        }
        Ok(y)
    }

    /// Returns grad wrt input; accumulates parameter grads into `grads`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut FCGrads) -> Result<Vec<f64>> {
        if x.len() != self.in_dim || grad_out.len() != self.out_dim {
            return Err(TcnnError::ShapeMismatch(format!(
                "fc backward dims: x {} (want {}), grad_out {} (want {})",
                x.len(),
                self.in_dim,
                grad_out.len(),
                self.out_dim
            )));
        }
        let mut gx = vec![0.0f64; self.in_dim];
        for o in 0..self.out_dim {
            let g = grad_out[o];
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                gx[i] += row[i] * g;
                grow[i] += x[i] * g;
            }
            grads.bias[o] += g;
        }
        Ok(gx)
    }

    pub fn zero_grads(&self) -> FCGrads {
        FCGrads {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Mask comes from the forward input; the derivative at exactly 0 is 0.
pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// In-place ReLU over a buffer (used on whole feature cubes).
pub fn relu_forward_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// In-place mask using the post-activation values (y > 0 iff x > 0).
pub fn relu_backward_from_output(y: &[f64], grad: &mut [f64]) {
    for (g, &v) in grad.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Scales a vector to unit Euclidean norm. The zero vector maps to itself.
pub fn l2norm_forward(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        (x.to_vec(), 0.0)
    } else {
        (x.iter().map(|v| v / norm).collect(), norm)
    }
}

/// Jacobian-vector product of the normalization: g/n - x (x.g)/n^3.
/// A zero input carries zero gradient.
pub fn l2norm_backward(x: &[f64], norm: f64, grad_out: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; x.len()];
    }
    let dot: f64 = x.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    let n3 = norm * norm * norm;
    x.iter()
        .zip(grad_out)
        .map(|(&xi, &gi)| gi / norm - xi * dot / n3)
        .collect()
}
