//! Numeric kernels shared by the built-in models.
//!
//! Weight matrices over the hashed feature space are stored feature-major
//! (`w[j * width + k]`) so the handful of active rows of a sparse input are
//! contiguous. Gradients are exposed class-major to callers.

use serde::{Deserialize, Serialize};

use crate::features::SparseVector;

/// Per-unit supervision: an index or a full target distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Hard(usize),
    Soft(Vec<f64>),
}

impl Target {
    /// `probs - target`, i.e. the gradient of cross-entropy w.r.t. logits.
    pub fn residual(&self, probs: &[f64]) -> Vec<f64> {
        let mut r = probs.to_vec();
        match self {
            Target::Hard(c) => r[*c] -= 1.0,
            Target::Soft(t) => {
                for (ri, ti) in r.iter_mut().zip(t) {
                    *ri -= ti;
                }
            }
        }
        r
    }

    pub fn cross_entropy(&self, probs: &[f64]) -> f64 {
        match self {
            Target::Hard(c) => -probs[*c].max(f64::MIN_POSITIVE).ln(),
            Target::Soft(t) => t
                .iter()
                .zip(probs)
                .filter(|(ti, _)| **ti > 0.0)
                .map(|(ti, p)| -ti * p.max(f64::MIN_POSITIVE).ln())
                .sum(),
        }
    }
}

pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Softmax output over a sparse input: `logits = W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSoftmax {
    pub classes: usize,
    pub dim: usize,
    /// feature-major, `dim * classes`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SparseSoftmax {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        SparseSoftmax {
            classes,
            dim,
            weights: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn probs(&self, x: &SparseVector) -> Vec<f64> {
        let mut z = self.bias.clone();
        for &(j, v) in &x.entries {
            let row = &self.weights[j as usize * self.classes..(j as usize + 1) * self.classes];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += w * v;
            }
        }
        softmax_in_place(&mut z);
        z
    }

    /// One mini-batch step. `units` pairs each input with its residual
    /// computed at the current weights; `scale` is `lr / batch_size`.
    pub fn apply(&mut self, units: &[(&SparseVector, Vec<f64>)], scale: f64, decay: f64) {
        let c = self.classes;
        let mut touched: Vec<u32> = Vec::new();
        if decay > 0.0 {
            touched = units.iter().flat_map(|(x, _)| x.entries.iter().map(|e| e.0)).collect();
            touched.sort_unstable();
            touched.dedup();
        }
        for (x, r) in units {
            for &(j, v) in &x.entries {
                let row = &mut self.weights[j as usize * c..(j as usize + 1) * c];
                for (w, rc) in row.iter_mut().zip(r) {
                    *w -= scale * rc * v;
                }
            }
            for (b, rc) in self.bias.iter_mut().zip(r) {
                *b -= scale * rc;
            }
        }
        for j in touched {
            for w in &mut self.weights[j as usize * c..(j as usize + 1) * c] {
                *w -= decay * *w;
            }
        }
    }

    /// Class-major flattened weights (`classes * dim`).
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.classes * self.dim];
        for j in 0..self.dim {
            for c in 0..self.classes {
                out[c * self.dim + j] = self.weights[j * self.classes + c];
            }
        }
        out
    }

    pub fn set_flat_weights(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.classes * self.dim);
        for j in 0..self.dim {
            for c in 0..self.classes {
                self.weights[j * self.classes + c] = flat[c * self.dim + j];
            }
        }
    }
}

/// Class-major flattening of `residual ⊗ x`.
pub fn outer_sparse(residual: &[f64], x: &SparseVector) -> SparseVector {
    let mut entries = Vec::with_capacity(residual.len() * x.nnz());
    for (c, r) in residual.iter().enumerate() {
        if *r == 0.0 {
            continue;
        }
        for &(j, v) in &x.entries {
            entries.push(((c * x.dim) as u32 + j, r * v));
        }
    }
    SparseVector::from_unsorted(residual.len() * x.dim, entries)
}

pub fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}
