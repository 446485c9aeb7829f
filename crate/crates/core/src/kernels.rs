// SPDX-License-Identifier: Apache-2.0

//! Dense f32 kernels shared by the backbone and the chips.
//!
//! Storage is f32; dot products and loss sums accumulate in f64 and are
//! rounded once on store.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Added to the probability inside the log of [`nll_loss`].
pub const NLL_EPS: f64 = 1e-12;

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense f32 vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f32>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn new(data: Vec<f32>) -> Self {
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; ties resolve to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

impl From<Vec<f32>> for Vector {
    fn from(data: Vec<f32>) -> Self {
        Self { data }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.data[i]
    }
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// `out[i] = sum_j m[i][j] * v[j]`.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    ensure!(
        m.cols == v.dim(),
        "matvec: matrix has {} columns, vector has dim {}",
        m.cols,
        v.dim()
    );
    let out = (0..m.rows)
        .map(|i| dot_f64(m.row(i), v.as_slice()) as f32)
        .collect();
    Ok(Vector::new(out))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &Vector) -> Result<Vector> {
    ensure!(v.dim() >= 1, "softmax of an empty vector");
    ensure!(v.is_finite(), "softmax input is not finite");
    Ok(Vector::new(softmax_slice(v.as_slice())))
}

pub(crate) fn softmax_slice(v: &[f32]) -> Vec<f32> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v.iter().map(|&x| f64::from(x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / sum) as f32).collect()
}

pub fn relu(v: &Vector) -> Vector {
    Vector::new(v.as_slice().iter().map(|&x| x.max(0.0)).collect())
}

/// `-ln(probs[label] + NLL_EPS)`, floored at zero.
pub fn nll_loss(probs: &Vector, label: usize) -> Result<f64> {
    ensure!(
        label < probs.dim(),
        "label {label} out of range for {} classes",
        probs.dim()
    );
    // At p = 1 the epsilon would make the loss -1e-12; clamp to keep it
    // non-negative.
    Ok((-(f64::from(probs[label]) + NLL_EPS).ln()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update on a flat parameter buffer. `step` is the
/// 1-based step count used for bias correction.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamMoments,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && state.m.len() == params.len() && state.v.len() == params.len(),
        "adam: shape mismatch (params {}, grads {}, moments {}/{})",
        params.len(),
        grads.len(),
        state.m.len(),
        state.v.len()
    );
    ensure!(step >= 1, "adam: step count starts at 1");
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..params.len() {
        let g = f64::from(grads[i]);
        let m = cfg.beta1 * f64::from(state.m[i]) + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * f64::from(state.v[i]) + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        params[i] = (f64::from(params[i]) - update) as f32;
    }
    Ok(())
}
