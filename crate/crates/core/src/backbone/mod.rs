// SPDX-License-Identifier: Apache-2.0

//! A small pre-norm decoder-only transformer.
//!
//! Each block is `x += Attn(LN1(x)); x += FFN(LN2(x))` with causal multi-head
//! attention and a GELU feed-forward. The residual stream after block `l` at
//! the final token position is the hidden state chips read. No final norm is
//! applied to it.

mod forward;
mod io;
pub(crate) mod ops;
mod pretrain;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::kernels::Vector;

pub(crate) use io::{read_config, read_tensors, write_config, write_tensors, CONFIG_BYTES};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainOutcome};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_layers >= 1, "n_layers must be at least 1");
        ensure!(self.d_model >= 1, "d_model must be at least 1");
        ensure!(self.n_heads >= 1, "n_heads must be at least 1");
        ensure!(
            self.d_model % self.n_heads == 0,
            "d_model {} is not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(self.d_ff >= 1, "d_ff must be at least 1");
        ensure!(self.vocab_size >= 2, "vocab_size must be at least 2");
        ensure!(self.max_seq_len >= 1, "max_seq_len must be at least 1");
        Ok(())
    }

    /// Parameter count of one transformer block.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        4 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d)
    }

    pub fn embedding_param_count(&self) -> usize {
        (self.vocab_size + self.max_seq_len) * self.d_model
    }

    pub fn param_count(&self) -> usize {
        self.embedding_param_count() + self.n_layers * self.layer_param_count()
    }
}

/// Parameters of one pre-norm block. Linear weights are `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Vec<f32>,
    pub bq: Vec<f32>,
    pub wk: Vec<f32>,
    pub bk: Vec<f32>,
    pub wv: Vec<f32>,
    pub bv: Vec<f32>,
    pub wo: Vec<f32>,
    pub bo: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w_up: Vec<f32>,
    pub b_up: Vec<f32>,
    pub w_down: Vec<f32>,
    pub b_down: Vec<f32>,
}

impl LayerWeights {
    fn zeros(cfg: &BackboneConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Self {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_up: vec![0.0; f * d],
            b_up: vec![0.0; f],
            w_down: vec![0.0; d * f],
            b_down: vec![0.0; d],
        }
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> [&[f32]; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f32>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }
}

/// Frozen backbone parameters. Cloning is the only way to obtain a mutable
/// copy; nothing in the chip pipeline takes `&mut BackboneWeights`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    config: BackboneConfig,
    tok_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    layers: Vec<LayerWeights>,
}

impl BackboneWeights {
    /// Seeded truncated-normal init (std 0.02, cut at 2 sigma); LayerNorm gains
    /// are one and all biases zero.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| truncated_normal(&mut rng)).collect() };
        let tok_emb = draw(config.vocab_size * config.d_model);
        let pos_emb = draw(config.max_seq_len * config.d_model);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut lw = LayerWeights::zeros(&config);
            lw.wq = draw(lw.wq.len());
            lw.wk = draw(lw.wk.len());
            lw.wv = draw(lw.wv.len());
            lw.wo = draw(lw.wo.len());
            lw.w_up = draw(lw.w_up.len());
            lw.w_down = draw(lw.w_down.len());
            layers.push(lw);
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn token_embedding(&self) -> &[f32] {
        &self.tok_emb
    }

    pub fn position_embedding(&self) -> &[f32] {
        &self.pos_emb
    }

    /// All tensors in serialization order: token embedding, position
    /// embedding, then each block's tensors.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the canonical weight-file bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Copy holding the embeddings and blocks `0..=layer` only.
    pub fn truncated(&self, layer: usize) -> Result<Self> {
        ensure!(
            layer < self.n_layers(),
            "layer {layer} out of range for a {}-layer backbone",
            self.n_layers()
        );
        Ok(Self {
            config: BackboneConfig {
                n_layers: layer + 1,
                ..self.config
            },
            tok_emb: self.tok_emb.clone(),
            pos_emb: self.pos_emb.clone(),
            layers: self.layers[..=layer].to_vec(),
        })
    }
}

fn truncated_normal(rng: &mut impl Rng) -> f32 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return (z * INIT_STD) as f32;
        }
    }
}

/// Last-token residual-stream output of every block for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    layers: Vec<Vector>,
}

impl HiddenTrace {
    pub fn new(layers: Vec<Vector>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, l: usize) -> &Vector {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vector] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Vector> {
        self.layers
    }
}

#[cfg(test)]
mod tests;
