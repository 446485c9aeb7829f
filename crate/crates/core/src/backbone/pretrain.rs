// SPDX-License-Identifier: Apache-2.0

//! Label-prediction pretraining of the backbone.
//!
//! A throwaway head (final LayerNorm + linear classifier on the last token of
//! the last block) is trained jointly with the backbone on freshly sampled
//! task examples, then discarded. Only the backbone weights are returned.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    add_bias, causal_attention_bwd, causal_attention_fwd, gelu, gelu_grad, layer_norm_bwd,
    layer_norm_fwd, linear_bwd, linear_fwd,
};
use super::BackboneWeights;
use crate::data::{LabeledExample, SyntheticTaskSpec};
use crate::error::{ensure, Result};
use crate::kernels::{adam_step, softmax_slice, AdamConfig, AdamMoments, NLL_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5_000,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub weights: BackboneWeights,
    /// Mean batch loss of every step, measured before that step's update.
    pub losses: Vec<f64>,
}

/// Trains a copy of `weights` on `task`. The input weights are not touched.
pub fn pretrain_backbone(
    weights: &BackboneWeights,
    task: &SyntheticTaskSpec,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    task.validate()?;
    ensure!(cfg.batch_size >= 1, "batch_size must be at least 1");
    ensure!(cfg.lr > 0.0 && cfg.lr.is_finite(), "learning rate must be positive");
    let bc = weights.config();
    ensure!(
        task.vocab_size <= bc.vocab_size,
        "task vocab {} exceeds backbone vocab {}",
        task.vocab_size,
        bc.vocab_size
    );
    ensure!(
        task.seq_len <= bc.max_seq_len,
        "task seq_len {} exceeds backbone max_seq_len {}",
        task.seq_len,
        bc.max_seq_len
    );
    let mut model = PretrainModel::new(weights.clone(), task.n_classes);
    if cfg.steps == 0 {
        return Ok(PretrainOutcome {
            weights: model.backbone,
            losses: Vec::new(),
        });
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut moments: Vec<AdamMoments> = model
        .tensor_lens()
        .into_iter()
        .map(AdamMoments::zeros)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ task.seed.rotate_left(17));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grads = model.zeroed();
    for step in 1..=cfg.steps {
        let batch: Vec<LabeledExample> = (0..cfg.batch_size)
            .map(|_| task.sample(&mut rng))
            .collect();
        grads.fill_zero();
        let loss = model.loss_and_grads(task, &batch, Some(&mut grads))?;
        losses.push(loss);
        for ((p, g), m) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(moments.iter_mut())
        {
            adam_step(p, g, m, &adam, step as u64)?;
        }
    }
    ensure!(model.backbone.is_finite(), "pretraining diverged (non-finite weights)");
    Ok(PretrainOutcome {
        weights: model.backbone,
        losses,
    })
}

/// Backbone plus the throwaway classification head.
#[derive(Clone)]
pub(crate) struct PretrainModel {
    pub backbone: BackboneWeights,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
    pub w_head: Vec<f32>,
    pub b_head: Vec<f32>,
    n_classes: usize,
}

struct BlockCache {
    x_in: Vec<f32>,
    normed1: Vec<f32>,
    mean1: Vec<f32>,
    rstd1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    ctx: Vec<f32>,
    x_mid: Vec<f32>,
    normed2: Vec<f32>,
    mean2: Vec<f32>,
    rstd2: Vec<f32>,
    pre_act: Vec<f32>,
    act: Vec<f32>,
}

impl PretrainModel {
    pub fn new(backbone: BackboneWeights, n_classes: usize) -> Self {
        let d = backbone.d_model();
        // The head starts at zero so the initial prediction is uniform.
        Self {
            backbone,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            w_head: vec![0.0; n_classes * d],
            b_head: vec![0.0; n_classes],
            n_classes,
        }
    }

    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn tensor_lens(&mut self) -> Vec<usize> {
        self.tensors_mut().iter().map(|t| t.len()).collect()
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = self.backbone.tensors();
        out.extend([
            self.lnf_gain.as_slice(),
            &self.lnf_bias,
            &self.w_head,
            &self.b_head,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = self.backbone.tensors_mut();
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.w_head,
            &mut self.b_head,
        ]);
        out
    }

    /// Mean cross-entropy over every supervised position of `batch` (see
    /// `SyntheticTaskSpec::supervised_positions`); accumulates gradients when
    /// asked. All examples must share one sequence length.
    pub fn loss_and_grads(
        &self,
        task: &SyntheticTaskSpec,
        batch: &[LabeledExample],
        grads: Option<&mut PretrainModel>,
    ) -> Result<f64> {
        ensure!(!batch.is_empty(), "empty batch");
        let len = batch[0].tokens.len();
        ensure!(
            batch.iter().all(|e| e.tokens.len() == len),
            "pretraining batch mixes sequence lengths"
        );
        for e in batch {
            self.backbone.check_tokens(&e.tokens)?;
            ensure!(e.label < self.n_classes, "label {} out of range", e.label);
        }
        let cfg = *self.backbone.config();
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let (bsz, c) = (batch.len(), self.n_classes);
        let rows = bsz * len;

        let mut x = vec![0.0f32; rows * d];
        for (b, e) in batch.iter().enumerate() {
            self.backbone
                .embed(&e.tokens, &mut x[b * len * d..(b + 1) * len * d]);
        }
        let mut caches = Vec::with_capacity(self.backbone.n_layers());
        for w in self.backbone.layers() {
            let mut cache = BlockCache {
                x_in: x.clone(),
                normed1: vec![0.0; rows * d],
                mean1: vec![0.0; rows],
                rstd1: vec![0.0; rows],
                q: vec![0.0; rows * d],
                k: vec![0.0; rows * d],
                v: vec![0.0; rows * d],
                probs: vec![0.0; bsz * h * len * len],
                ctx: vec![0.0; rows * d],
                x_mid: Vec::new(),
                normed2: vec![0.0; rows * d],
                mean2: vec![0.0; rows],
                rstd2: vec![0.0; rows],
                pre_act: vec![0.0; rows * f],
                act: vec![0.0; rows * f],
            };
            layer_norm_fwd(
                &x,
                d,
                &w.ln1_gain,
                &w.ln1_bias,
                &mut cache.normed1,
                Some((&mut cache.mean1, &mut cache.rstd1)),
            );
            linear_fwd(&cache.normed1, rows, &w.wq, d, d, &mut cache.q);
            add_bias(&mut cache.q, &w.bq);
            linear_fwd(&cache.normed1, rows, &w.wk, d, d, &mut cache.k);
            add_bias(&mut cache.k, &w.bk);
            linear_fwd(&cache.normed1, rows, &w.wv, d, d, &mut cache.v);
            add_bias(&mut cache.v, &w.bv);
            for b in 0..bsz {
                let s = b * len * d..(b + 1) * len * d;
                causal_attention_fwd(
                    &cache.q[s.clone()],
                    &cache.k[s.clone()],
                    &cache.v[s.clone()],
                    len,
                    d,
                    h,
                    &mut cache.ctx[s],
                    Some(&mut cache.probs[b * h * len * len..(b + 1) * h * len * len]),
                );
            }
            let mut proj = vec![0.0f32; rows * d];
            linear_fwd(&cache.ctx, rows, &w.wo, d, d, &mut proj);
            add_bias(&mut proj, &w.bo);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
            cache.x_mid = x.clone();
            layer_norm_fwd(
                &x,
                d,
                &w.ln2_gain,
                &w.ln2_bias,
                &mut cache.normed2,
                Some((&mut cache.mean2, &mut cache.rstd2)),
            );
            linear_fwd(&cache.normed2, rows, &w.w_up, d, f, &mut cache.pre_act);
            add_bias(&mut cache.pre_act, &w.b_up);
            for (a, &z) in cache.act.iter_mut().zip(&cache.pre_act) {
                *a = gelu(z);
            }
            linear_fwd(&cache.act, rows, &w.w_down, f, d, &mut proj);
            add_bias(&mut proj, &w.b_down);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
            caches.push(cache);
        }

        // (row of `x`, class) for every supervised position.
        let targets: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .flat_map(|(b, e)| {
                task.supervised_positions(&e.tokens, e.label)
                    .into_iter()
                    .map(move |(p, y)| (b * len + p, y))
            })
            .collect();
        let n = targets.len();
        let mut last = vec![0.0f32; n * d];
        for (i, &(r, _)) in targets.iter().enumerate() {
            last[i * d..(i + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
        let mut normed_f = vec![0.0f32; n * d];
        let mut mean_f = vec![0.0f32; n];
        let mut rstd_f = vec![0.0f32; n];
        layer_norm_fwd(
            &last,
            d,
            &self.lnf_gain,
            &self.lnf_bias,
            &mut normed_f,
            Some((&mut mean_f, &mut rstd_f)),
        );
        let mut logits = vec![0.0f32; n * c];
        linear_fwd(&normed_f, n, &self.w_head, d, c, &mut logits);
        add_bias(&mut logits, &self.b_head);

        let mut loss = 0.0f64;
        let mut dlogits = vec![0.0f32; n * c];
        for (i, &(_, label)) in targets.iter().enumerate() {
            let p = softmax_slice(&logits[i * c..(i + 1) * c]);
            loss -= (f64::from(p[label]) + NLL_EPS).ln();
            for k in 0..c {
                let y = if k == label { 1.0 } else { 0.0 };
                dlogits[i * c + k] = (p[k] - y) / n as f32;
            }
        }
        loss /= n as f64;
        let Some(g) = grads else {
            return Ok(loss);
        };

        let mut dnormed_f = vec![0.0f32; n * d];
        linear_bwd(
            &normed_f,
            &dlogits,
            n,
            &self.w_head,
            d,
            c,
            &mut g.w_head,
            &mut g.b_head,
            Some(&mut dnormed_f),
        );
        let mut dlast = vec![0.0f32; n * d];
        layer_norm_bwd(
            &last,
            &dnormed_f,
            d,
            &self.lnf_gain,
            &mean_f,
            &rstd_f,
            &mut dlast,
            &mut g.lnf_gain,
            &mut g.lnf_bias,
        );
        let mut dx = vec![0.0f32; rows * d];
        for (i, &(r, _)) in targets.iter().enumerate() {
            dx[r * d..(r + 1) * d].copy_from_slice(&dlast[i * d..(i + 1) * d]);
        }

        let mut dact = vec![0.0f32; rows * f];
        let mut dnormed = vec![0.0f32; rows * d];
        let mut dctx = vec![0.0f32; rows * d];
        let mut dq = vec![0.0f32; rows * d];
        let mut dk = vec![0.0f32; rows * d];
        let mut dv = vec![0.0f32; rows * d];
        for (l, cache) in caches.iter().enumerate().rev() {
            let w = &self.backbone.layers()[l];
            let gw = &mut g.backbone.layers[l];

            dact.fill(0.0);
            linear_bwd(
                &cache.act,
                &dx,
                rows,
                &w.w_down,
                f,
                d,
                &mut gw.w_down,
                &mut gw.b_down,
                Some(&mut dact),
            );
            for (da, &z) in dact.iter_mut().zip(&cache.pre_act) {
                *da *= gelu_grad(z);
            }
            dnormed.fill(0.0);
            linear_bwd(
                &cache.normed2,
                &dact,
                rows,
                &w.w_up,
                d,
                f,
                &mut gw.w_up,
                &mut gw.b_up,
                Some(&mut dnormed),
            );
            layer_norm_bwd(
                &cache.x_mid,
                &dnormed,
                d,
                &w.ln2_gain,
                &cache.mean2,
                &cache.rstd2,
                &mut dx,
                &mut gw.ln2_gain,
                &mut gw.ln2_bias,
            );

            dctx.fill(0.0);
            linear_bwd(
                &cache.ctx,
                &dx,
                rows,
                &w.wo,
                d,
                d,
                &mut gw.wo,
                &mut gw.bo,
                Some(&mut dctx),
            );
            dq.fill(0.0);
            dk.fill(0.0);
            dv.fill(0.0);
            for b in 0..bsz {
                let s = b * len * d..(b + 1) * len * d;
                causal_attention_bwd(
                    &cache.q[s.clone()],
                    &cache.k[s.clone()],
                    &cache.v[s.clone()],
                    &cache.probs[b * h * len * len..(b + 1) * h * len * len],
                    &dctx[s.clone()],
                    len,
                    d,
                    h,
                    &mut dq[s.clone()],
                    &mut dk[s.clone()],
                    &mut dv[s],
                );
            }
            dnormed.fill(0.0);
            linear_bwd(&cache.normed1, &dq, rows, &w.wq, d, d, &mut gw.wq, &mut gw.bq, Some(&mut dnormed));
            linear_bwd(&cache.normed1, &dk, rows, &w.wk, d, d, &mut gw.wk, &mut gw.bk, Some(&mut dnormed));
            linear_bwd(&cache.normed1, &dv, rows, &w.wv, d, d, &mut gw.wv, &mut gw.bv, Some(&mut dnormed));
            layer_norm_bwd(
                &cache.x_in,
                &dnormed,
                d,
                &w.ln1_gain,
                &cache.mean1,
                &cache.rstd1,
                &mut dx,
                &mut gw.ln1_gain,
                &mut gw.ln1_bias,
            );
        }

        for (b, e) in batch.iter().enumerate() {
            for (p, &t) in e.tokens.iter().enumerate() {
                let src = &dx[(b * len + p) * d..(b * len + p + 1) * d];
                let t = t as usize;
                for i in 0..d {
                    g.backbone.tok_emb[t * d + i] += src[i];
                    g.backbone.pos_emb[p * d + i] += src[i];
                }
            }
        }
        Ok(loss)
    }
}
