// SPDX-License-Identifier: Apache-2.0

use super::ops::{add_bias, causal_attention_fwd, gelu, layer_norm_fwd, linear_fwd};
use super::{BackboneWeights, HiddenTrace, TokenId};
use crate::error::{ensure, Result};
use crate::kernels::Vector;

/// Scratch buffers for one inference pass, sized for one sequence.
struct Scratch {
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    ctx: Vec<f32>,
    proj: Vec<f32>,
    hidden: Vec<f32>,
}

impl Scratch {
    fn new(len: usize, d: usize, f: usize) -> Self {
        Self {
            normed: vec![0.0; len * d],
            q: vec![0.0; len * d],
            k: vec![0.0; len * d],
            v: vec![0.0; len * d],
            ctx: vec![0.0; len * d],
            proj: vec![0.0; len * d],
            hidden: vec![0.0; len * f],
        }
    }
}

impl BackboneWeights {
    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        ensure!(!tokens.is_empty(), "empty token sequence");
        ensure!(
            tokens.len() <= self.config.max_seq_len,
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            self.config.max_seq_len
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(crate::error::Error::Contract(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[TokenId], out: &mut [f32]) {
        let d = self.config.d_model;
        for (p, (&t, row)) in tokens.iter().zip(out.chunks_exact_mut(d)).enumerate() {
            let te = &self.tok_emb[t as usize * d..(t as usize + 1) * d];
            let pe = &self.pos_emb[p * d..(p + 1) * d];
            for i in 0..d {
                row[i] = te[i] + pe[i];
            }
        }
    }

    fn block_forward(&self, l: usize, x: &mut [f32], len: usize, s: &mut Scratch) {
        let cfg = &self.config;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let w = &self.layers[l];
        layer_norm_fwd(x, d, &w.ln1_gain, &w.ln1_bias, &mut s.normed, None);
        linear_fwd(&s.normed, len, &w.wq, d, d, &mut s.q);
        add_bias(&mut s.q, &w.bq);
        linear_fwd(&s.normed, len, &w.wk, d, d, &mut s.k);
        add_bias(&mut s.k, &w.bk);
        linear_fwd(&s.normed, len, &w.wv, d, d, &mut s.v);
        add_bias(&mut s.v, &w.bv);
        causal_attention_fwd(&s.q, &s.k, &s.v, len, d, cfg.n_heads, &mut s.ctx, None);
        linear_fwd(&s.ctx, len, &w.wo, d, d, &mut s.proj);
        add_bias(&mut s.proj, &w.bo);
        for (xi, pi) in x.iter_mut().zip(&s.proj) {
            *xi += pi;
        }
        layer_norm_fwd(x, d, &w.ln2_gain, &w.ln2_bias, &mut s.normed, None);
        linear_fwd(&s.normed, len, &w.w_up, d, f, &mut s.hidden);
        add_bias(&mut s.hidden, &w.b_up);
        for h in s.hidden.iter_mut() {
            *h = gelu(*h);
        }
        linear_fwd(&s.hidden, len, &w.w_down, f, d, &mut s.proj);
        add_bias(&mut s.proj, &w.b_down);
        for (xi, pi) in x.iter_mut().zip(&s.proj) {
            *xi += pi;
        }
    }

    /// Runs blocks `0..=last`, handing the last-token state of each block to
    /// `tap`. Every public forward goes through here, so all of them perform
    /// the same floating-point operations in the same order.
    pub(crate) fn run_blocks(
        &self,
        tokens: &[TokenId],
        last: usize,
        mut tap: impl FnMut(usize, &[f32]),
    ) -> Result<()> {
        self.check_tokens(tokens)?;
        ensure!(
            last < self.n_layers(),
            "layer {last} out of range for a {}-layer backbone",
            self.n_layers()
        );
        let (d, len) = (self.config.d_model, tokens.len());
        let mut x = vec![0.0f32; len * d];
        self.embed(tokens, &mut x);
        let mut scratch = Scratch::new(len, d, self.config.d_ff);
        for l in 0..=last {
            self.block_forward(l, &mut x, len, &mut scratch);
            tap(l, &x[(len - 1) * d..]);
        }
        Ok(())
    }

    /// Last-token hidden state of every block.
    pub fn forward_trace(&self, tokens: &[TokenId]) -> Result<HiddenTrace> {
        let mut layers = Vec::with_capacity(self.n_layers());
        self.run_blocks(tokens, self.n_layers() - 1, |_, h| layers.push(Vector::new(h.to_vec())))?;
        Ok(HiddenTrace::new(layers))
    }

    /// Last-token hidden state of block `layer`, computing blocks `0..=layer` only.
    pub fn forward_truncated(&self, tokens: &[TokenId], layer: usize) -> Result<Vector> {
        let mut out = None;
        self.run_blocks(tokens, layer, |l, h| {
            if l == layer {
                out = Some(Vector::new(h.to_vec()));
            }
        })?;
        Ok(out.expect("tap called for the final block"))
    }

    /// Full residual stream (all positions) after block `layer`.
    pub fn forward_positions(&self, tokens: &[TokenId], layer: usize) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        ensure!(layer < self.n_layers(), "layer {layer} out of range");
        let (d, len) = (self.config.d_model, tokens.len());
        let mut x = vec![0.0f32; len * d];
        self.embed(tokens, &mut x);
        let mut scratch = Scratch::new(len, d, self.config.d_ff);
        for l in 0..=layer {
            self.block_forward(l, &mut x, len, &mut scratch);
        }
        Ok(x)
    }
}
