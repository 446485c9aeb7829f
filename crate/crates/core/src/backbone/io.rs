// SPDX-License-Identifier: Apache-2.0

//! `CTBW` weight files.
//!
//! ```text
//! "CTBW" | version u16 = 1 | n_layers d_model n_heads d_ff vocab_size max_seq_len (u32 each)
//!        | seed (u64, i.e. low u32 then high u32) | tensors, f32 LE, declaration order
//! ```

use std::path::Path;

use super::{BackboneConfig, BackboneWeights, LayerWeights};
use crate::binfmt::{checked_u32, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"CTBW";
pub const VERSION: u16 = 1;
/// Bytes of a serialized [`BackboneConfig`].
pub const CONFIG_BYTES: usize = 6 * 4 + 8;

pub(crate) fn write_config(w: &mut ByteWriter, cfg: &BackboneConfig) -> Result<()> {
    for (v, what) in [
        (cfg.n_layers, "n_layers"),
        (cfg.d_model, "d_model"),
        (cfg.n_heads, "n_heads"),
        (cfg.d_ff, "d_ff"),
        (cfg.vocab_size, "vocab_size"),
        (cfg.max_seq_len, "max_seq_len"),
    ] {
        w.u32(checked_u32(v, what)?);
    }
    w.u64(cfg.seed);
    Ok(())
}

pub(crate) fn read_config(r: &mut ByteReader<'_>) -> std::result::Result<BackboneConfig, FormatError> {
    let mut dims = [0usize; 6];
    for v in &mut dims {
        *v = r.u32()? as usize;
    }
    let [n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len] = dims;
    let cfg = BackboneConfig {
        n_layers,
        d_model,
        n_heads,
        d_ff,
        vocab_size,
        max_seq_len,
        seed: r.u64()?,
    };
    cfg.validate()
        .map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
    Ok(cfg)
}

/// Reads embeddings plus `n_blocks` blocks shaped by `cfg`.
pub(crate) fn read_tensors(
    r: &mut ByteReader<'_>,
    cfg: &BackboneConfig,
    n_blocks: usize,
) -> std::result::Result<BackboneWeights, FormatError> {
    let d = cfg.d_model;
    let tok_emb = r.f32s(cfg.vocab_size * d)?;
    let pos_emb = r.f32s(cfg.max_seq_len * d)?;
    let mut layers = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut lw = LayerWeights::zeros(cfg);
        for t in lw.tensors_mut() {
            *t = r.f32s(t.len())?;
        }
        layers.push(lw);
    }
    Ok(BackboneWeights {
        config: BackboneConfig {
            n_layers: n_blocks,
            ..*cfg
        },
        tok_emb,
        pos_emb,
        layers,
    })
}

pub(crate) fn write_tensors(w: &mut ByteWriter, weights: &BackboneWeights) {
    for t in weights.tensors() {
        w.f32s(t);
    }
}

impl BackboneWeights {
    /// Canonical serialization (the `CTBW` file image).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(6 + CONFIG_BYTES + self.param_count() * 4);
        w.bytes(MAGIC);
        w.u16(VERSION);
        write_config(&mut w, &self.config).expect("config dimensions were validated at construction");
        write_tensors(&mut w, self);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let cfg = read_config(&mut r)?;
        r.set_expected_len((6 + CONFIG_BYTES + cfg.param_count() * 4) as u64);
        let weights = read_tensors(&mut r, &cfg, cfg.n_layers)?;
        r.finish()?;
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e))
    }
}
