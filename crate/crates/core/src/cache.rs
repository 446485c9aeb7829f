// SPDX-License-Identifier: Apache-2.0

//! Per-layer last-token hidden states, either computed live or read from a
//! `CTFC` feature cache.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CTFC"
//!      4     2  version u16 = 1
//!      6    10  reserved, zero
//!     16     4  n_layers u32
//!     20     4  d_model u32
//!     24     4  n_classes u32
//!     28     8  n_examples u64
//!     36     .  n_examples records: label u32, then n_layers * d_model f32
//! ```
//!
//! All integers and floats are little-endian. Records have a fixed stride, so
//! record `i` starts at `36 + i * (4 + 4 * n_layers * d_model)`. The reader
//! rejects a file whose length differs from the header-implied length.

use std::path::Path;

use rayon::prelude::*;

use crate::backbone::{BackboneWeights, HiddenTrace};
use crate::binfmt::{checked_u32, read_file, write_file, ByteReader, ByteWriter};
use crate::data::LabeledExample;
use crate::error::{ensure, Error, FormatError, Result};
use crate::kernels::Vector;

pub const CACHE_MAGIC: &[u8; 4] = b"CTFC";
pub const CACHE_VERSION: u16 = 1;
/// Magic, version and reserved bytes.
pub const CACHE_PREAMBLE_BYTES: u64 = 16;
pub const CACHE_HEADER_BYTES: u64 = 20;

/// Anything that yields a labeled hidden-state trace per example index.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn n_layers(&self) -> usize;
    fn d_model(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn trace(&self, i: usize) -> Result<HiddenTrace>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Traces computed on demand by running the backbone.
pub struct LiveFeatures<'a> {
    backbone: &'a BackboneWeights,
    data: &'a [LabeledExample],
}

impl<'a> LiveFeatures<'a> {
    pub fn new(backbone: &'a BackboneWeights, data: &'a [LabeledExample]) -> Self {
        Self { backbone, data }
    }
}

impl FeatureSource for LiveFeatures<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn n_layers(&self) -> usize {
        self.backbone.n_layers()
    }

    fn d_model(&self) -> usize {
        self.backbone.d_model()
    }

    fn label(&self, i: usize) -> usize {
        self.data[i].label
    }

    fn trace(&self, i: usize) -> Result<HiddenTrace> {
        self.backbone.forward_trace(&self.data[i].tokens)
    }
}

/// A reordering or restriction of another source.
pub struct Subset<'a, S: ?Sized> {
    source: &'a S,
    indices: &'a [usize],
}

impl<'a, S: FeatureSource + ?Sized> Subset<'a, S> {
    pub fn new(source: &'a S, indices: &'a [usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= source.len()) {
            return Err(Error::Contract(format!(
                "subset index {bad} out of range for a source of {}",
                source.len()
            )));
        }
        Ok(Self { source, indices })
    }
}

impl<S: FeatureSource + ?Sized> FeatureSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn n_layers(&self) -> usize {
        self.source.n_layers()
    }

    fn d_model(&self) -> usize {
        self.source.d_model()
    }

    fn label(&self, i: usize) -> usize {
        self.source.label(self.indices[i])
    }

    fn trace(&self, i: usize) -> Result<HiddenTrace> {
        self.source.trace(self.indices[i])
    }
}

/// A single layer of another source, presented as a one-layer trace.
pub struct LayerView<'a, S: ?Sized> {
    source: &'a S,
    layer: usize,
}

impl<'a, S: FeatureSource + ?Sized> LayerView<'a, S> {
    pub fn new(source: &'a S, layer: usize) -> Result<Self> {
        ensure!(
            layer < source.n_layers(),
            "layer {layer} out of range for a {}-layer source",
            source.n_layers()
        );
        Ok(Self { source, layer })
    }
}

impl<S: FeatureSource + ?Sized> FeatureSource for LayerView<'_, S> {
    fn len(&self) -> usize {
        self.source.len()
    }

    fn n_layers(&self) -> usize {
        1
    }

    fn d_model(&self) -> usize {
        self.source.d_model()
    }

    fn label(&self, i: usize) -> usize {
        self.source.label(i)
    }

    fn trace(&self, i: usize) -> Result<HiddenTrace> {
        let t = self.source.trace(i)?;
        Ok(HiddenTrace::new(vec![t.layer(self.layer).clone()]))
    }
}

/// In-memory feature cache: labels plus `n_layers * d_model` floats per example.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    n_layers: usize,
    d_model: usize,
    n_classes: usize,
    labels: Vec<u32>,
    features: Vec<f32>,
}

impl FeatureCache {
    pub fn new(n_layers: usize, d_model: usize, n_classes: usize) -> Result<Self> {
        ensure!(n_layers >= 1 && d_model >= 1, "cache dimensions must be positive");
        ensure!(n_classes >= 2, "cache needs at least 2 classes");
        Ok(Self {
            n_layers,
            d_model,
            n_classes,
            labels: Vec::new(),
            features: Vec::new(),
        })
    }

    pub fn push(&mut self, label: usize, trace: &HiddenTrace) -> Result<()> {
        ensure!(label < self.n_classes, "label {label} out of range for {} classes", self.n_classes);
        ensure!(
            trace.len() == self.n_layers,
            "trace has {} layers, cache expects {}",
            trace.len(),
            self.n_layers
        );
        for h in trace.layers() {
            ensure!(h.dim() == self.d_model, "hidden state dim {} != {}", h.dim(), self.d_model);
        }
        self.labels.push(label as u32);
        for h in trace.layers() {
            self.features.extend_from_slice(h.as_slice());
        }
        Ok(())
    }

    /// Materializes every trace of `source`, computing them in parallel and
    /// storing them in index order.
    pub fn from_source(source: &(impl FeatureSource + ?Sized), n_classes: usize) -> Result<Self> {
        let mut cache = Self::new(source.n_layers(), source.d_model(), n_classes)?;
        let traces: Vec<HiddenTrace> = (0..source.len())
            .into_par_iter()
            .map(|i| source.trace(i))
            .collect::<Result<_>>()?;
        for (i, t) in traces.iter().enumerate() {
            cache.push(source.label(i), t)?;
        }
        Ok(cache)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Hidden state of layer `l` for example `i`.
    pub fn feature(&self, i: usize, l: usize) -> &[f32] {
        let stride = self.n_layers * self.d_model;
        let off = i * stride + l * self.d_model;
        &self.features[off..off + self.d_model]
    }

    pub fn record_bytes(&self) -> u64 {
        4 + 4 * (self.n_layers * self.d_model) as u64
    }

    pub fn file_len(&self) -> u64 {
        CACHE_PREAMBLE_BYTES + CACHE_HEADER_BYTES + self.labels.len() as u64 * self.record_bytes()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(self.file_len() as usize);
        w.bytes(CACHE_MAGIC);
        w.u16(CACHE_VERSION);
        w.bytes(&[0u8; 10]);
        w.u32(checked_u32(self.n_layers, "n_layers")?);
        w.u32(checked_u32(self.d_model, "d_model")?);
        w.u32(checked_u32(self.n_classes, "n_classes")?);
        w.u64(self.labels.len() as u64);
        let stride = self.n_layers * self.d_model;
        for (i, &label) in self.labels.iter().enumerate() {
            w.u32(label);
            w.f32s(&self.features[i * stride..(i + 1) * stride]);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CACHE_MAGIC)?;
        r.version(CACHE_VERSION)?;
        r.skip(10)?;
        let n_layers = r.u32()? as usize;
        let d_model = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let n_examples = r.u64()?;
        if n_layers == 0 || d_model == 0 || n_classes < 2 {
            return Err(FormatError::InvalidHeader(format!(
                "n_layers {n_layers}, d_model {d_model}, n_classes {n_classes}"
            )));
        }
        let record = 4 + 4 * (n_layers as u64) * (d_model as u64);
        let expected = n_examples
            .checked_mul(record)
            .and_then(|p| p.checked_add(CACHE_PREAMBLE_BYTES + CACHE_HEADER_BYTES))
            .ok_or_else(|| FormatError::InvalidHeader(format!("{n_examples} examples overflow the file size")))?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(FormatError::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(FormatError::LengthMismatch { expected, actual });
        }
        let n = n_examples as usize;
        let stride = n_layers * d_model;
        let mut labels = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * stride);
        for i in 0..n {
            let label = r.u32()?;
            if label as usize >= n_classes {
                return Err(FormatError::InvalidHeader(format!(
                    "record {i} has label {label} but the header declares {n_classes} classes"
                )));
            }
            labels.push(label);
            features.extend(r.f32s(stride)?);
        }
        r.finish()?;
        Ok(Self {
            n_layers,
            d_model,
            n_classes,
            labels,
            features,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }
}

impl FeatureSource for FeatureCache {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    fn trace(&self, i: usize) -> Result<HiddenTrace> {
        ensure!(i < self.len(), "cache record {i} out of range ({} records)", self.len());
        Ok(HiddenTrace::new(
            (0..self.n_layers)
                .map(|l| Vector::new(self.feature(i, l).to_vec()))
                .collect(),
        ))
    }
}

/// Reads and fully validates a cache file.
pub fn read_cache(path: impl AsRef<Path>) -> Result<FeatureCache> {
    let path = path.as_ref();
    FeatureCache::from_bytes(&read_file(path)?).map_err(|e| Error::format(path, e))
}

/// Reads a cache and checks it against the expected layer count and width.
pub fn read_cache_expecting(
    path: impl AsRef<Path>,
    n_layers: usize,
    d_model: usize,
) -> Result<FeatureCache> {
    let path = path.as_ref();
    let cache = read_cache(path)?;
    let mismatch = |what, expected: usize, found: usize| {
        Error::format(
            path,
            FormatError::DimMismatch {
                what,
                expected: expected as u64,
                found: found as u64,
            },
        )
    };
    if cache.n_layers != n_layers {
        return Err(mismatch("n_layers", n_layers, cache.n_layers));
    }
    if cache.d_model != d_model {
        return Err(mismatch("d_model", d_model, cache.d_model));
    }
    Ok(cache)
}

/// Runs the backbone over `data` and writes every trace and label to `path`.
pub fn extract_features(
    backbone: &BackboneWeights,
    data: &[LabeledExample],
    n_classes: usize,
    path: impl AsRef<Path>,
) -> Result<FeatureCache> {
    ensure!(!data.is_empty(), "cannot extract features from an empty dataset");
    let cache = FeatureCache::from_source(&LiveFeatures::new(backbone, data), n_classes)?;
    cache.save(path)?;
    Ok(cache)
}
