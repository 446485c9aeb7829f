// SPDX-License-Identifier: Apache-2.0

//! Chip selection, suffix-layer removal, and inference on the pruned model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneWeights, TokenId};
use crate::binfmt::{checked_u32, read_file, write_file, ByteReader, ByteWriter};
use crate::cache::{FeatureSource, Subset};
use crate::chips::{write_chip, write_chip_header, Chip, ChipBank, ChipHeader, CHIP_HEADER_BYTES};
use crate::error::{ensure, Error, FormatError, Result};
use crate::kernels::{argmax, Vector};
use crate::trainer::evaluate_bank;

/// Fraction of the `n_layers` blocks removed when keeping blocks `0..=layer`.
pub fn prune_ratio(n_layers: usize, layer: usize) -> Result<f64> {
    ensure!(
        layer < n_layers,
        "layer {layer} out of range for a {n_layers}-layer model"
    );
    Ok((n_layers - (layer + 1)) as f64 / n_layers as f64)
}

pub const DEFAULT_N_VALIDATION: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum SelectionStrategy {
    /// A predetermined layer.
    Fixed { layer: usize },
    /// Best chip on the first `n_validation` examples of the validation pool.
    Validate { n_validation: usize },
    /// Best chip on the eval data itself.
    Optimal,
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Fixed { .. } => "fixed",
            SelectionStrategy::Validate { .. } => "validate",
            SelectionStrategy::Optimal => "optimal",
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionStrategy::Fixed { layer } => write!(f, "fixed:{layer}"),
            SelectionStrategy::Validate { n_validation } => write!(f, "validate:{n_validation}"),
            SelectionStrategy::Optimal => f.write_str("optimal"),
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    /// Parses `fixed:L`, `validate`, `validate:N` or `optimal`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: &str| {
            a.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid number {a:?} in strategy {s:?}")))
        };
        match (name, arg) {
            ("fixed", Some(a)) => Ok(SelectionStrategy::Fixed { layer: num(a)? }),
            ("fixed", None) => Err(Error::Config("fixed strategy needs a layer (fixed:L or --layer)".into())),
            ("validate", None) => Ok(SelectionStrategy::Validate {
                n_validation: DEFAULT_N_VALIDATION,
            }),
            ("validate", Some(a)) => Ok(SelectionStrategy::Validate { n_validation: num(a)? }),
            ("optimal", None) => Ok(SelectionStrategy::Optimal),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (expected fixed:L, validate[:N] or optimal)"
            ))),
        }
    }
}

/// Which layer was chosen and the per-layer accuracies behind the choice
/// (empty for the fixed strategy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: SelectionStrategy,
    pub layer: usize,
    pub prune_ratio: f64,
    pub accuracies: Vec<f64>,
}

/// Index of the highest accuracy, ties to the smallest index.
pub fn best_layer(accuracies: &[f64]) -> usize {
    let mut best = 0;
    for (l, &a) in accuracies.iter().enumerate().skip(1) {
        if a > accuracies[best] {
            best = l;
        }
    }
    best
}

/// Applies `strategy` to `bank`. `validation_pool` is consumed in order, so
/// callers control the draw by how they order it.
pub fn select_chip(
    bank: &ChipBank,
    strategy: SelectionStrategy,
    validation_pool: &(impl FeatureSource + ?Sized),
    eval: &(impl FeatureSource + ?Sized),
) -> Result<SelectionReport> {
    let (layer, accuracies) = match strategy {
        SelectionStrategy::Fixed { layer } => {
            ensure!(
                layer < bank.len(),
                "fixed layer {layer} out of range for {} chips",
                bank.len()
            );
            (layer, Vec::new())
        }
        SelectionStrategy::Validate { n_validation } => {
            ensure!(n_validation >= 1, "n_validation must be at least 1");
            ensure!(
                validation_pool.len() >= n_validation,
                "validation pool has {} examples, strategy needs {n_validation}",
                validation_pool.len()
            );
            let first: Vec<usize> = (0..n_validation).collect();
            let acc = evaluate_bank(bank, &Subset::new(validation_pool, &first)?)?;
            (best_layer(&acc), acc)
        }
        SelectionStrategy::Optimal => {
            let acc = evaluate_bank(bank, eval)?;
            (best_layer(&acc), acc)
        }
    };
    Ok(SelectionReport {
        strategy,
        layer,
        prune_ratio: prune_ratio(bank.len(), layer)?,
        accuracies,
    })
}

/// Blocks `0..=layer` of a backbone plus the chip reading block `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    original: BackboneConfig,
    backbone: BackboneWeights,
    layer: usize,
    chip: Chip,
}

pub fn build_pruned_model(backbone: &BackboneWeights, bank: &ChipBank, layer: usize) -> Result<PrunedModel> {
    ensure!(
        bank.len() == backbone.n_layers(),
        "bank has {} chips for a {}-layer backbone",
        bank.len(),
        backbone.n_layers()
    );
    PrunedModel::new(backbone, layer, bank.chip(layer)?.clone())
}

impl PrunedModel {
    pub fn new(backbone: &BackboneWeights, layer: usize, chip: Chip) -> Result<Self> {
        ensure!(
            chip.d_model() == backbone.d_model(),
            "chip expects d_model {}, backbone has {}",
            chip.d_model(),
            backbone.d_model()
        );
        Ok(Self {
            original: *backbone.config(),
            backbone: backbone.truncated(layer)?,
            layer,
            chip,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn kept_layers(&self) -> usize {
        self.backbone.n_layers()
    }

    pub fn original_config(&self) -> &BackboneConfig {
        &self.original
    }

    pub fn backbone(&self) -> &BackboneWeights {
        &self.backbone
    }

    pub fn chip(&self) -> &Chip {
        &self.chip
    }

    pub fn prune_ratio(&self) -> f64 {
        prune_ratio(self.original.n_layers, self.layer).expect("layer validated at construction")
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.chip.param_count()
    }

    /// Runs the kept blocks and the chip: predicted class (ties to the
    /// smallest index) and class distribution.
    pub fn infer(&self, tokens: &[TokenId]) -> Result<(usize, Vector)> {
        let h = self.backbone.forward_truncated(tokens, self.layer)?;
        self.chip.predict(&h)
    }

    /// Accuracy over labeled token sequences.
    pub fn accuracy(&self, data: &[crate::data::LabeledExample]) -> Result<f64> {
        ensure!(!data.is_empty(), "empty eval set");
        let mut correct = 0usize;
        for ex in data {
            correct += usize::from(self.infer(&ex.tokens)?.0 == ex.label);
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub fn pruned_infer(model: &PrunedModel, tokens: &[TokenId]) -> Result<(usize, Vector)> {
    model.infer(tokens)
}

pub const PRUNED_MAGIC: &[u8; 4] = b"CTPM";
pub const PRUNED_VERSION: u16 = 1;

impl PrunedModel {
    /// `CTPM` file image: magic, version, kept-layer count u32, the original
    /// backbone config, the chip header, then the kept backbone tensors and
    /// the chip tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(PRUNED_MAGIC);
        w.u16(PRUNED_VERSION);
        w.u32(checked_u32(self.kept_layers(), "kept layers").expect("validated"));
        crate::backbone::write_config(&mut w, &self.original).expect("validated config");
        let c = &self.chip;
        write_chip_header(&mut w, c.kind(), 1, c.n_classes(), c.d_model(), c.hidden()).expect("validated chip");
        crate::backbone::write_tensors(&mut w, &self.backbone);
        write_chip(&mut w, c);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(PRUNED_MAGIC)?;
        r.version(PRUNED_VERSION)?;
        let kept = r.u32()? as usize;
        let original = crate::backbone::read_config(&mut r)?;
        if kept == 0 || kept > original.n_layers {
            return Err(FormatError::InvalidHeader(format!(
                "{kept} kept layers for a {}-layer backbone",
                original.n_layers
            )));
        }
        let header = ChipHeader::read(&mut r)?;
        if header.n_chips != 1 {
            return Err(FormatError::InvalidHeader(format!(
                "pruned model holds {} chips, expected 1",
                header.n_chips
            )));
        }
        if header.d_model != original.d_model {
            return Err(FormatError::DimMismatch {
                what: "chip d_model",
                expected: original.d_model as u64,
                found: header.d_model as u64,
            });
        }
        let kept_cfg = BackboneConfig {
            n_layers: kept,
            ..original
        };
        let expected = 6
            + 4
            + crate::backbone::CONFIG_BYTES
            + CHIP_HEADER_BYTES
            + 4 * (kept_cfg.param_count() + header.chip_param_count());
        r.set_expected_len(expected as u64);
        let backbone = crate::backbone::read_tensors(&mut r, &original, kept)?;
        let chip = header.read_chip(&mut r)?;
        r.finish()?;
        Ok(Self {
            original,
            backbone,
            layer: kept - 1,
            chip,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?).map_err(|e| Error::format(path, e))
    }
}

/// Several chips sharing one truncated backbone, each reading its own layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChipModel {
    backbone: BackboneWeights,
    chips: Vec<(String, usize, Chip)>,
}

impl MultiChipModel {
    /// Keeps blocks `0..=max layer` of `backbone`.
    pub fn new(backbone: &BackboneWeights, chips: Vec<(String, usize, Chip)>) -> Result<Self> {
        ensure!(!chips.is_empty(), "a multi-chip model needs at least one chip");
        let mut seen = std::collections::BTreeSet::new();
        for (task, layer, chip) in &chips {
            ensure!(seen.insert(task.clone()), "duplicate task id {task:?}");
            ensure!(
                *layer < backbone.n_layers(),
                "task {task:?}: layer {layer} out of range"
            );
            ensure!(
                chip.d_model() == backbone.d_model(),
                "task {task:?}: chip d_model {} != backbone {}",
                chip.d_model(),
                backbone.d_model()
            );
        }
        let deepest = chips.iter().map(|c| c.1).max().expect("non-empty");
        Ok(Self {
            backbone: backbone.truncated(deepest)?,
            chips,
        })
    }

    pub fn kept_layers(&self) -> usize {
        self.backbone.n_layers()
    }

    pub fn chips(&self) -> &[(String, usize, Chip)] {
        &self.chips
    }

    /// One pass over the kept blocks; every chip reads its own layer.
    pub fn infer(&self, tokens: &[TokenId]) -> Result<BTreeMap<String, (usize, Vector)>> {
        let mut states: Vec<Option<Vector>> = vec![None; self.kept_layers()];
        let wanted: Vec<bool> = (0..self.kept_layers())
            .map(|l| self.chips.iter().any(|c| c.1 == l))
            .collect();
        self.backbone.run_blocks(tokens, self.kept_layers() - 1, |l, h| {
            if wanted[l] {
                states[l] = Some(Vector::new(h.to_vec()));
            }
        })?;
        let mut out = BTreeMap::new();
        for (task, layer, chip) in &self.chips {
            let h = states[*layer].as_ref().expect("every chip layer was recorded");
            let probs = chip.forward(h)?;
            out.insert(task.clone(), (argmax(probs.as_slice()), probs));
        }
        Ok(out)
    }
}

pub fn multichip_infer(model: &MultiChipModel, tokens: &[TokenId]) -> Result<BTreeMap<String, (usize, Vector)>> {
    model.infer(tokens)
}
