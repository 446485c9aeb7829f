// SPDX-License-Identifier: Apache-2.0

//! Probing classifiers attached to the last-token hidden state of one layer.
//!
//! A linear chip computes `softmax(W x + b)`; an MLP chip computes
//! `softmax(W1 relu(W2 x + b2) + b1)`.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::HiddenTrace;
use crate::binfmt::{checked_u32, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{ensure, Error, FormatError, Result};
use crate::kernels::{
    argmax, matvec, nll_loss, relu, softmax, AdamConfig, AdamMoments, Matrix, Vector,
};

/// Standard deviation of the chip weight init.
pub const CHIP_INIT_STD: f64 = 0.02;
pub const DEFAULT_MLP_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChipKind {
    Linear,
    Mlp,
}

impl ChipKind {
    fn code(self) -> u8 {
        match self {
            ChipKind::Linear => 0,
            ChipKind::Mlp => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ChipKind::Linear),
            1 => Some(ChipKind::Mlp),
            _ => None,
        }
    }
}

impl std::fmt::Display for ChipKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChipKind::Linear => "linear",
            ChipKind::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for ChipKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ChipKind::Linear),
            "mlp" => Ok(ChipKind::Mlp),
            other => Err(Error::Config(format!("unknown chip kind {other:?} (expected linear or mlp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearChip {
    /// `C x d_model`.
    pub w: Matrix,
    pub b: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpChip {
    /// `h x d_model`.
    pub w2: Matrix,
    pub b2: Vector,
    /// `C x h`.
    pub w1: Matrix,
    pub b1: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Chip {
    Linear(LinearChip),
    Mlp(MlpChip),
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * CHIP_INIT_STD) as f32)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

fn add_bias(mut v: Vector, b: &Vector) -> Vector {
    for (x, &bi) in v.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += bi;
    }
    v
}

fn outer(a: &[f64], x: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(a.len(), x.len());
    for (row, &ai) in m.as_mut_slice().chunks_exact_mut(x.len()).zip(a) {
        for (g, &xj) in row.iter_mut().zip(x) {
            *g = (ai * xj) as f32;
        }
    }
    m
}

fn to_f32(v: &[f64]) -> Vector {
    Vector::new(v.iter().map(|&x| x as f32).collect())
}

/// Affine map evaluated entirely in f64 (used for gradients).
fn affine_f64(w: &Matrix, b: &Vector, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| {
            let dot: f64 = w.row(i).iter().zip(x).map(|(&wij, &xj)| f64::from(wij) * xj).sum();
            dot + f64::from(b[i])
        })
        .collect()
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Chip {
    /// Weights drawn from N(0, 0.02^2) with an RNG seeded by
    /// `master_seed ^ layer`; biases zero.
    pub fn init(
        kind: ChipKind,
        n_classes: usize,
        d_model: usize,
        hidden: usize,
        layer: usize,
        master_seed: u64,
    ) -> Result<Self> {
        check_dims(kind, n_classes, d_model, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ layer as u64);
        Ok(match kind {
            ChipKind::Linear => Chip::Linear(LinearChip {
                w: normal_matrix(n_classes, d_model, &mut rng),
                b: Vector::zeros(n_classes),
            }),
            ChipKind::Mlp => Chip::Mlp(MlpChip {
                w2: normal_matrix(hidden, d_model, &mut rng),
                b2: Vector::zeros(hidden),
                w1: normal_matrix(n_classes, hidden, &mut rng),
                b1: Vector::zeros(n_classes),
            }),
        })
    }

    /// All-zero chip; its output is uniform for every input.
    pub fn zeros(kind: ChipKind, n_classes: usize, d_model: usize, hidden: usize) -> Result<Self> {
        check_dims(kind, n_classes, d_model, hidden)?;
        Ok(match kind {
            ChipKind::Linear => Chip::Linear(LinearChip {
                w: Matrix::zeros(n_classes, d_model),
                b: Vector::zeros(n_classes),
            }),
            ChipKind::Mlp => Chip::Mlp(MlpChip {
                w2: Matrix::zeros(hidden, d_model),
                b2: Vector::zeros(hidden),
                w1: Matrix::zeros(n_classes, hidden),
                b1: Vector::zeros(n_classes),
            }),
        })
    }

    pub fn kind(&self) -> ChipKind {
        match self {
            Chip::Linear(_) => ChipKind::Linear,
            Chip::Mlp(_) => ChipKind::Mlp,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Chip::Linear(c) => c.w.rows(),
            Chip::Mlp(c) => c.w1.rows(),
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Chip::Linear(c) => c.w.cols(),
            Chip::Mlp(c) => c.w2.cols(),
        }
    }

    /// Hidden width; 0 for linear chips.
    pub fn hidden(&self) -> usize {
        match self {
            Chip::Linear(_) => 0,
            Chip::Mlp(c) => c.w2.rows(),
        }
    }

    /// Parameter tensors in file order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        match self {
            Chip::Linear(c) => vec![c.w.as_slice(), c.b.as_slice()],
            Chip::Mlp(c) => vec![
                c.w2.as_slice(),
                c.b2.as_slice(),
                c.w1.as_slice(),
                c.b1.as_slice(),
            ],
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Chip::Linear(c) => vec![c.w.as_mut_slice(), c.b.as_mut_slice()],
            Chip::Mlp(c) => vec![
                c.w2.as_mut_slice(),
                c.b2.as_mut_slice(),
                c.w1.as_mut_slice(),
                c.b1.as_mut_slice(),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Vector) -> Result<()> {
        ensure!(
            x.dim() == self.d_model(),
            "chip expects a {}-dim hidden state, got {}",
            self.d_model(),
            x.dim()
        );
        Ok(())
    }

    pub fn logits(&self, x: &Vector) -> Result<Vector> {
        self.check_input(x)?;
        Ok(match self {
            Chip::Linear(c) => add_bias(matvec(&c.w, x)?, &c.b),
            Chip::Mlp(c) => {
                let hidden = relu(&add_bias(matvec(&c.w2, x)?, &c.b2));
                add_bias(matvec(&c.w1, &hidden)?, &c.b1)
            }
        })
    }

    /// Class distribution for hidden state `x`.
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        softmax(&self.logits(x)?)
    }

    /// Predicted class (ties to the smallest index) and the distribution.
    pub fn predict(&self, x: &Vector) -> Result<(usize, Vector)> {
        let probs = self.forward(x)?;
        Ok((argmax(probs.as_slice()), probs))
    }

    /// Cross-entropy of `forward(x)` against `label`, and its gradient with
    /// respect to every parameter, shaped like `self`. The gradient pass runs
    /// in f64 and is rounded to f32 once at the end.
    pub fn loss_and_grad(&self, x: &Vector, label: usize) -> Result<(f64, Chip)> {
        self.check_input(x)?;
        ensure!(
            label < self.n_classes(),
            "label {label} out of range for {} classes",
            self.n_classes()
        );
        let loss = nll_loss(&self.forward(x)?, label)?;
        let x64: Vec<f64> = x.as_slice().iter().map(|&v| f64::from(v)).collect();
        let grad = match self {
            Chip::Linear(c) => {
                let mut dlogits = softmax_f64(&affine_f64(&c.w, &c.b, &x64));
                dlogits[label] -= 1.0;
                Chip::Linear(LinearChip {
                    w: outer(&dlogits, &x64),
                    b: to_f32(&dlogits),
                })
            }
            Chip::Mlp(c) => {
                let pre = affine_f64(&c.w2, &c.b2, &x64);
                let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
                let mut dlogits = softmax_f64(&affine_f64(&c.w1, &c.b1, &hidden));
                dlogits[label] -= 1.0;
                let mut dpre = vec![0.0f64; pre.len()];
                for (k, &dl) in dlogits.iter().enumerate() {
                    for (j, &w) in c.w1.row(k).iter().enumerate() {
                        dpre[j] += dl * f64::from(w);
                    }
                }
                for (d, &z) in dpre.iter_mut().zip(&pre) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                Chip::Mlp(MlpChip {
                    w2: outer(&dpre, &x64),
                    b2: to_f32(&dpre),
                    w1: outer(&dlogits, &hidden),
                    b1: to_f32(&dlogits),
                })
            }
        };
        Ok((loss, grad))
    }
}

fn check_dims(kind: ChipKind, n_classes: usize, d_model: usize, hidden: usize) -> Result<()> {
    ensure!(n_classes >= 2, "chips need at least 2 classes, got {n_classes}");
    ensure!(d_model >= 1, "chip d_model must be at least 1");
    if kind == ChipKind::Mlp {
        ensure!(hidden >= 1, "mlp chip hidden width must be at least 1");
    }
    Ok(())
}

/// Adam state of one chip.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipOptState {
    pub moments: Vec<AdamMoments>,
    pub steps: u64,
}

impl ChipOptState {
    fn for_chip(chip: &Chip) -> Self {
        Self {
            moments: chip.tensors().iter().map(|t| AdamMoments::zeros(t.len())).collect(),
            steps: 0,
        }
    }

    /// Applies one Adam step to `chip` from `grad`.
    pub fn apply(&mut self, chip: &mut Chip, grad: &Chip, cfg: &AdamConfig) -> Result<()> {
        self.steps += 1;
        for ((p, g), m) in chip
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.moments.iter_mut())
        {
            crate::kernels::adam_step(p, g, m, cfg, self.steps)?;
        }
        Ok(())
    }
}

/// One chip per backbone layer, each with its own optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipBank {
    kind: ChipKind,
    chips: Vec<Chip>,
    opt: Vec<ChipOptState>,
}

impl ChipBank {
    /// Chip `l` is `Chip::init(kind, .., l, master_seed)`.
    pub fn init(
        kind: ChipKind,
        n_layers: usize,
        n_classes: usize,
        d_model: usize,
        hidden: usize,
        master_seed: u64,
    ) -> Result<Self> {
        ensure!(n_layers >= 1, "a chip bank needs at least one layer");
        let chips = (0..n_layers)
            .map(|l| Chip::init(kind, n_classes, d_model, hidden, l, master_seed))
            .collect::<Result<Vec<_>>>()?;
        Self::from_chips(chips)
    }

    /// Wraps existing chips with fresh optimizer state. All chips must share
    /// kind and shape.
    pub fn from_chips(chips: Vec<Chip>) -> Result<Self> {
        ensure!(!chips.is_empty(), "a chip bank needs at least one chip");
        let first = &chips[0];
        let shape = (first.kind(), first.n_classes(), first.d_model(), first.hidden());
        for (l, c) in chips.iter().enumerate() {
            ensure!(
                (c.kind(), c.n_classes(), c.d_model(), c.hidden()) == shape,
                "chip {l} does not match the shape of chip 0"
            );
        }
        let opt = chips.iter().map(ChipOptState::for_chip).collect();
        Ok(Self {
            kind: shape.0,
            chips,
            opt,
        })
    }

    pub fn kind(&self) -> ChipKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.chips[0].n_classes()
    }

    pub fn d_model(&self) -> usize {
        self.chips[0].d_model()
    }

    pub fn hidden(&self) -> usize {
        self.chips[0].hidden()
    }

    pub fn chip(&self, layer: usize) -> Result<&Chip> {
        self.chips
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("no chip at layer {layer} (bank has {})", self.len())))
    }

    pub fn chips(&self) -> &[Chip] {
        &self.chips
    }

    pub fn opt_state(&self, layer: usize) -> &ChipOptState {
        &self.opt[layer]
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Chip], &mut [ChipOptState]) {
        (&mut self.chips, &mut self.opt)
    }

    pub fn into_chips(self) -> Vec<Chip> {
        self.chips
    }
}

/// Sum over layers of each chip's loss on its own layer's hidden state.
pub fn multichip_loss(bank: &ChipBank, trace: &HiddenTrace, label: usize) -> Result<f64> {
    ensure!(
        trace.len() == bank.len(),
        "trace has {} layers, bank has {} chips",
        trace.len(),
        bank.len()
    );
    let mut total = 0.0f64;
    for (chip, h) in bank.chips().iter().zip(trace.layers()) {
        total += nll_loss(&chip.forward(h)?, label)?;
    }
    Ok(total)
}

pub const CHIP_MAGIC: &[u8; 4] = b"CTCH";
pub const CHIP_VERSION: u16 = 1;

/// Chip header fields shared by the chip and pruned-model formats.
pub(crate) fn write_chip_header(
    w: &mut ByteWriter,
    kind: ChipKind,
    n_chips: usize,
    n_classes: usize,
    d_model: usize,
    hidden: usize,
) -> Result<()> {
    w.u8(kind.code());
    w.u32(checked_u32(n_chips, "n_layers")?);
    w.u32(checked_u32(n_classes, "n_classes")?);
    w.u32(checked_u32(d_model, "d_model")?);
    w.u32(checked_u32(hidden, "hidden")?);
    Ok(())
}

pub(crate) struct ChipHeader {
    pub kind: ChipKind,
    pub n_chips: usize,
    pub n_classes: usize,
    pub d_model: usize,
    pub hidden: usize,
}

pub(crate) const CHIP_HEADER_BYTES: usize = 1 + 4 * 4;

impl ChipHeader {
    pub fn read(r: &mut ByteReader<'_>) -> std::result::Result<Self, FormatError> {
        let code = r.u8()?;
        let kind = ChipKind::from_code(code)
            .ok_or_else(|| FormatError::InvalidHeader(format!("unknown chip kind code {code}")))?;
        let h = Self {
            kind,
            n_chips: r.u32()? as usize,
            n_classes: r.u32()? as usize,
            d_model: r.u32()? as usize,
            hidden: r.u32()? as usize,
        };
        check_dims(h.kind, h.n_classes, h.d_model, h.hidden)
            .map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
        Ok(h)
    }

    pub fn chip_param_count(&self) -> usize {
        let (c, d, h) = (self.n_classes, self.d_model, self.hidden);
        match self.kind {
            ChipKind::Linear => c * d + c,
            ChipKind::Mlp => h * d + h + c * h + c,
        }
    }

    pub fn read_chip(&self, r: &mut ByteReader<'_>) -> std::result::Result<Chip, FormatError> {
        let mut chip = Chip::zeros(self.kind, self.n_classes, self.d_model, self.hidden)
            .map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
        for t in chip.tensors_mut() {
            let v = r.f32s(t.len())?;
            t.copy_from_slice(&v);
        }
        Ok(chip)
    }
}

pub(crate) fn write_chip(w: &mut ByteWriter, chip: &Chip) {
    for t in chip.tensors() {
        w.f32s(t);
    }
}

impl ChipBank {
    /// `CTCH` file image: magic, version, kind u8, n_layers, C, d_model, h
    /// (u32 each), then each chip's tensors. Optimizer state is not stored.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHIP_MAGIC);
        w.u16(CHIP_VERSION);
        write_chip_header(&mut w, self.kind, self.len(), self.n_classes(), self.d_model(), self.hidden())
            .expect("chip dimensions fit in u32");
        for c in &self.chips {
            write_chip(&mut w, c);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHIP_MAGIC)?;
        r.version(CHIP_VERSION)?;
        let h = ChipHeader::read(&mut r)?;
        if h.n_chips == 0 {
            return Err(FormatError::InvalidHeader("chip file holds no chips".into()));
        }
        r.set_expected_len((6 + CHIP_HEADER_BYTES + h.n_chips * h.chip_param_count() * 4) as u64);
        let chips = (0..h.n_chips)
            .map(|_| h.read_chip(&mut r))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        r.finish()?;
        Ok(Self::from_chips(chips).expect("chips read from one header share a shape"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?).map_err(|e| Error::format(path, e))
    }
}
