// SPDX-License-Identifier: Apache-2.0

//! Simultaneous training of every chip in a bank against frozen features.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::HiddenTrace;
use crate::cache::FeatureSource;
use crate::chips::{Chip, ChipBank};
use crate::error::{ensure, Result};
use crate::kernels::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_examples: usize,
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 1,
            batch_size: 1,
            max_examples: 20_000,
            eval_every: 2_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            master_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Large-batch, many-epoch regime for training from cached features.
    pub fn cached_features_preset(master_seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: 512,
            master_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.max_examples >= 1, "max_examples must be at least 1");
        ensure!(self.eval_every >= 1, "eval_every must be at least 1");
        ensure!(
            self.eval_every <= self.max_examples,
            "eval_every ({}) exceeds max_examples ({})",
            self.eval_every,
            self.max_examples
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0,
            "invalid Adam hyperparameters"
        );
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Eval accuracy of every layer, recorded at increasing step counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearningCurve {
    pub steps: Vec<u64>,
    /// `accuracy[k][l]` is layer `l`'s accuracy at `steps[k]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl LearningCurve {
    /// `(step, accuracy)` pairs for one layer.
    pub fn layer(&self, l: usize) -> Vec<(u64, f64)> {
        self.steps
            .iter()
            .zip(&self.accuracy)
            .map(|(&s, acc)| (s, acc[l]))
            .collect()
    }

    pub fn per_layer(&self) -> Vec<Vec<(u64, f64)>> {
        let n = self.accuracy.first().map_or(0, Vec::len);
        (0..n).map(|l| self.layer(l)).collect()
    }

    /// Accuracy of layer `l` at exactly `step`, if it was evaluated then.
    pub fn at(&self, step: u64, l: usize) -> Option<f64> {
        let k = self.steps.iter().position(|&s| s == step)?;
        Some(self.accuracy[k][l])
    }

    /// CSV with columns `step,layer,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,accuracy\n");
        for (s, acc) in self.steps.iter().zip(&self.accuracy) {
            for (l, a) in acc.iter().enumerate() {
                writeln!(out, "{s},{l},{}", crate::report::fmt_float(*a)).unwrap();
            }
        }
        out
    }
}

/// Number of optimizer steps `train_bank` will take on `n_train` examples.
pub fn total_steps(n_train: usize, cfg: &TrainConfig) -> u64 {
    let used = n_train.min(cfg.max_examples);
    (cfg.epochs * used.div_ceil(cfg.batch_size)) as u64
}

/// Trains every chip of `bank` on `train`, one Adam step per batch, and
/// evaluates all layers on `eval` every `eval_every` steps and after the last
/// step. Each chip sees the same example order and is updated only from its
/// own loss, so chips are trained in parallel without changing the result.
pub fn train_bank(
    mut bank: ChipBank,
    train: &(impl FeatureSource + ?Sized),
    eval: &(impl FeatureSource + ?Sized),
    cfg: &TrainConfig,
) -> Result<(ChipBank, LearningCurve)> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(!eval.is_empty(), "eval set is empty");
    check_source(&bank, train)?;
    check_source(&bank, eval)?;

    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let mut pool: Vec<usize> = (0..train.len()).collect();
    pool.shuffle(&mut rng);
    pool.truncate(cfg.max_examples);

    let mut curve = LearningCurve::default();
    let mut step = 0u64;
    let total = total_steps(train.len(), cfg);
    for _ in 0..cfg.epochs {
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<(HiddenTrace, usize)> = batch
                .iter()
                .map(|&i| Ok((train.trace(i)?, train.label(i))))
                .collect::<Result<_>>()?;
            let (chips, opt) = bank.parts_mut();
            chips
                .par_iter_mut()
                .zip(opt.par_iter_mut())
                .enumerate()
                .try_for_each(|(l, (chip, state))| -> Result<()> {
                    let grad = batch_grad(chip, &examples, l)?;
                    state.apply(chip, &grad, &adam)
                })?;
            step += 1;
            if step % cfg.eval_every as u64 == 0 || step == total {
                curve.steps.push(step);
                curve.accuracy.push(evaluate_bank(&bank, eval)?);
            }
        }
    }
    ensure!(bank.chips().iter().all(Chip::is_finite), "chip training diverged");
    Ok((bank, curve))
}

/// Mean gradient of chip `l` over a batch.
fn batch_grad(chip: &Chip, examples: &[(HiddenTrace, usize)], l: usize) -> Result<Chip> {
    let (first, rest) = examples.split_first().expect("batches are non-empty");
    let (_, mut grad) = chip.loss_and_grad(first.0.layer(l), first.1)?;
    if rest.is_empty() {
        return Ok(grad);
    }
    for (trace, label) in rest {
        let (_, g) = chip.loss_and_grad(trace.layer(l), *label)?;
        for (acc, gi) in grad.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / examples.len() as f32;
    for t in grad.tensors_mut() {
        for v in t.iter_mut() {
            *v *= scale;
        }
    }
    Ok(grad)
}

fn check_source(bank: &ChipBank, source: &(impl FeatureSource + ?Sized)) -> Result<()> {
    ensure!(
        source.n_layers() == bank.len(),
        "features have {} layers, bank has {} chips",
        source.n_layers(),
        bank.len()
    );
    ensure!(
        source.d_model() == bank.d_model(),
        "features are {}-dimensional, chips expect {}",
        source.d_model(),
        bank.d_model()
    );
    Ok(())
}

/// Fraction of `data` each chip classifies correctly (argmax ties go to the
/// smallest class).
pub fn evaluate_bank(bank: &ChipBank, data: &(impl FeatureSource + ?Sized)) -> Result<Vec<f64>> {
    ensure!(!data.is_empty(), "eval set is empty");
    check_source(bank, data)?;
    let c = bank.n_classes();
    let correct = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<u64>> {
            let label = data.label(i);
            ensure!(label < c, "label {label} out of range for {c} classes");
            let trace = data.trace(i)?;
            bank.chips()
                .iter()
                .zip(trace.layers())
                .map(|(chip, h)| Ok(u64::from(chip.predict(h)?.0 == label)))
                .collect()
        })
        .try_reduce(
            || vec![0u64; bank.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(a)
            },
        )?;
    Ok(correct.into_iter().map(|k| k as f64 / data.len() as f64).collect())
}
