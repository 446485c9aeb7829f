// SPDX-License-Identifier: Apache-2.0

//! Synthetic classification tasks and dataset splitting.
//!
//! `majority-token` sequences are `P` (tag, value) pairs followed by a query
//! token `0`. Tags are tokens `1..=C` and values are tokens `C+1..=2C`. Each
//! tag carries a fixed permutation mapping a value to one of `C` groups, so a
//! pair's group is known only once both of its tokens are combined. The label
//! is the group with the strictly largest count over all pairs. Generated
//! sequences use every tag and every value equally often (up to `P mod C`
//! leftovers), so the multiset of tokens says nothing about the label; only
//! the pairing does.
//!
//! `key-lookup` sequences are `P` (key, value) pairs with distinct keys
//! followed by a query key; the label is the value paired with that key.
//!
//! `parity-of-count` sequences are uniform tokens; the label is the number of
//! occurrences of token `0` modulo `C`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenId;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MajorityToken,
    KeyLookup,
    ParityOfCount,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::MajorityToken => "majority-token",
            TaskKind::KeyLookup => "key-lookup",
            TaskKind::ParityOfCount => "parity-of-count",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<TokenId>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// The 4-class majority task over 8 pairs used by the desk-scale runs.
    pub fn majority_token(n_examples: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::MajorityToken,
            vocab_size: 9,
            seq_len: 17,
            n_classes: 4,
            n_examples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        ensure!(c >= 2, "n_classes must be at least 2, got {c}");
        ensure!(self.seq_len >= 1, "seq_len must be at least 1");
        match self.kind {
            TaskKind::MajorityToken => {
                ensure!(
                    self.seq_len >= 3 && self.seq_len % 2 == 1,
                    "majority-token needs an odd seq_len >= 3 (pairs plus query), got {}",
                    self.seq_len
                );
                ensure!(
                    self.vocab_size >= 2 * c + 1,
                    "majority-token with {c} classes needs vocab_size >= {}",
                    2 * c + 1
                );
            }
            TaskKind::KeyLookup => {
                ensure!(
                    self.seq_len >= 3 && self.seq_len % 2 == 1,
                    "key-lookup needs an odd seq_len >= 3 (pairs plus query), got {}",
                    self.seq_len
                );
                ensure!(
                    self.vocab_size >= c + self.n_pairs(),
                    "key-lookup needs at least {} distinct keys plus {c} value tokens",
                    self.n_pairs()
                );
            }
            TaskKind::ParityOfCount => {
                ensure!(self.vocab_size >= 2, "parity-of-count needs vocab_size >= 2");
                ensure!(
                    self.seq_len + 1 >= c,
                    "parity-of-count cannot reach all {c} classes with seq_len {}",
                    self.seq_len
                );
            }
        }
        Ok(())
    }

    fn n_pairs(&self) -> usize {
        self.seq_len / 2
    }

    /// Deterministic label of `tokens`, or `None` when the sequence has no
    /// well-defined label (a tied majority, or a malformed sequence).
    pub fn label_of(&self, tokens: &[TokenId]) -> Option<usize> {
        let c = self.n_classes;
        match self.kind {
            TaskKind::MajorityToken => {
                if tokens.len() != self.seq_len || tokens[self.seq_len - 1] != 0 {
                    return None;
                }
                let table = group_table(c);
                let mut counts = vec![0usize; c];
                for pair in tokens[..self.seq_len - 1].chunks_exact(2) {
                    let (tag, value) = (pair[0] as usize, pair[1] as usize);
                    if !(1..=c).contains(&tag) || !(c + 1..=2 * c).contains(&value) {
                        return None;
                    }
                    counts[table[tag - 1][value - c - 1]] += 1;
                }
                unique_argmax(&counts)
            }
            TaskKind::KeyLookup => {
                if tokens.len() != self.seq_len {
                    return None;
                }
                let n_keys = self.vocab_size - c;
                let query = *tokens.last()?;
                let pairs = &tokens[..self.seq_len - 1];
                let mut hit = None;
                for pair in pairs.chunks_exact(2) {
                    let value = pair[1] as usize;
                    if (pair[0] as usize) >= n_keys || !(n_keys..n_keys + c).contains(&value) {
                        return None;
                    }
                    if pair[0] == query {
                        if hit.is_some() {
                            return None;
                        }
                        hit = Some(value - n_keys);
                    }
                }
                hit
            }
            TaskKind::ParityOfCount => {
                if tokens.len() != self.seq_len {
                    return None;
                }
                Some(tokens.iter().filter(|&&t| t == 0).count() % c)
            }
        }
    }

    /// Positions of `tokens` that carry a well-defined class, with that
    /// class. For `majority-token` this is every value position whose prefix
    /// already has a strict majority group, plus the query position. Other
    /// kinds only label the last position.
    pub fn supervised_positions(&self, tokens: &[TokenId], label: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.kind == TaskKind::MajorityToken {
            let c = self.n_classes;
            let table = group_table(c);
            let mut counts = vec![0usize; c];
            for (i, pair) in tokens[..tokens.len().saturating_sub(1)].chunks_exact(2).enumerate() {
                let (tag, value) = (pair[0] as usize, pair[1] as usize);
                if !(1..=c).contains(&tag) || !(c + 1..=2 * c).contains(&value) {
                    break;
                }
                counts[table[tag - 1][value - c - 1]] += 1;
                if let Some(g) = unique_argmax(&counts) {
                    out.push((2 * i + 1, g));
                }
            }
        }
        out.push((tokens.len() - 1, label));
        out
    }

    /// Draws one example whose label is `target`.
    pub fn sample_with_label(&self, rng: &mut impl Rng, target: usize) -> LabeledExample {
        debug_assert!(target < self.n_classes);
        let c = self.n_classes;
        let tokens = match self.kind {
            TaskKind::MajorityToken => {
                let p = self.n_pairs();
                let table = group_table(c);
                let mut tags: Vec<usize> = (0..p).map(|i| i % c).collect();
                let mut values = tags.clone();
                loop {
                    tags.shuffle(rng);
                    values.shuffle(rng);
                    let mut counts = vec![0usize; c];
                    for (&t, &v) in tags.iter().zip(&values) {
                        counts[table[t][v]] += 1;
                    }
                    if unique_argmax(&counts) == Some(target) {
                        break;
                    }
                }
                let mut tokens = Vec::with_capacity(self.seq_len);
                for (&t, &v) in tags.iter().zip(&values) {
                    tokens.push((t + 1) as TokenId);
                    tokens.push((c + 1 + v) as TokenId);
                }
                tokens.push(0);
                tokens
            }
            TaskKind::KeyLookup => {
                let n_keys = self.vocab_size - c;
                let p = self.n_pairs();
                let mut keys: Vec<usize> = (0..n_keys).collect();
                keys.shuffle(rng);
                keys.truncate(p);
                let query_slot = rng.random_range(0..p);
                let mut tokens = Vec::with_capacity(self.seq_len);
                for (i, &k) in keys.iter().enumerate() {
                    let v = if i == query_slot { target } else { rng.random_range(0..c) };
                    tokens.push(k as TokenId);
                    tokens.push((n_keys + v) as TokenId);
                }
                tokens.push(keys[query_slot] as TokenId);
                tokens
            }
            TaskKind::ParityOfCount => loop {
                let tokens: Vec<TokenId> = (0..self.seq_len)
                    .map(|_| rng.random_range(0..self.vocab_size) as TokenId)
                    .collect();
                if tokens.iter().filter(|&&t| t == 0).count() % c == target {
                    break tokens;
                }
            },
        };
        LabeledExample {
            tokens,
            label: target,
        }
    }

    /// Draws one example with a uniformly random label.
    pub fn sample(&self, rng: &mut impl Rng) -> LabeledExample {
        let target = rng.random_range(0..self.n_classes);
        self.sample_with_label(rng, target)
    }
}

fn unique_argmax(counts: &[usize]) -> Option<usize> {
    let max = *counts.iter().max()?;
    let mut hits = counts.iter().enumerate().filter(|(_, &n)| n == max);
    let first = hits.next()?.0;
    hits.next().is_none().then_some(first)
}

/// `table[tag][value] = group` for the majority task with `c` classes; each
/// row is a permutation of `0..c` fixed by the tag index alone.
pub fn group_table(c: usize) -> Vec<Vec<usize>> {
    (0..c)
        .map(|tag| {
            let mut row: Vec<usize> = (0..c).collect();
            row.shuffle(&mut ChaCha8Rng::seed_from_u64(tag as u64));
            row
        })
        .collect()
}

/// Generates `spec.n_examples` examples. Labels cycle through the classes
/// before a seeded shuffle, so every class count is within one of the mean.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut targets: Vec<usize> = (0..spec.n_examples).map(|i| i % spec.n_classes).collect();
    targets.shuffle(&mut rng);
    Ok(targets
        .into_iter()
        .map(|t| spec.sample_with_label(&mut rng, t))
        .collect())
}

/// Train / validation / eval fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub eval: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            eval: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.eval];
        ensure!(
            parts.iter().all(|f| f.is_finite() && *f >= 0.0),
            "split fractions must be finite and non-negative: {parts:?}"
        );
        ensure!(
            (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            "split fractions must sum to 1: {parts:?}"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Seeded permutation of `0..n` cut into three parts. Validation and eval
/// sizes are `floor(f * n)`; the remainder goes to train.
pub fn split_indices(n: usize, fractions: &SplitFractions, seed: u64) -> Result<SplitIndices> {
    fractions.validate()?;
    let n_val = (fractions.validation * n as f64 + 1e-9).floor() as usize;
    let n_eval = (fractions.eval * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n - n_val - n_eval;
    let eval = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Ok(SplitIndices {
        train: order,
        validation,
        eval,
    })
}

pub struct Split {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
}

pub fn split(data: &[LabeledExample], fractions: &SplitFractions, seed: u64) -> Result<Split> {
    let idx = split_indices(data.len(), fractions, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| data[i].clone()).collect();
    Ok(Split {
        train: pick(&idx.train),
        validation: pick(&idx.validation),
        eval: pick(&idx.eval),
    })
}
