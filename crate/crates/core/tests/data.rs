// SPDX-License-Identifier: Apache-2.0

use chiptune::backbone::{pretrain_backbone, BackboneConfig, BackboneWeights, PretrainConfig};
use chiptune::data::*;
use chiptune::error::Error;

/// Counts groups pair by pair and returns the strict winner.
fn oracle_label(tokens: &[u32], c: usize) -> Option<usize> {
    let table = group_table(c);
    let mut counts = vec![0; c];
    for i in (0..tokens.len() - 1).step_by(2) {
        let (tag, value) = (tokens[i] as usize, tokens[i + 1] as usize);
        counts[table[tag - 1][value - c - 1]] += 1;
    }
    let best = (0..c).max_by_key(|&g| (counts[g], std::cmp::Reverse(g))).unwrap();
    (counts.iter().filter(|&&n| n == counts[best]).count() == 1).then_some(best)
}

fn task(n: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec::majority_token(n, seed)
}

#[test]
fn labels_agree_with_an_independent_count() {
    let spec = task(2_000, 11);
    for ex in gen_synthetic(&spec).unwrap() {
        assert_eq!(*ex.tokens.last().unwrap(), 0);
        assert_eq!(oracle_label(&ex.tokens, 4), Some(ex.label));
        assert_eq!(spec.label_of(&ex.tokens), Some(ex.label));
    }
}

#[test]
fn sequence_dominated_by_group_two_has_label_two() {
    let spec = task(1, 0);
    let c = spec.n_classes;
    let table = group_table(c);
    let pairs = spec.seq_len / 2;
    let mut tokens = Vec::new();
    for i in 0..pairs {
        let tag = i % c;
        // Every pair but the last one maps to group 2.
        let group = if i + 1 == pairs { 0 } else { 2 };
        let value = table[tag].iter().position(|&g| g == group).unwrap();
        tokens.push((tag + 1) as u32);
        tokens.push((c + 1 + value) as u32);
    }
    tokens.push(0);
    assert_eq!(spec.label_of(&tokens), Some(2));
    assert_eq!(oracle_label(&tokens, c), Some(2));
}

#[test]
fn tied_or_malformed_sequences_have_no_label() {
    let spec = task(1, 0);
    let c = spec.n_classes;
    let table = group_table(c);
    let pairs = spec.seq_len / 2;
    let mut tokens = Vec::new();
    for i in 0..pairs {
        let value = table[0].iter().position(|&g| g == i % 2).unwrap();
        tokens.extend([1, (c + 1 + value) as u32]);
    }
    tokens.push(0);
    assert_eq!(spec.label_of(&tokens), None);

    let ok = gen_synthetic(&task(1, 3)).unwrap().remove(0).tokens;
    assert_eq!(spec.label_of(&ok[1..]), None);
    let mut bad_query = ok.clone();
    *bad_query.last_mut().unwrap() = 1;
    assert_eq!(spec.label_of(&bad_query), None);
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let a = gen_synthetic(&task(300, 5)).unwrap();
    let b = gen_synthetic(&task(300, 5)).unwrap();
    let c = gen_synthetic(&task(300, 6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn classes_are_balanced_within_five_percent() {
    let data = gen_synthetic(&task(10_000, 17)).unwrap();
    let mut counts = [0usize; 4];
    for ex in &data {
        counts[ex.label] += 1;
    }
    for n in counts {
        assert!((2_375..=2_625).contains(&n), "{counts:?}");
    }
}

#[test]
fn split_examples() {
    let all_train = SplitFractions {
        train: 1.0,
        validation: 0.0,
        eval: 0.0,
    };
    let idx = split_indices(57, &all_train, 1).unwrap();
    assert_eq!(idx.train.len(), 57);
    assert!(idx.validation.is_empty() && idx.eval.is_empty());

    let fr = SplitFractions {
        train: 0.8,
        validation: 0.1,
        eval: 0.1,
    };
    let idx = split_indices(1_000, &fr, 2).unwrap();
    assert_eq!((idx.train.len(), idx.validation.len(), idx.eval.len()), (800, 100, 100));
    let mut seen: Vec<usize> = idx.train.iter().chain(&idx.validation).chain(&idx.eval).copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..1_000).collect::<Vec<_>>());
    assert_eq!(idx, split_indices(1_000, &fr, 2).unwrap());

    let data = gen_synthetic(&task(40, 9)).unwrap();
    let parts = split(&data, &fr, 3).unwrap();
    assert_eq!((parts.train.len(), parts.validation.len(), parts.eval.len()), (32, 4, 4));
}

#[test]
fn invalid_specs_are_contract_errors() {
    let bad = [
        SyntheticTaskSpec { n_classes: 1, ..task(10, 0) },
        SyntheticTaskSpec { seq_len: 16, ..task(10, 0) },
        SyntheticTaskSpec { vocab_size: 8, ..task(10, 0) },
    ];
    for spec in bad {
        assert!(matches!(gen_synthetic(&spec), Err(Error::Contract(_))), "{spec:?}");
    }
    let fr = SplitFractions {
        train: 0.9,
        validation: 0.2,
        eval: 0.0,
    };
    assert!(split_indices(10, &fr, 0).is_err());
}

#[test]
fn pretraining_reduces_the_loss() {
    let spec = task(0, 21);
    let init = BackboneWeights::init(BackboneConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 32,
        vocab_size: spec.vocab_size,
        max_seq_len: spec.seq_len,
        seed: 22,
    })
    .unwrap();
    let cfg = PretrainConfig {
        steps: 2_000,
        lr: 2e-3,
        batch_size: 8,
        seed: 23,
    };
    let out = pretrain_backbone(&init, &spec, &cfg).unwrap();
    assert_eq!(out.losses.len(), 2_000);
    // The head starts at zero, so the first loss is exactly ln C.
    assert!((out.losses[0] - 4f64.ln()).abs() < 1e-6);
    let tail = &out.losses[1_900..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(tail_mean < out.losses[0], "{tail_mean} vs {}", out.losses[0]);
    assert_ne!(out.weights, init);
}
