// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pretrain::PretrainModel;
use super::*;
use crate::data::{LabeledExample, SyntheticTaskSpec};
use crate::error::FormatError;

fn toy_config(n_layers: usize, seed: u64) -> BackboneConfig {
    BackboneConfig {
        n_layers,
        d_model: 16,
        n_heads: 4,
        d_ff: 24,
        vocab_size: 11,
        max_seq_len: 12,
        seed,
    }
}

fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

/// Replaces every parameter with a draw of the given scale so that gradients
/// and activations are far from the near-zero init regime.
fn randomize(w: &mut BackboneWeights, scale: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in w.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    for l in &mut w.layers {
        for g in l.ln1_gain.iter_mut().chain(l.ln2_gain.iter_mut()) {
            *g += 1.0;
        }
    }
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let a = BackboneWeights::init(toy_config(2, 5)).unwrap();
    let b = BackboneWeights::init(toy_config(2, 5)).unwrap();
    let c = BackboneWeights::init(toy_config(2, 6)).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn init_respects_truncation_and_fixed_tensors() {
    let w = BackboneWeights::init(toy_config(3, 1)).unwrap();
    let bound = (2.0 * INIT_STD) as f32;
    for l in w.layers() {
        assert!(l.ln1_gain.iter().chain(&l.ln2_gain).all(|&g| g == 1.0));
        assert!(l.bq.iter().chain(&l.b_up).chain(&l.b_down).all(|&b| b == 0.0));
        assert!(l.wq.iter().chain(&l.w_up).all(|v| v.abs() <= bound));
    }
    let n = w.token_embedding().len() as f64;
    let var = w.token_embedding().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / n;
    // A normal truncated at 2 sigma has standard deviation ~0.88 sigma.
    assert!((var.sqrt() - 0.88 * INIT_STD).abs() < 0.2 * INIT_STD);
}

#[test]
fn golden_digest_for_eight_by_sixty_four() {
    let cfg = BackboneConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 9,
        max_seq_len: 17,
        seed: 0,
    };
    let w = BackboneWeights::init(cfg).unwrap();
    assert_eq!(w.digest(), GOLDEN_DIGEST);
}

const GOLDEN_DIGEST: &str = "0012d922f4b1b2d1420652d95eaf94e7613895d038ca9e3c5661579a8529843c";

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = toy_config(2, 0);
    cfg.n_heads = 5;
    assert!(BackboneWeights::init(cfg).is_err());
    let mut cfg = toy_config(0, 0);
    cfg.n_layers = 0;
    assert!(BackboneWeights::init(cfg).is_err());
    let mut cfg = toy_config(2, 0);
    cfg.vocab_size = 1;
    assert!(BackboneWeights::init(cfg).is_err());
}

#[test]
fn trace_shape_and_determinism() {
    let w = BackboneWeights::init(toy_config(3, 2)).unwrap();
    let tokens = [1, 4, 2, 9, 0];
    let a = w.forward_trace(&tokens).unwrap();
    let b = w.forward_trace(&tokens).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.layers().iter().all(|h| h.dim() == 16));
    assert_eq!(a, b);
}

#[test]
fn bad_token_sequences_are_contract_violations() {
    let w = BackboneWeights::init(toy_config(2, 2)).unwrap();
    assert!(w.forward_trace(&[]).is_err());
    assert!(w.forward_trace(&[11]).is_err());
    assert!(w.forward_trace(&[0; 13]).is_err());
    assert!(w.forward_truncated(&[0, 1], 2).is_err());
}

#[test]
fn truncated_forward_is_bit_identical_to_trace() {
    let mut w = BackboneWeights::init(toy_config(8, 3)).unwrap();
    randomize(&mut w, 0.3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let len = rng.random_range(1..=12);
        let tokens = random_tokens(&mut rng, len, 11);
        let trace = w.forward_trace(&tokens).unwrap();
        for l in [0, 4, 7] {
            let h = w.forward_truncated(&tokens, l).unwrap();
            assert_eq!(h.as_slice(), trace.layer(l).as_slice());
            let cut = w.truncated(l).unwrap();
            assert_eq!(cut.n_layers(), l + 1);
            assert_eq!(cut.forward_truncated(&tokens, l).unwrap(), h);
        }
    }
}

#[test]
fn earlier_positions_ignore_later_tokens() {
    let mut w = BackboneWeights::init(toy_config(3, 5)).unwrap();
    randomize(&mut w, 0.3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 16;
    for _ in 0..20 {
        let tokens = random_tokens(&mut rng, 10, 11);
        let j = rng.random_range(1..10);
        let mut changed = tokens.clone();
        changed[j] = (changed[j] + 1 + rng.random_range(0..10)) % 11;
        let a = w.forward_positions(&tokens, 2).unwrap();
        let b = w.forward_positions(&changed, 2).unwrap();
        assert_eq!(a[..j * d], b[..j * d]);
        assert_ne!(a[j * d..], b[j * d..]);
    }
}

/// Straight-line f64 evaluation of embeddings plus block 0, written
/// independently of the batched kernels.
fn oracle_first_block(w: &BackboneWeights, tokens: &[TokenId]) -> Vec<f64> {
    let cfg = w.config();
    let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
    let dh = d / h;
    let n = tokens.len();
    let lw = &w.layers()[0];
    let g = |v: &[f32], i: usize| f64::from(v[i]);
    let mut x = vec![vec![0.0f64; d]; n];
    for p in 0..n {
        for i in 0..d {
            x[p][i] = g(w.token_embedding(), tokens[p] as usize * d + i) + g(w.position_embedding(), p * d + i);
        }
    }
    let norm = |row: &[f64], gain: &[f32], bias: &[f32]| -> Vec<f64> {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        (0..d)
            .map(|i| (row[i] - mean) / (var + 1e-5).sqrt() * g(gain, i) + g(bias, i))
            .collect()
    };
    let affine = |inp: &[f64], wt: &[f32], b: &[f32], n_out: usize| -> Vec<f64> {
        (0..n_out)
            .map(|o| g(b, o) + (0..inp.len()).map(|i| g(wt, o * inp.len() + i) * inp[i]).sum::<f64>())
            .collect()
    };
    let normed: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &lw.ln1_gain, &lw.ln1_bias)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &lw.wq, &lw.bq, d)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &lw.wk, &lw.bk, d)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &lw.wv, &lw.bv, d)).collect();
    let mut ctx = vec![vec![0.0f64; d]; n];
    for p in 0..n {
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let scores: Vec<f64> = (0..=p)
                .map(|s| cols.clone().map(|c| q[p][c] * k[s][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols {
                ctx[p][c] = (0..=p).map(|s| e[s] / z * v[s][c]).sum();
            }
        }
    }
    let last = n - 1;
    let attn = affine(&ctx[last], &lw.wo, &lw.bo, d);
    let x1: Vec<f64> = (0..d).map(|i| x[last][i] + attn[i]).collect();
    let n2 = norm(&x1, &lw.ln2_gain, &lw.ln2_bias);
    let gelu = |z: f64| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());
    let hid: Vec<f64> = affine(&n2, &lw.w_up, &lw.b_up, f).into_iter().map(gelu).collect();
    let out = affine(&hid, &lw.w_down, &lw.b_down, d);
    (0..d).map(|i| x1[i] + out[i]).collect()
}

#[test]
fn first_layer_matches_straight_line_oracle() {
    let mut w = BackboneWeights::init(toy_config(2, 7)).unwrap();
    randomize(&mut w, 0.25, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let len = rng.random_range(1..=12);
        let tokens = random_tokens(&mut rng, len, 11);
        let got = w.forward_trace(&tokens).unwrap();
        let want = oracle_first_block(&w, &tokens);
        for (a, b) in got.layer(0).as_slice().iter().zip(&want) {
            assert!((f64::from(*a) - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn save_load_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ctbw");
    let w = BackboneWeights::init(toy_config(2, 12)).unwrap();
    w.save(&path).unwrap();
    let back = BackboneWeights::load(&path).unwrap();
    assert_eq!(back.digest(), w.digest());
    assert_eq!(back, w);

    let bytes = w.to_bytes();
    let truncated = BackboneWeights::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert_eq!(
        truncated,
        FormatError::Truncated {
            expected: bytes.len() as u64,
            actual: bytes.len() as u64 - 3
        }
    );
    let mut wrong = bytes.clone();
    wrong[..4].copy_from_slice(b"XXXX");
    let err = BackboneWeights::from_bytes(&wrong).unwrap_err();
    assert!(matches!(&err, FormatError::BadMagic { found, .. } if found == "XXXX"));
    assert!(err.to_string().contains("CTBW"));
    let mut versioned = bytes.clone();
    versioned[4] = 2;
    assert!(matches!(
        BackboneWeights::from_bytes(&versioned),
        Err(FormatError::UnsupportedVersion { found: 2, .. })
    ));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(
        BackboneWeights::from_bytes(&long),
        Err(FormatError::LengthMismatch { .. })
    ));
}

fn toy_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        vocab_size: 11,
        seq_len: 9,
        ..SyntheticTaskSpec::majority_token(0, 3)
    }
}

#[test]
fn pretraining_backward_matches_finite_differences() {
    let mut w = BackboneWeights::init(BackboneConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 11,
        max_seq_len: 9,
        seed: 1,
    })
    .unwrap();
    randomize(&mut w, 0.4, 21);
    let mut model = PretrainModel::new(w, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for t in [&mut model.w_head, &mut model.b_head, &mut model.lnf_bias] {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let task = toy_task();
    let batch: Vec<LabeledExample> = (0..3).map(|_| task.sample(&mut rng)).collect();
    let mut grads = model.zeroed();
    model.loss_and_grads(&task, &batch, Some(&mut grads)).unwrap();

    // One random direction per tensor; compare the directional derivative
    // with a central difference along it.
    let n_tensors = model.tensors().len();
    let h = 1e-2f32;
    for ti in 0..n_tensors {
        let len = model.tensors()[ti].len();
        let dir: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = grads.tensors()[ti]
            .iter()
            .zip(&dir)
            .map(|(&g, &u)| f64::from(g) * f64::from(u))
            .sum();
        let eval = |sign: f32| {
            let mut m = model.clone();
            for (p, &u) in m.tensors_mut()[ti].iter_mut().zip(&dir) {
                *p += sign * h * u;
            }
            m.loss_and_grads(&task, &batch, None).unwrap()
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * f64::from(h));
        let err = (analytic - numeric).abs();
        assert!(
            err <= 2e-3 + 2e-2 * numeric.abs(),
            "tensor {ti}: analytic {analytic}, numeric {numeric}"
        );
    }
}

#[test]
fn pretraining_zero_steps_keeps_digest_and_is_deterministic() {
    let w = BackboneWeights::init(BackboneConfig {
        max_seq_len: 9,
        ..toy_config(2, 4)
    })
    .unwrap();
    let task = toy_task();
    let zero = PretrainConfig {
        steps: 0,
        ..PretrainConfig::default()
    };
    assert_eq!(pretrain_backbone(&w, &task, &zero).unwrap().weights.digest(), w.digest());

    let cfg = PretrainConfig {
        steps: 30,
        lr: 1e-3,
        batch_size: 4,
        seed: 9,
    };
    let before = w.digest();
    let a = pretrain_backbone(&w, &task, &cfg).unwrap();
    let b = pretrain_backbone(&w, &task, &cfg).unwrap();
    assert_eq!(w.digest(), before);
    assert_eq!(a.weights.digest(), b.weights.digest());
    assert_ne!(a.weights.digest(), before);
    assert_eq!(a.losses.len(), 30);
}

#[test]
fn pretraining_rejects_incompatible_task() {
    let w = BackboneWeights::init(toy_config(2, 4)).unwrap();
    let task = SyntheticTaskSpec {
        vocab_size: 20,
        ..toy_task()
    };
    assert!(pretrain_backbone(&w, &task, &PretrainConfig::default()).is_err());
}
