// SPDX-License-Identifier: Apache-2.0

//! Helpers shared by the integration tests.

#![allow(dead_code)]

use chiptune::chips::*;
use chiptune::kernels::{Matrix, Vector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Flat f64 copy of a chip's parameters, in `Chip::tensors` order.
pub fn shadow(chip: &Chip) -> Vec<Vec<f64>> {
    chip.tensors()
        .iter()
        .map(|t| t.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| bi + w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Cross-entropy of a chip given as f64 tensors, computed from scratch.
pub fn loss_f64(kind: ChipKind, p: &[Vec<f64>], x: &[f64], label: usize) -> f64 {
    let logits = match kind {
        ChipKind::Linear => affine(&p[0], &p[1], x),
        ChipKind::Mlp => {
            let h: Vec<f64> = affine(&p[0], &p[1], x).into_iter().map(|z| z.max(0.0)).collect();
            affine(&p[2], &p[3], &h)
        }
    };
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

pub fn random_matrix(rows: usize, cols: usize, scale: f32, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_vector(dim: usize, scale: f32, rng: &mut ChaCha8Rng) -> Vector {
    Vector::new((0..dim).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn random_chip(kind: ChipKind, c: usize, d: usize, h: usize, rng: &mut ChaCha8Rng) -> Chip {
    match kind {
        ChipKind::Linear => Chip::Linear(LinearChip {
            w: random_matrix(c, d, 0.5, rng),
            b: random_vector(c, 0.5, rng),
        }),
        ChipKind::Mlp => Chip::Mlp(MlpChip {
            w2: random_matrix(h, d, 0.3, rng),
            b2: random_vector(h, 0.3, rng),
            w1: random_matrix(c, h, 0.3, rng),
            b1: random_vector(c, 0.3, rng),
        }),
    }
}

/// Checks every gradient component of 100 random (chip, input, label)
/// triples against central differences on an f64 shadow, step 1e-3.
/// Returns the checked and skipped counts and the worst relative error.
///
/// Components whose true magnitude is below `FLOOR` are compared against
/// the floor instead of their own size; their finite-difference value is
/// dominated by the O(h^2) truncation term. For MLP chips, a component whose
/// perturbation moves a hidden pre-activation across zero has no derivative
/// in the probed interval and is skipped.
pub fn check_gradients(kind: ChipKind) -> (usize, usize, f64) {
    const H: f64 = 1e-3;
    const FLOOR: f64 = 1e-3;
    let (c, d, hidden) = (4, 16, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(match kind {
        ChipKind::Linear => 11,
        ChipKind::Mlp => 12,
    });
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for _ in 0..100 {
        let chip = random_chip(kind, c, d, hidden, &mut rng);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let label = rng.random_range(0..c);
        let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let (loss, grad) = chip.loss_and_grad(&Vector::new(x.clone()), label).unwrap();
        let base = shadow(&chip);
        assert!((loss - loss_f64(kind, &base, &x64, label)).abs() < 1e-5);
        let pre = match kind {
            ChipKind::Mlp => affine(&base[0], &base[1], &x64),
            ChipKind::Linear => vec![],
        };
        for (t, g) in grad.tensors().iter().enumerate() {
            for (k, &analytic) in g.iter().enumerate() {
                if kind == ChipKind::Mlp && t < 2 {
                    let (unit, reach) = if t == 0 { (k / d, H * x64[k % d].abs()) } else { (k, H) };
                    if pre[unit].abs() <= reach {
                        skipped += 1;
                        continue;
                    }
                }
                let mut p = base.clone();
                p[t][k] += H;
                let up = loss_f64(kind, &p, &x64, label);
                p[t][k] -= 2.0 * H;
                let down = loss_f64(kind, &p, &x64, label);
                let numeric = (up - down) / (2.0 * H);
                let a = f64::from(analytic);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    (checked, skipped, worst)
}
