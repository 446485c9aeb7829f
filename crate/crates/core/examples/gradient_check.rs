// SPDX-License-Identifier: Apache-2.0

//! Compares a linear chip's analytic gradient with central finite
//! differences computed in f64.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use chiptune::chips::{Chip, ChipKind};
use chiptune::kernels::Vector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cross-entropy of a linear chip with weights `w` (rows of `x.len()`) and bias `b`.
fn loss(w: &[f64], b: &[f64], x: &[f64], label: usize) -> f64 {
    let logits: Vec<f64> = b
        .iter()
        .enumerate()
        .map(|(i, bi)| bi + w[i * x.len()..(i + 1) * x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn main() -> chiptune::error::Result<()> {
    let (c, d, h) = (4, 8, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let chip = Chip::init(ChipKind::Linear, c, d, 0, 0, 22)?;
    let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let label = 2;
    let (l, grad) = chip.loss_and_grad(&Vector::new(x.clone()), label)?;
    println!("loss {l:.6}");

    let params: Vec<Vec<f64>> = chip.tensors().iter().map(|t| t.iter().map(|&v| f64::from(v)).collect()).collect();
    let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let mut worst = 0.0f64;
    for (t, g) in grad.tensors().iter().enumerate() {
        for (k, &analytic) in g.iter().enumerate() {
            let mut p = params.clone();
            p[t][k] += h;
            let up = loss(&p[0], &p[1], &x64, label);
            p[t][k] -= 2.0 * h;
            let down = loss(&p[0], &p[1], &x64, label);
            let numeric = (up - down) / (2.0 * h);
            let a = f64::from(analytic);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    println!("worst relative error over {} components: {worst:.2e}", c * d + c);
    Ok(())
}
