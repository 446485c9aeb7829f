// SPDX-License-Identifier: Apache-2.0

//! Pretrains a small backbone on the majority task and prints the loss
//! every 250 steps (mean over the preceding window).
//!
//! ```text
//! cargo run --release --example pretrain -- [steps]
//! ```

use chiptune::backbone::{pretrain_backbone, BackboneConfig, BackboneWeights, PretrainConfig};
use chiptune::data::SyntheticTaskSpec;

fn main() -> chiptune::error::Result<()> {
    let steps = std::env::args().nth(1).map_or(1_500, |s| s.parse().expect("steps must be a count"));
    let task = SyntheticTaskSpec::majority_token(0, 1);
    let init = BackboneWeights::init(BackboneConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ff: 32,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        seed: 2,
    })?;
    let cfg = PretrainConfig {
        steps,
        batch_size: 16,
        seed: 3,
        ..PretrainConfig::default()
    };
    let out = pretrain_backbone(&init, &task, &cfg)?;
    for (k, window) in out.losses.chunks(250).enumerate() {
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        println!("steps {:>5}..{:>5}  loss {mean:.4}", k * 250 + 1, k * 250 + window.len());
    }
    println!("digest before {}", init.digest());
    println!("digest after  {}", out.weights.digest());
    Ok(())
}
