// SPDX-License-Identifier: Apache-2.0

//! Trains a chip bank against a frozen backbone and prints the learning
//! curve of every layer. The backbone digest is checked before and after.
//!
//! ```text
//! cargo run --release --example train_chips -- [linear|mlp]
//! ```

use chiptune::backbone::{pretrain_backbone, BackboneConfig, BackboneWeights, PretrainConfig};
use chiptune::cache::{LiveFeatures, Subset};
use chiptune::chips::{ChipBank, ChipKind};
use chiptune::data::{gen_synthetic, split_indices, SplitFractions, SyntheticTaskSpec};
use chiptune::trainer::{train_bank, TrainConfig};

fn main() -> chiptune::error::Result<()> {
    let kind: ChipKind = std::env::args().nth(1).unwrap_or_else(|| "linear".into()).parse()?;
    let task = SyntheticTaskSpec::majority_token(3_000, 4);
    let init = BackboneWeights::init(BackboneConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ff: 32,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        seed: 5,
    })?;
    let pretrain = PretrainConfig {
        steps: 1_000,
        batch_size: 16,
        seed: 6,
        ..PretrainConfig::default()
    };
    let backbone = pretrain_backbone(&init, &task, &pretrain)?.weights;
    let data = gen_synthetic(&task)?;
    let split = split_indices(data.len(), &SplitFractions::default(), 7)?;
    let live = LiveFeatures::new(&backbone, &data);

    let digest = backbone.digest();
    let bank = ChipBank::init(kind, backbone.n_layers(), task.n_classes, backbone.d_model(), 64, 8)?;
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        eval_every: 500,
        master_seed: 9,
        ..TrainConfig::default()
    };
    let (_, curve) = train_bank(bank, &Subset::new(&live, &split.train)?, &Subset::new(&live, &split.eval)?, &cfg)?;
    assert_eq!(backbone.digest(), digest, "backbone must stay frozen");

    println!("{kind} chips, accuracy per layer");
    for (step, acc) in curve.steps.iter().zip(&curve.accuracy) {
        let cols: Vec<String> = acc.iter().map(|a| format!("{a:.3}")).collect();
        println!("step {step:>5}: {}", cols.join("  "));
    }
    println!("backbone digest unchanged: {digest}");
    Ok(())
}
