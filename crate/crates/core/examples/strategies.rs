// SPDX-License-Identifier: Apache-2.0

//! Trains a chip bank and compares the Fixed, Validate and Optimal chip
//! selection strategies on the same eval set.
//!
//! ```text
//! cargo run --release --example strategies
//! ```

use chiptune::backbone::{pretrain_backbone, BackboneConfig, BackboneWeights, PretrainConfig};
use chiptune::cache::{FeatureCache, LiveFeatures, Subset};
use chiptune::chips::{ChipBank, ChipKind};
use chiptune::data::{gen_synthetic, split_indices, SplitFractions, SyntheticTaskSpec};
use chiptune::selection::{select_chip, SelectionStrategy};
use chiptune::trainer::{evaluate_bank, train_bank, TrainConfig};

fn main() -> chiptune::error::Result<()> {
    let task = SyntheticTaskSpec::majority_token(3_000, 23);
    let init = BackboneWeights::init(BackboneConfig {
        n_layers: 6,
        d_model: 32,
        n_heads: 4,
        d_ff: 32,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        seed: 24,
    })?;
    let pretrain = PretrainConfig {
        steps: 800,
        batch_size: 16,
        seed: 25,
        ..PretrainConfig::default()
    };
    let backbone = pretrain_backbone(&init, &task, &pretrain)?.weights;
    let data = gen_synthetic(&task)?;
    let cache = FeatureCache::from_source(&LiveFeatures::new(&backbone, &data), task.n_classes)?;
    let split = split_indices(data.len(), &SplitFractions::default(), 26)?;
    let (train, eval) = (Subset::new(&cache, &split.train)?, Subset::new(&cache, &split.eval)?);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        eval_every: 600,
        master_seed: 27,
        ..TrainConfig::default()
    };
    let bank = ChipBank::init(ChipKind::Linear, 6, task.n_classes, 32, 0, 28)?;
    let (bank, _) = train_bank(bank, &train, &eval, &cfg)?;
    let acc = evaluate_bank(&bank, &eval)?;

    for strategy in [
        SelectionStrategy::Fixed { layer: 3 },
        SelectionStrategy::Validate { n_validation: 200 },
        SelectionStrategy::Optimal,
    ] {
        let chosen = select_chip(&bank, strategy, &train, &eval)?;
        println!(
            "{:<14} layer {}  eval accuracy {:.3}  prune ratio {:.3}",
            strategy.to_string(),
            chosen.layer,
            acc[chosen.layer],
            chosen.prune_ratio
        );
    }
    Ok(())
}
