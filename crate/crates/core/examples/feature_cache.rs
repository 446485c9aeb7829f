// SPDX-License-Identifier: Apache-2.0

//! Extracts per-layer features to a CTFC cache, reads it back, and trains
//! the same chip bank from the cache and from live traces. The two banks
//! are byte-identical.
//!
//! ```text
//! cargo run --release --example feature_cache
//! ```

use chiptune::backbone::{BackboneConfig, BackboneWeights};
use chiptune::cache::{extract_features, read_cache, LiveFeatures, Subset};
use chiptune::chips::{ChipBank, ChipKind};
use chiptune::data::{gen_synthetic, split_indices, SplitFractions, SyntheticTaskSpec};
use chiptune::trainer::{train_bank, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = SyntheticTaskSpec::majority_token(1_000, 16);
    let backbone = BackboneWeights::init(BackboneConfig {
        n_layers: 6,
        d_model: 32,
        n_heads: 4,
        d_ff: 32,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        seed: 17,
    })?;
    let data = gen_synthetic(&task)?;
    let path = std::env::temp_dir().join("chiptune-example.ctfc");
    let written = extract_features(&backbone, &data, task.n_classes, &path)?;
    println!("wrote {} records, {} bytes", data.len(), written.file_len());

    let cache = read_cache(&path)?;
    let live = LiveFeatures::new(&backbone, &data);
    let split = split_indices(data.len(), &SplitFractions::default(), 18)?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        eval_every: 200,
        master_seed: 19,
        ..TrainConfig::default()
    };
    let bank = ChipBank::init(ChipKind::Linear, 6, task.n_classes, 32, 0, 20)?;
    let (from_cache, _) = train_bank(bank.clone(), &Subset::new(&cache, &split.train)?, &Subset::new(&cache, &split.eval)?, &cfg)?;
    let (from_live, _) = train_bank(bank, &Subset::new(&live, &split.train)?, &Subset::new(&live, &split.eval)?, &cfg)?;
    assert_eq!(from_cache.to_bytes(), from_live.to_bytes());
    println!("cache-trained and live-trained banks are byte-identical");

    let mut bytes = std::fs::read(&path)?;
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes)?;
    match read_cache(&path) {
        Err(e) => println!("truncated cache rejected ({}): {e}", e.category().as_str()),
        Ok(_) => unreachable!("truncated cache must not load"),
    }
    Ok(())
}
