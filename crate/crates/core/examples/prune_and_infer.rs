// SPDX-License-Identifier: Apache-2.0

//! Cuts a backbone after a chosen layer, saves the pruned model, loads it
//! back and checks that its predictions match the chip read off the full
//! model's trace.
//!
//! ```text
//! cargo run --release --example prune_and_infer -- [layer]
//! ```

use chiptune::backbone::{BackboneConfig, BackboneWeights};
use chiptune::chips::{ChipBank, ChipKind};
use chiptune::data::{gen_synthetic, SyntheticTaskSpec};
use chiptune::selection::{build_pruned_model, pruned_infer, PrunedModel};

fn main() -> chiptune::error::Result<()> {
    let layer: usize = std::env::args().nth(1).map_or(4, |s| s.parse().expect("layer must be an index"));
    let task = SyntheticTaskSpec::majority_token(20, 10);
    let backbone = BackboneWeights::init(BackboneConfig {
        n_layers: 8,
        d_model: 32,
        n_heads: 4,
        d_ff: 32,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        seed: 11,
    })?;
    let bank = ChipBank::init(ChipKind::Mlp, 8, task.n_classes, 32, 16, 12)?;
    let model = build_pruned_model(&backbone, &bank, layer)?;

    let path = std::env::temp_dir().join("chiptune-example.ctpm");
    model.save(&path)?;
    let loaded = PrunedModel::load(&path)?;
    println!(
        "kept {} of {} layers (prune ratio {}), {} parameters, {} bytes on disk",
        loaded.kept_layers(),
        backbone.n_layers(),
        loaded.prune_ratio(),
        loaded.param_count(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0)
    );

    for ex in gen_synthetic(&task)? {
        let (class, probs) = pruned_infer(&loaded, &ex.tokens)?;
        let full = backbone.forward_trace(&ex.tokens)?;
        let expected = bank.chip(layer)?.forward(full.layer(layer))?;
        assert_eq!(probs, expected, "pruned and full-model outputs differ");
        println!("label {} predicted {class}  p = {:?}", ex.label, probs.as_slice());
    }
    Ok(())
}
