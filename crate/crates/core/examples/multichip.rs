// SPDX-License-Identifier: Apache-2.0

//! Serves three tasks from one backbone with chips at layers 3, 5 and 7.
//! The shared model keeps layers up to the deepest chip, and every task's
//! output equals its own standalone pruned model.
//!
//! ```text
//! cargo run --release --example multichip
//! ```

use chiptune::backbone::{BackboneConfig, BackboneWeights};
use chiptune::chips::{ChipBank, ChipKind};
use chiptune::data::{gen_synthetic, SyntheticTaskSpec};
use chiptune::selection::{build_pruned_model, multichip_infer, MultiChipModel};

fn main() -> chiptune::error::Result<()> {
    let task = SyntheticTaskSpec::majority_token(5, 13);
    let backbone = BackboneWeights::init(BackboneConfig {
        n_layers: 8,
        d_model: 32,
        n_heads: 4,
        d_ff: 32,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        seed: 14,
    })?;
    let bank = ChipBank::init(ChipKind::Linear, 8, task.n_classes, 32, 0, 15)?;
    let tasks = [("sentiment", 3usize), ("topic", 5), ("answer", 7)];
    let chips = tasks
        .iter()
        .map(|&(name, l)| Ok((name.to_string(), l, bank.chip(l)?.clone())))
        .collect::<chiptune::error::Result<Vec<_>>>()?;
    let model = MultiChipModel::new(&backbone, chips)?;
    println!("multichip model keeps {} layers", model.kept_layers());

    for ex in gen_synthetic(&task)? {
        let outputs = multichip_infer(&model, &ex.tokens)?;
        for &(name, l) in &tasks {
            let single = build_pruned_model(&backbone, &bank, l)?.infer(&ex.tokens)?;
            assert_eq!(outputs[name], single);
            print!("{name}@{l} -> {}  ", outputs[name].0);
        }
        println!();
    }
    Ok(())
}
