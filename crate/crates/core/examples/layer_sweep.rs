// SPDX-License-Identifier: Apache-2.0

//! Desk-scale layer sweep: pretrain an 8-layer backbone on the majority
//! task, train one linear chip per layer for 10,000 steps, and print the
//! accuracy and prune ratio of every layer.
//!
//! ```text
//! cargo run --release --example layer_sweep -- [seed]
//! ```

use chiptune::cli::{Experiment, ExperimentConfig};
use chiptune::report::fmt_float;

fn main() -> chiptune::error::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be a u64"));
    let out = std::env::temp_dir().join(format!("chiptune-layer-sweep-{seed}"));
    let config = ExperimentConfig {
        seed,
        out_dir: out.clone(),
        ..ExperimentConfig::default()
    };
    let report = Experiment::new(config).run_all()?;
    println!("layer  accuracy  prune_ratio");
    for row in &report.layers {
        println!("{:>5}  {:>8}  {:>11}", row.layer, fmt_float(row.accuracy), fmt_float(row.prune_ratio));
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
