// SPDX-License-Identifier: Apache-2.0

//! Layer-sweep and strategy-comparison reports.
//!
//! Every float is rounded to 6 significant digits when the report is built,
//! so the JSON form parses back to an equal report and the CSV form is
//! stable across runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::write_file;
use crate::chips::ChipKind;
use crate::error::{ensure, Error, Result};
use crate::selection::prune_ratio;

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Shortest decimal form of `x` rounded to 6 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{}", round_sig6(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub accuracy: f64,
    pub prune_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub layer: usize,
    pub accuracy: f64,
    pub prune_ratio: f64,
}

/// Per-layer eval accuracy, the chosen layer, and the pruned model's accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub chip_kind: ChipKind,
    pub n_layers: usize,
    pub layers: Vec<LayerRow>,
    pub strategy: String,
    pub selected_layer: usize,
    pub prune_ratio: f64,
    /// The selected chip's entry in `layers`.
    pub selected_accuracy: f64,
    /// Accuracy of the pruned model run end to end on the eval tokens.
    pub pruned_accuracy: f64,
    /// The same table row for every strategy that was compared.
    pub strategies: Vec<StrategyRow>,
}

impl EvalReport {
    /// Builds a report from per-layer eval accuracies; `strategies` pairs a
    /// strategy name with the layer it chose.
    pub fn new(
        task: impl Into<String>,
        chip_kind: ChipKind,
        accuracies: &[f64],
        strategy: impl Into<String>,
        selected_layer: usize,
        pruned_accuracy: f64,
        strategies: &[(String, usize)],
    ) -> Result<Self> {
        let n = accuracies.len();
        ensure!(n >= 1, "report needs at least one layer");
        ensure!(selected_layer < n, "selected layer {selected_layer} out of range");
        let layers = accuracies
            .iter()
            .enumerate()
            .map(|(l, &a)| {
                Ok(LayerRow {
                    layer: l,
                    accuracy: round_sig6(a),
                    prune_ratio: round_sig6(prune_ratio(n, l)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let strategies = strategies
            .iter()
            .map(|(name, l)| {
                ensure!(*l < n, "strategy {name} chose layer {l}, out of range");
                Ok(StrategyRow {
                    strategy: name.clone(),
                    layer: *l,
                    accuracy: layers[*l].accuracy,
                    prune_ratio: layers[*l].prune_ratio,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task: task.into(),
            chip_kind,
            n_layers: n,
            strategy: strategy.into(),
            selected_layer,
            prune_ratio: layers[selected_layer].prune_ratio,
            selected_accuracy: layers[selected_layer].accuracy,
            pruned_accuracy: round_sig6(pruned_accuracy),
            layers,
            strategies,
        })
    }

    /// `layer,accuracy,prune_ratio`, one row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,accuracy,prune_ratio\n");
        for r in &self.layers {
            writeln!(out, "{},{},{}", r.layer, fmt_float(r.accuracy), fmt_float(r.prune_ratio)).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid report JSON: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown format {other:?} (expected csv or json)"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json(),
    };
    write_file(path.as_ref(), text.as_bytes())
}
