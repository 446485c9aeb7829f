// SPDX-License-Identifier: Apache-2.0

//! The `chiptune` command line: experiment config, the pipeline stages, and
//! exit-code mapping.
//!
//! Every stage reads and writes fixed file names inside the output
//! directory, so stages can be run one at a time or all at once with `run`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{pretrain_backbone, BackboneConfig, BackboneWeights, PretrainConfig};
use crate::binfmt::{read_file, write_file};
use crate::cache::{extract_features, read_cache_expecting, FeatureCache, FeatureSource, LiveFeatures, Subset};
use crate::chips::{ChipBank, ChipKind, DEFAULT_MLP_HIDDEN};
use crate::data::{gen_synthetic, split_indices, LabeledExample, SplitFractions, SplitIndices, SyntheticTaskSpec, TaskKind};
use crate::error::{ensure, Error, Result};
use crate::report::{emit_report, fmt_float, EvalReport, ReportFormat};
use crate::selection::{build_pruned_model, select_chip, PrunedModel, SelectionReport, SelectionStrategy};
use crate::trainer::{evaluate_bank, train_bank, TrainConfig};

pub const DATASET_FILE: &str = "dataset.json";
pub const BACKBONE_FILE: &str = "backbone.ctbw";
pub const PRETRAIN_LOSS_FILE: &str = "pretrain_loss.csv";
pub const FEATURES_FILE: &str = "features.ctfc";
pub const CHIPS_FILE: &str = "chips.ctch";
pub const CURVES_FILE: &str = "curves.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const PRUNED_FILE: &str = "pruned.ctpm";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const REPORT_STEM: &str = "report";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_examples: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = SyntheticTaskSpec::majority_token(12_500, 0);
        Self {
            kind: t.kind,
            vocab_size: t.vocab_size,
            seq_len: t.seq_len,
            n_classes: t.n_classes,
            n_examples: t.n_examples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            lr: p.lr,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipSection {
    pub kind: ChipKind,
    pub hidden: usize,
}

impl Default for ChipSection {
    fn default() -> Self {
        Self {
            kind: ChipKind::Linear,
            hidden: DEFAULT_MLP_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_examples: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_examples: t.max_examples,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// `fixed:L`, `validate[:N]` or `optimal`.
    pub strategy: String,
    /// Layer used for the fixed strategy in comparisons; defaults to
    /// `floor(5 N / 8)`.
    pub fixed_layer: Option<usize>,
    pub n_validation: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            strategy: "validate".into(),
            fixed_layer: None,
            n_validation: crate::selection::DEFAULT_N_VALIDATION,
        }
    }
}

/// The whole experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage's seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub backbone: BackboneSection,
    pub task: TaskSection,
    pub split: SplitFractions,
    pub pretrain: PretrainSection,
    pub chips: ChipSection,
    pub train: TrainSection,
    pub selection: SelectionSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("chiptune-out"),
            backbone: BackboneSection::default(),
            task: TaskSection::default(),
            split: SplitFractions {
                train: 0.8,
                validation: 0.0,
                eval: 0.2,
            },
            pretrain: PretrainSection::default(),
            chips: ChipSection::default(),
            train: TrainSection::default(),
            selection: SelectionSection::default(),
        }
    }
}

/// Seed for one pipeline stage: the first 8 bytes of
/// `SHA-256(stage || master_seed as u64 LE)`.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(master.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section; any failure is reported as a config error.
    pub fn validate(&self) -> Result<()> {
        let as_config = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        as_config(self.backbone_config().validate())?;
        as_config(self.task_spec().validate())?;
        as_config(self.split.validate())?;
        as_config(self.train_config().validate())?;
        if self.chips.kind == ChipKind::Mlp && self.chips.hidden == 0 {
            return Err(Error::Config("chips.hidden must be at least 1".into()));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain needs batch_size >= 1 and lr > 0".into()));
        }
        self.strategy()?;
        if let Some(l) = self.selection.fixed_layer {
            if l >= self.backbone.n_layers {
                return Err(Error::Config(format!("selection.fixed_layer {l} out of range")));
            }
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            n_layers: self.backbone.n_layers,
            d_model: self.backbone.d_model,
            n_heads: self.backbone.n_heads,
            d_ff: self.backbone.d_ff,
            vocab_size: self.task.vocab_size,
            max_seq_len: self.task.seq_len,
            seed: derive_seed(self.seed, "backbone"),
        }
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind: self.task.kind,
            vocab_size: self.task.vocab_size,
            seq_len: self.task.seq_len,
            n_classes: self.task.n_classes,
            n_examples: self.task.n_examples,
            seed: derive_seed(self.seed, "data"),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            seed: derive_seed(self.seed, "pretrain"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            max_examples: self.train.max_examples,
            eval_every: self.train.eval_every,
            master_seed: derive_seed(self.seed, "chips"),
            ..TrainConfig::default()
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn validation_seed(&self) -> u64 {
        derive_seed(self.seed, "validation")
    }

    pub fn fixed_layer(&self) -> usize {
        self.selection
            .fixed_layer
            .unwrap_or(self.backbone.n_layers * 5 / 8)
    }

    pub fn strategy(&self) -> Result<SelectionStrategy> {
        let s = &self.selection.strategy;
        match s.as_str() {
            "fixed" => Ok(SelectionStrategy::Fixed {
                layer: self.fixed_layer(),
            }),
            "validate" => Ok(SelectionStrategy::Validate {
                n_validation: self.selection.n_validation,
            }),
            _ => s.parse(),
        }
    }

    /// All three strategies, as compared in the eval report.
    pub fn comparison_strategies(&self) -> [SelectionStrategy; 3] {
        [
            SelectionStrategy::Fixed {
                layer: self.fixed_layer(),
            },
            SelectionStrategy::Validate {
                n_validation: self.selection.n_validation,
            },
            SelectionStrategy::Optimal,
        ]
    }
}

/// The generated dataset together with its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub eval: Vec<usize>,
    pub examples: Vec<LabeledExample>,
}

impl DatasetFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| {
            Error::format(path, crate::error::FormatError::InvalidHeader(format!("dataset JSON: {e}")))
        })
    }

    fn select(&self, idx: &[usize]) -> Vec<LabeledExample> {
        idx.iter().map(|&i| self.examples[i].clone()).collect()
    }
}

/// Config plus command-line overrides for one invocation.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub cache: Option<PathBuf>,
    pub format: ReportFormat,
    /// Print a progress line after each stage.
    pub verbose: bool,
}

macro_rules! say {
    ($exp:expr, $($arg:tt)*) => {
        if $exp.verbose {
            println!($($arg)*);
        }
    };
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            out_dir: config.out_dir.clone(),
            config,
            cache: None,
            format: ReportFormat::Json,
            verbose: false,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).expect("value serializes");
        s.push('\n');
        write_file(&self.path(name), s.as_bytes())
    }

    fn load_dataset(&self) -> Result<DatasetFile> {
        let ds = DatasetFile::load(self.path(DATASET_FILE))?;
        let spec = self.config.task_spec();
        if ds.spec != spec {
            return Err(Error::Config(format!(
                "{} was generated from a different task config or seed",
                self.path(DATASET_FILE).display()
            )));
        }
        Ok(ds)
    }

    fn load_backbone(&self) -> Result<BackboneWeights> {
        let path = self.path(BACKBONE_FILE);
        let w = BackboneWeights::load(&path)?;
        let mut want = self.config.backbone_config();
        want.seed = w.config().seed;
        if *w.config() != want {
            return Err(Error::Config(format!(
                "{} does not match the configured backbone shape",
                path.display()
            )));
        }
        Ok(w)
    }

    fn load_bank(&self, backbone: &BackboneWeights) -> Result<ChipBank> {
        let path = self.path(CHIPS_FILE);
        let bank = ChipBank::load(&path)?;
        ensure!(
            bank.len() == backbone.n_layers() && bank.d_model() == backbone.d_model(),
            "{} does not fit the backbone ({} chips of width {})",
            path.display(),
            bank.len(),
            bank.d_model()
        );
        Ok(bank)
    }

    /// Writes the dataset and its train / validation / eval split.
    pub fn gen_data(&self) -> Result<()> {
        self.ensure_out_dir()?;
        let spec = self.config.task_spec();
        let examples = gen_synthetic(&spec)?;
        let SplitIndices { train, validation, eval } =
            split_indices(examples.len(), &self.config.split, self.config.split_seed())?;
        let ds = DatasetFile {
            spec,
            train,
            validation,
            eval,
            examples,
        };
        self.write_json(DATASET_FILE, &ds)?;
        say!(self, 
            "dataset: {} examples ({} train / {} validation / {} eval)",
            ds.examples.len(),
            ds.train.len(),
            ds.validation.len(),
            ds.eval.len()
        );
        Ok(())
    }

    /// Initializes and pretrains the backbone.
    pub fn pretrain(&self) -> Result<()> {
        self.ensure_out_dir()?;
        let init = BackboneWeights::init(self.config.backbone_config())?;
        let out = pretrain_backbone(&init, &self.config.task_spec(), &self.config.pretrain_config())?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in out.losses.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", i + 1, fmt_float(*l)));
        }
        write_file(&self.path(PRETRAIN_LOSS_FILE), csv.as_bytes())?;
        out.weights.save(self.path(BACKBONE_FILE))?;
        say!(self, "backbone: {} params, digest {}", out.weights.param_count(), out.weights.digest());
        Ok(())
    }

    /// Writes the feature cache for every example in the dataset.
    pub fn extract(&self) -> Result<()> {
        let ds = self.load_dataset()?;
        let backbone = self.load_backbone()?;
        let path = self.cache.clone().unwrap_or_else(|| self.path(FEATURES_FILE));
        let cache = extract_features(&backbone, &ds.examples, ds.spec.n_classes, &path)?;
        say!(self, "features: {} records, {} bytes -> {}", cache.len(), cache.file_len(), path.display());
        Ok(())
    }

    /// Features for the whole dataset: the cache when one was given,
    /// otherwise live backbone traces.
    fn with_features<T>(
        &self,
        ds: &DatasetFile,
        backbone: &BackboneWeights,
        f: impl FnOnce(&dyn FeatureSource) -> Result<T>,
    ) -> Result<T> {
        match &self.cache {
            Some(path) => {
                let cache = read_cache_expecting(path, backbone.n_layers(), backbone.d_model())?;
                ensure!(
                    cache.len() == ds.examples.len(),
                    "cache {} holds {} records, dataset has {}",
                    path.display(),
                    cache.len(),
                    ds.examples.len()
                );
                ensure!(
                    (0..cache.len()).all(|i| cache.label(i) == ds.examples[i].label),
                    "cache {} labels disagree with the dataset",
                    path.display()
                );
                f(&cache)
            }
            None => f(&LiveFeatures::new(backbone, &ds.examples)),
        }
    }

    /// Trains a chip bank and checks the backbone was left untouched.
    pub fn train_chips(&self) -> Result<()> {
        let ds = self.load_dataset()?;
        let backbone = self.load_backbone()?;
        let digest_before = backbone.digest();
        let cfg = self.config.train_config();
        let bank = ChipBank::init(
            self.config.chips.kind,
            backbone.n_layers(),
            ds.spec.n_classes,
            backbone.d_model(),
            self.config.chips.hidden,
            cfg.master_seed,
        )?;
        let (bank, curve) = self.with_features(&ds, &backbone, |src| {
            let train = Subset::new(src, &ds.train)?;
            let eval = Subset::new(src, &ds.eval)?;
            train_bank(bank, &train, &eval, &cfg)
        })?;
        let digest_after = backbone.digest();
        ensure!(
            digest_after == digest_before,
            "backbone digest changed during chip training"
        );
        bank.save(self.path(CHIPS_FILE))?;
        write_file(&self.path(CURVES_FILE), curve.to_csv().as_bytes())?;
        let summary = TrainSummary {
            backbone_digest: digest_after,
            steps: curve.steps.last().copied().unwrap_or(0),
            final_accuracy: curve.accuracy.last().cloned().unwrap_or_default(),
        };
        self.write_json(TRAIN_SUMMARY_FILE, &summary)?;
        say!(self, "chips: {} steps, backbone digest unchanged", summary.steps);
        Ok(())
    }

    fn validation_order(&self, ds: &DatasetFile) -> Vec<usize> {
        let mut pool = ds.train.clone();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.validation_seed()));
        pool
    }

    fn run_selection(
        &self,
        ds: &DatasetFile,
        backbone: &BackboneWeights,
        bank: &ChipBank,
        strategies: &[SelectionStrategy],
    ) -> Result<(Vec<SelectionReport>, Vec<f64>)> {
        let pool = self.validation_order(ds);
        self.with_features(ds, backbone, |src| {
            let validation = Subset::new(src, &pool)?;
            let eval = Subset::new(src, &ds.eval)?;
            let reports = strategies
                .iter()
                .map(|&s| select_chip(bank, s, &validation, &eval))
                .collect::<Result<Vec<_>>>()?;
            Ok((reports, evaluate_bank(bank, &eval)?))
        })
    }

    /// Applies the configured strategy and records the chosen layer.
    pub fn select(&self) -> Result<SelectionReport> {
        let ds = self.load_dataset()?;
        let backbone = self.load_backbone()?;
        let bank = self.load_bank(&backbone)?;
        let strategy = self.config.strategy()?;
        let (mut reports, _) = self.run_selection(&ds, &backbone, &bank, &[strategy])?;
        let report = reports.pop().expect("one strategy");
        self.write_json(SELECTION_FILE, &report)?;
        say!(self, 
            "selected layer {} ({}), prune ratio {}",
            report.layer,
            report.strategy,
            fmt_float(report.prune_ratio)
        );
        Ok(report)
    }

    /// Builds and saves the pruned model for the selected layer.
    pub fn prune(&self) -> Result<PrunedModel> {
        let backbone = self.load_backbone()?;
        let bank = self.load_bank(&backbone)?;
        let layer = match self.config.selection.fixed_layer.filter(|_| self.config.selection.strategy == "fixed") {
            Some(l) => l,
            None => {
                let bytes = read_file(&self.path(SELECTION_FILE))?;
                let sel: SelectionReport = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Config(format!("invalid {SELECTION_FILE}: {e}")))?;
                sel.layer
            }
        };
        let model = build_pruned_model(&backbone, &bank, layer)?;
        model.save(self.path(PRUNED_FILE))?;
        say!(self, 
            "pruned model: {} of {} layers kept, {} -> {} bytes",
            model.kept_layers(),
            backbone.n_layers(),
            backbone.to_bytes().len(),
            model.to_bytes().len()
        );
        Ok(model)
    }

    /// Compares all strategies on the eval split and writes the report.
    pub fn eval(&self) -> Result<EvalReport> {
        let ds = self.load_dataset()?;
        let backbone = self.load_backbone()?;
        let bank = self.load_bank(&backbone)?;
        let chosen = self.config.strategy()?;
        let mut strategies = self.config.comparison_strategies().to_vec();
        if !strategies.contains(&chosen) {
            strategies.push(chosen);
        }
        let (reports, accuracies) = self.run_selection(&ds, &backbone, &bank, &strategies)?;
        let selected = reports
            .iter()
            .find(|r| r.strategy == chosen)
            .expect("chosen strategy was evaluated")
            .layer;
        let pruned = build_pruned_model(&backbone, &bank, selected)?;
        let pruned_accuracy = pruned.accuracy(&ds.select(&ds.eval))?;
        let rows: Vec<(String, usize)> = reports.iter().map(|r| (r.strategy.to_string(), r.layer)).collect();
        let report = EvalReport::new(
            ds.spec.kind.to_string(),
            bank.kind(),
            &accuracies,
            chosen.to_string(),
            selected,
            pruned_accuracy,
            &rows,
        )?;
        let path = self.path(&format!("{REPORT_STEM}.{}", self.format.extension()));
        emit_report(&report, self.format, &path)?;
        for r in &report.strategies {
            say!(self, 
                "{:<12} layer {:>2}  accuracy {}  prune ratio {}",
                r.strategy,
                r.layer,
                fmt_float(r.accuracy),
                fmt_float(r.prune_ratio)
            );
        }
        Ok(report)
    }

    /// Per-layer accuracy and prune ratio of every chip, as CSV.
    pub fn sweep(&self) -> Result<()> {
        let ds = self.load_dataset()?;
        let backbone = self.load_backbone()?;
        let bank = self.load_bank(&backbone)?;
        let accuracies = self.with_features(&ds, &backbone, |src| {
            evaluate_bank(&bank, &Subset::new(src, &ds.eval)?)
        })?;
        let best = crate::selection::best_layer(&accuracies);
        let report = EvalReport::new(
            ds.spec.kind.to_string(),
            bank.kind(),
            &accuracies,
            "optimal",
            best,
            accuracies[best],
            &[],
        )?;
        write_file(&self.path(SWEEP_FILE), report.to_csv().as_bytes())?;
        if self.verbose {
            print!("{}", report.to_csv());
        }
        Ok(())
    }

    /// Every stage in order. Uses the feature cache for chip training and
    /// evaluation. Wall-clock timings go to their own file so the other
    /// outputs stay byte-identical between runs.
    pub fn run_all(&self) -> Result<EvalReport> {
        let mut timings = BTreeMap::new();
        let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
            let t = Instant::now();
            f()?;
            timings.insert(name.to_string(), t.elapsed().as_secs_f64());
            Ok(())
        };
        let staged = Experiment {
            cache: Some(self.cache.clone().unwrap_or_else(|| self.path(FEATURES_FILE))),
            ..self.clone()
        };
        let mut report = None;
        timed("gen_data", &mut || staged.gen_data())?;
        timed("pretrain", &mut || staged.pretrain())?;
        timed("extract", &mut || staged.extract())?;
        timed("train_chips", &mut || staged.train_chips())?;
        timed("select", &mut || staged.select().map(|_| ()))?;
        timed("prune", &mut || staged.prune().map(|_| ()))?;
        timed("eval", &mut || {
            report = Some(staged.eval()?);
            Ok(())
        })?;
        timed("sweep", &mut || staged.sweep())?;
        self.write_json(TIMINGS_FILE, &timings)?;
        Ok(report.expect("eval ran"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub backbone_digest: String,
    pub steps: u64,
    pub final_accuracy: Vec<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "chiptune", version, about = "Probe every layer of a frozen transformer, then prune after the chosen one")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Layer for the fixed strategy.
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    /// fixed | validate | optimal (also fixed:L, validate:N).
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// linear | mlp
    #[arg(long, global = true)]
    pub chip: Option<String>,
    /// Feature cache to write (extract) or read (train-chips, select, eval, sweep).
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// csv | json, for the eval report.
    #[arg(long, global = true)]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its split.
    GenData,
    /// Initialize and pretrain the backbone.
    Pretrain,
    /// Write per-layer hidden states of every example to a feature cache.
    Extract,
    /// Train one chip per layer against the frozen backbone.
    TrainChips,
    /// Choose a chip with the configured strategy.
    Select,
    /// Keep layers up to the selected chip and save the pruned model.
    Prune,
    /// Compare strategies and report pruned-model accuracy.
    Eval,
    /// Per-layer accuracy and prune ratio table.
    Sweep,
    /// All stages in order.
    Run,
    /// Print the effective config as TOML.
    ShowConfig,
}

impl Cli {
    /// Resolves the config file and flag overrides into an experiment.
    pub fn experiment(&self) -> Result<Experiment> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(c) = &self.chip {
            cfg.chips.kind = c.parse()?;
        }
        if let Some(s) = &self.strategy {
            cfg.selection.strategy = s.clone();
        }
        if let Some(l) = self.layer {
            cfg.selection.fixed_layer = Some(l);
            if self.strategy.is_none() {
                cfg.selection.strategy = "fixed".into();
            }
        }
        if let SelectionStrategy::Fixed { layer } = cfg.strategy()? {
            cfg.selection.fixed_layer = Some(layer);
            cfg.selection.strategy = "fixed".into();
        }
        cfg.validate()?;
        let mut x = Experiment::new(cfg);
        x.cache = self.cache.clone();
        x.verbose = true;
        if let Some(f) = &self.format {
            x.format = f.parse()?;
        }
        Ok(x)
    }
}

/// Runs one command; errors carry the category that decides the exit code.
pub fn execute(cli: &Cli) -> Result<()> {
    let x = cli.experiment()?;
    match cli.command {
        Command::GenData => x.gen_data(),
        Command::Pretrain => x.pretrain(),
        Command::Extract => x.extract(),
        Command::TrainChips => x.train_chips(),
        Command::Select => x.select().map(|_| ()),
        Command::Prune => x.prune().map(|_| ()),
        Command::Eval => x.eval().map(|_| ()),
        Command::Sweep => x.sweep(),
        Command::Run => x.run_all().map(|_| ()),
        Command::ShowConfig => {
            print!("{}", x.config.to_toml());
            Ok(())
        }
    }
}

/// Entry point for the binary: parses arguments, runs, and returns the
/// process exit code. Errors are printed as `error[category]: message`.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {e}", cat.as_str());
            cat.exit_code()
        }
    }
}

/// Training-loop inputs assembled from a finished `gen-data` / `extract`
/// pair, for callers that want to drive the library directly.
pub fn load_cached_split(x: &Experiment) -> Result<(DatasetFile, FeatureCache)> {
    let ds = x.load_dataset()?;
    let path = x.cache.clone().unwrap_or_else(|| x.path(FEATURES_FILE));
    let cache = crate::cache::read_cache(&path)?;
    Ok((ds, cache))
}
