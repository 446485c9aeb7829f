// SPDX-License-Identifier: Apache-2.0

//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line; the process exits
//! non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use chiptune::backbone::{BackboneConfig, BackboneWeights, TokenId};
use chiptune::cache::{extract_features, read_cache, LiveFeatures, Subset};
use chiptune::chips::{ChipBank, ChipKind};
use chiptune::cli::*;
use chiptune::data::{gen_synthetic, SyntheticTaskSpec};
use chiptune::error::{ErrorCategory, FormatError};
use chiptune::kernels::argmax;
use chiptune::report::EvalReport;
use chiptune::selection::{build_pruned_model, multichip_infer, prune_ratio, pruned_infer, MultiChipModel};
use chiptune::trainer::{train_bank, TrainConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn toy_backbone(n_layers: usize, seed: u64) -> BackboneWeights {
    BackboneWeights::init(BackboneConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 11,
        max_seq_len: 12,
        seed,
    })
    .unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let len = rng.random_range(1..=12);
    (0..len).map(|_| rng.random_range(0..11)).collect()
}

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 7,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.pretrain.steps = 40;
    cfg.task.n_examples = 6_250;
    cfg
}

fn frozen_backbone() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(small_config(dir.path()));
    exp.gen_data().unwrap();
    exp.pretrain().unwrap();
    let before = std::fs::read(exp.path(BACKBONE_FILE)).unwrap();
    let digest = BackboneWeights::from_bytes(&before).unwrap().digest();
    let t = Instant::now();
    exp.train_chips().unwrap();
    let elapsed = t.elapsed();
    let after = std::fs::read(exp.path(BACKBONE_FILE)).unwrap();
    let summary: TrainSummary =
        serde_json::from_slice(&std::fs::read(exp.path(TRAIN_SUMMARY_FILE)).unwrap()).unwrap();
    Outcome::new(
        summary.steps >= 5_000 && before == after && summary.backbone_digest == digest && elapsed < Duration::from_secs(60),
        format!("{} steps in {:.1}s, digest {}", summary.steps, elapsed.as_secs_f64(), &digest[..16]),
    )
}

fn gradients() -> Outcome {
    let (lin, _, lin_worst) = common::check_gradients(ChipKind::Linear);
    let (mlp, skipped, mlp_worst) = common::check_gradients(ChipKind::Mlp);
    Outcome::new(
        lin_worst <= 1e-4 && mlp_worst <= 1e-4 && skipped * 100 < mlp + skipped,
        format!(
            "linear {lin} components worst {lin_worst:.1e}; mlp {mlp} components worst {mlp_worst:.1e}, {skipped} at ReLU kinks skipped"
        ),
    )
}

fn pruned_equivalence() -> Outcome {
    let backbone = toy_backbone(8, 301);
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let mut ok = true;
    for kind in [ChipKind::Linear, ChipKind::Mlp] {
        let bank = ChipBank::init(kind, 8, 4, 16, 24, 303).unwrap();
        let models: Vec<_> = (0..8).map(|l| build_pruned_model(&backbone, &bank, l).unwrap()).collect();
        for _ in 0..256 {
            let tokens = random_tokens(&mut rng);
            let trace = backbone.forward_trace(&tokens).unwrap();
            for (l, m) in models.iter().enumerate() {
                let (class, probs) = pruned_infer(m, &tokens).unwrap();
                let expected = bank.chip(l).unwrap().forward(trace.layer(l)).unwrap();
                let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                ok &= bits(probs.as_slice()) == bits(expected.as_slice());
                ok &= class == argmax(expected.as_slice());
            }
        }
    }
    Outcome::new(ok, "256 inputs x 8 layers x 2 chip kinds")
}

fn ratio_arithmetic() -> Outcome {
    let a = prune_ratio(32, 20).unwrap();
    let b = prune_ratio(40, 25).unwrap();
    Outcome::new(a == 0.34375 && b == 0.35, format!("prune_ratio(32,20)={a}, prune_ratio(40,25)={b}"))
}

/// One desk-scale run per seed, shared by criteria 5, 6 and 7.
struct DeskRun {
    seed: u64,
    report: EvalReport,
    /// `curve[k] = (step, per-layer accuracy)`.
    curve: Vec<(u64, Vec<f64>)>,
    elapsed: Duration,
}

fn read_curve(path: &Path) -> Vec<(u64, Vec<f64>)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut curve: Vec<(u64, Vec<f64>)> = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (step, acc): (u64, f64) = (f[0].parse().unwrap(), f[2].parse().unwrap());
        match curve.last_mut() {
            Some((s, accs)) if *s == step => accs.push(acc),
            _ => curve.push((step, vec![acc])),
        }
    }
    curve
}

fn desk_runs() -> Vec<DeskRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = ExperimentConfig {
                seed,
                out_dir: dir.path().to_path_buf(),
                ..ExperimentConfig::default()
            };
            let t = Instant::now();
            let report = Experiment::new(cfg).run_all().unwrap();
            let elapsed = t.elapsed();
            let curve = read_curve(&dir.path().join(CURVES_FILE));
            DeskRun {
                seed,
                report,
                curve,
                elapsed,
            }
        })
        .collect()
}

fn layer_profile(runs: &[DeskRun]) -> Outcome {
    let mut held = 0;
    let mut detail = Vec::new();
    for r in runs {
        let acc: Vec<f64> = r.report.layers.iter().map(|l| l.accuracy).collect();
        let max = acc.iter().copied().fold(0.0, f64::max);
        let early = (0..7.min(acc.len())).find(|&l| acc[l] >= max - 0.02);
        let ok = acc[0] <= 0.40 && max >= 0.90 && early.is_some() && r.elapsed <= Duration::from_secs(600);
        held += usize::from(ok);
        detail.push(format!(
            "seed {}: l0 {:.3} max {:.3} l* {:?} {:.0}s",
            r.seed,
            acc[0],
            max,
            early,
            r.elapsed.as_secs_f64()
        ));
    }
    Outcome::new(held >= 4, format!("{held}/5 seeds [{}]", detail.join("; ")))
}

fn learning_curve(runs: &[DeskRun]) -> Outcome {
    let mut held = 0;
    let mut detail = Vec::new();
    for r in runs {
        let (_, last) = r.curve.last().unwrap();
        let best = chiptune::selection::best_layer(last);
        let at = |step: u64| r.curve.iter().find(|(s, _)| *s == step).map(|(_, a)| a[best]);
        let running_max = r.curve.iter().map(|(_, a)| a[best]).fold(0.0, f64::max);
        let (a2, a6) = (at(2_000), at(6_000));
        let ok = matches!((a2, a6), (Some(x), Some(y)) if y > x) && last[best] >= running_max - 0.03;
        held += usize::from(ok);
        detail.push(format!(
            "seed {}: layer {best} @2k {:.3} @6k {:.3} final {:.3} max {:.3}",
            r.seed,
            a2.unwrap_or(f64::NAN),
            a6.unwrap_or(f64::NAN),
            last[best],
            running_max
        ));
    }
    Outcome::new(held >= 4, format!("{held}/5 seeds [{}]", detail.join("; ")))
}

fn strategy_dominance(runs: &[DeskRun]) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for r in runs {
        let acc = |prefix: &str| {
            r.report
                .strategies
                .iter()
                .find(|s| s.strategy.starts_with(prefix))
                .map(|s| s.accuracy)
                .unwrap()
        };
        let (fixed, validate, optimal) = (acc("fixed"), acc("validate"), acc("optimal"));
        ok &= optimal >= validate && optimal >= fixed;
        detail.push(format!("seed {}: {optimal:.3}/{validate:.3}/{fixed:.3}", r.seed));
    }
    Outcome::new(ok, format!("optimal/validate/fixed [{}]", detail.join("; ")))
}

fn cache_fidelity() -> Outcome {
    let task = SyntheticTaskSpec::majority_token(300, 401);
    let data = gen_synthetic(&task).unwrap();
    let backbone = BackboneWeights::init(BackboneConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        seed: 402,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ctfc");
    extract_features(&backbone, &data, task.n_classes, &path).unwrap();
    let cache = read_cache(&path).unwrap();
    let live = LiveFeatures::new(&backbone, &data);
    let train: Vec<usize> = (0..250).collect();
    let eval: Vec<usize> = (250..300).collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        eval_every: 50,
        master_seed: 403,
        ..TrainConfig::default()
    };
    let mut banks_equal = true;
    for kind in [ChipKind::Linear, ChipKind::Mlp] {
        let bank = ChipBank::init(kind, 4, 4, 16, 8, 404).unwrap();
        let train_on = |src: &dyn chiptune::cache::FeatureSource| {
            train_bank(
                bank.clone(),
                &Subset::new(src, &train).unwrap(),
                &Subset::new(src, &eval).unwrap(),
                &cfg,
            )
            .unwrap()
        };
        let (a, ca) = train_on(&cache);
        let (b, cb) = train_on(&live);
        banks_equal &= a.to_bytes() == b.to_bytes() && ca == cb;
    }

    let bytes = std::fs::read(&path).unwrap();
    let copy = dir.path().join("copy.ctfc");
    cache.save(&copy).unwrap();
    let round_trip = std::fs::read(&copy).unwrap() == bytes;

    let reject = |mutate: &dyn Fn(&mut Vec<u8>), want: fn(&FormatError) -> bool| {
        let mut b = bytes.clone();
        mutate(&mut b);
        let p = dir.path().join("bad.ctfc");
        std::fs::write(&p, &b).unwrap();
        match read_cache(&p) {
            Err(e) => e.category() == ErrorCategory::Data && e.format_kind().is_some_and(want),
            Ok(_) => false,
        }
    };
    let rejected = reject(&|b| b.truncate(b.len() - 5), |k| matches!(k, FormatError::Truncated { .. }))
        && reject(&|b| b.truncate(10), |k| matches!(k, FormatError::Truncated { .. }))
        && reject(&|b| b[0] = b'X', |k| matches!(k, FormatError::BadMagic { .. }))
        && reject(&|b| b[4] = 7, |k| matches!(k, FormatError::UnsupportedVersion { .. }))
        && reject(&|b| b.push(0), |k| matches!(k, FormatError::LengthMismatch { .. }));
    Outcome::new(
        banks_equal && round_trip && rejected,
        format!("banks equal {banks_equal}, round trip {round_trip}, corruptions rejected {rejected}"),
    )
}

fn multichip() -> Outcome {
    let backbone = toy_backbone(8, 501);
    let bank = ChipBank::init(ChipKind::Linear, 8, 4, 16, 0, 502).unwrap();
    let layers = [3usize, 5, 7];
    let chips = layers
        .iter()
        .map(|&l| (format!("task{l}"), l, bank.chip(l).unwrap().clone()))
        .collect();
    let model = MultiChipModel::new(&backbone, chips).unwrap();
    let singles: Vec<_> = layers.iter().map(|&l| build_pruned_model(&backbone, &bank, l).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(503);
    let mut ok = model.kept_layers() == 8;
    for _ in 0..256 {
        let tokens = random_tokens(&mut rng);
        let out = multichip_infer(&model, &tokens).unwrap();
        for (&l, single) in layers.iter().zip(&singles) {
            ok &= out[&format!("task{l}")] == pruned_infer(single, &tokens).unwrap();
        }
    }
    Outcome::new(ok, format!("kept {} layers, 256 inputs", model.kept_layers()))
}

fn end_to_end_determinism() -> Outcome {
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.backbone.n_layers = 4;
        cfg.task.n_examples = 1_000;
        cfg.pretrain.steps = 100;
        cfg.train.eval_every = 200;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| Experiment::new(cfg).run_all().unwrap());
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap() != TIMINGS_FILE)
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let a = run(1);
    let b = run(4);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    Outcome::new(
        a == b && names.contains(&"report.json"),
        format!("1 vs 4 threads, {} files compared", a.len()),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, frozen_backbone());
    report(2, gradients());
    report(3, pruned_equivalence());
    report(4, ratio_arithmetic());
    let runs = desk_runs();
    report(5, layer_profile(&runs));
    report(6, learning_curve(&runs));
    report(7, strategy_dominance(&runs));
    report(8, cache_fidelity());
    report(9, multichip());
    report(10, end_to_end_determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
