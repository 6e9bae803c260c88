//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! `cargo test --test acceptance` runs everything; extra arguments select
//! criteria by id, e.g. `cargo test --test acceptance -- ac4 ac6`.

use std::collections::HashSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cresunet::checkpoint;
use cresunet::checks;
use cresunet::config::TrainConfig;
use cresunet::dataio::{self, SampleClass, SampleRecord, SyntheticConfig};
use cresunet::metrics::{self, Evaluator, MetricKind};
use cresunet::model::{Model, ModelSpec};
use cresunet::preprocess::{self, AugmentSet, GrayImage, NlmParams};
use cresunet::train::{self, AuditLog, Trainer};
use cresunet::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

type Outcome = Result<Verdict, Box<dyn std::error::Error>>;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("AC1", "gradient correctness", ac1_gradients),
        ("AC2", "shape contract", ac2_shapes),
        ("AC3", "parameter budget", ac3_parameters),
        ("AC4", "metric oracle equivalence", ac4_metrics),
        ("AC5", "overfit capacity", ac5_overfit),
        ("AC6", "NLM efficacy", ac6_nlm),
        ("AC7", "cross-validation harness", ac7_cross_validation),
        ("AC8", "determinism and round-trip", ac8_determinism),
        ("AC9", "real-data smoke test", ac9_real_data),
    ];
    let selected: HashSet<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_uppercase()).collect();
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for (id, title, run) in criteria {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(Ok(Pass(d))) => ("PASS", d),
            Ok(Ok(Fail(d))) => ("FAIL", d),
            Ok(Ok(Skip(d))) => ("SKIP", d),
            Ok(Err(e)) => ("FAIL", format!("error: {e}")),
            Err(p) => {
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                ("FAIL", format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        match status {
            "PASS" => passed += 1,
            "FAIL" => failed += 1,
            _ => skipped += 1,
        }
        println!("{id} {status} {title}: {detail} [{secs:.1} s]");
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ac1_gradients() -> Outcome {
    let start = Instant::now();
    let outcomes = checks::run_suite(None, 50, 2024, None)?;
    let elapsed = start.elapsed();
    let failures: Vec<String> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.line()).collect();
    let worst = |names: &dyn Fn(&str) -> bool| {
        outcomes.iter().filter(|o| names(&o.name)).map(|o| o.max_rel_err).fold(0.0f64, f64::max)
    };
    let network = |n: &str| n.starts_with("network");
    let blocks = |n: &str| n.starts_with("block");
    let ops = |n: &str| !network(n) && !blocks(n);
    let detail = format!(
        "{} checks, worst rel err ops {:.1e} blocks {:.1e} (tol 1e-3), network {:.1e} (tol 5e-2, 1×1×32×32 probe){}",
        outcomes.len(),
        worst(&ops),
        worst(&blocks),
        worst(&network),
        if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(" | ")) }
    );
    Ok(verdict(failures.is_empty() && elapsed < Duration::from_secs(120), detail))
}

fn ac2_shapes() -> Outcome {
    let n = 2;
    let mut problems = Vec::new();
    for s in [32usize, 64, 128, 256] {
        let model = Model::<f32>::build(ModelSpec::default().with_input_size(s, s))?;
        let x = Tensor::from_vec([n, 1, s, s], (0..n * s * s).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect())?;
        let out = model.infer(&x)?;
        if out.output.dims() != [n, 1, s, s] {
            problems.push(format!("S={s}: output {:?}", out.output.dims()));
        }
        if !out.output.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            problems.push(format!("S={s}: output outside [0,1]"));
        }
        let mut expected: Vec<(String, usize)> = Vec::new();
        for i in 1..=5 {
            expected.push((format!("E{i}"), s >> (i - 1)));
            expected.push((format!("ME{i}"), s >> i));
            expected.push((format!("D{i}"), s >> (i - 1)));
        }
        expected.push(("E6".into(), s >> 5));
        for (label, side) in expected {
            match out.trace.iter().find(|t| t.label == label) {
                Some(t) if t.shape.dims()[0] == n && t.shape.dims()[2] == side && t.shape.dims()[3] == side => {}
                Some(t) => problems.push(format!("S={s}: {label} is {:?}, want side {side}", t.shape.dims())),
                None => problems.push(format!("S={s}: {label} missing from the trace")),
            }
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        "N×1×S×S probabilities for S in {32,64,128,256}; E_i, ME_i, D_i and bottleneck follow S/2^i".to_string()
    } else {
        problems.join("; ")
    };
    Ok(verdict(ok, detail))
}

fn ac3_parameters() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_cresunet")).arg("inspect").output()?;
    let text = String::from_utf8_lossy(&out.stdout);
    let reported: Option<usize> = text
        .lines()
        .find_map(|l| l.strip_prefix("total trainable parameters: "))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|n| n.parse().ok());
    let Some(total) = reported else {
        return Ok(Fail(format!("`cresunet inspect` printed no total (exit {:?})", out.status.code())));
    };
    let built = Model::<f32>::build(ModelSpec::default())?.param_count();
    let in_band = (7_100_000..=10_700_000).contains(&total);
    let flagged = text.contains("[7.1M, 10.7M]: within");
    let deviation = (total as f64 / 8.88e6 - 1.0) * 100.0;
    Ok(verdict(
        in_band && flagged && built == total,
        format!("inspect reports {total} ({deviation:+.1}% vs 8.88M), band [7.1M, 10.7M], built model {built}"),
    ))
}

/// Per-pixel reference for the confusion-based metrics.
fn metric_oracle(pred: &[f64], target: &[f64]) -> [f64; 5] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(target) {
        match (p == 1.0, t == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let div = |a: u64, b: u64, empty: f64| if b == 0 { empty } else { a as f64 / b as f64 };
    let dsc = div(2 * tp, 2 * tp + fp + fn_, 1.0);
    let iou = div(tp, tp + fp + fn_, 1.0);
    let acc = div(tp + tn, tp + fp + fn_ + tn, 1.0);
    let precision = div(tp, tp + fp, if fn_ == 0 { 1.0 } else { 0.0 });
    let recall = div(tp, tp + fn_, if fp == 0 { 1.0 } else { 0.0 });
    [dsc, iou, acc, precision, recall]
}

fn auc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn ac4_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut identity_worst = 0.0f64;
    for _ in 0..1000 {
        let (dp, dt) = (rng.random::<f64>().powi(2), rng.random::<f64>().powi(2));
        let pred: Vec<f64> = (0..256).map(|_| rng.random_bool(dp) as u8 as f64).collect();
        let target: Vec<f64> = (0..256).map(|_| rng.random_bool(dt) as u8 as f64).collect();
        let c = metrics::confusion(&pred, &target)?;
        let got = [c.dsc(), c.iou(), c.acc(), c.precision(), c.recall()];
        if got != metric_oracle(&pred, &target) {
            mismatches += 1;
        }
        identity_worst = identity_worst.max((c.dsc() - 2.0 * c.iou() / (1.0 + c.iou())).abs());
    }
    let mut auc_worst = 0.0f64;
    let mut auc_defined = 0;
    let mut auc_mismatch = 0;
    for case in 0..200 {
        let p = rng.random_range(0.05..0.95);
        let labels: Vec<bool> = (0..50).map(|_| rng.random_bool(p)).collect();
        // Every other case draws from a coarse grid to force ties.
        let scores: Vec<f64> =
            (0..50).map(|_| if case % 2 == 0 { rng.random::<f64>() } else { rng.random_range(0..5) as f64 / 4.0 }).collect();
        let target: Vec<f64> = labels.iter().map(|&b| b as u8 as f64).collect();
        match (metrics::auc(&scores, &target)?, auc_oracle(&scores, &labels)) {
            (Some(a), Some(b)) => {
                auc_defined += 1;
                auc_worst = auc_worst.max((a - b).abs());
            }
            (None, None) => {}
            _ => auc_mismatch += 1,
        }
    }
    let ok = mismatches == 0 && auc_mismatch == 0 && auc_worst <= 1e-9 && identity_worst <= 1e-12;
    Ok(verdict(
        ok,
        format!(
            "1000 16×16 pairs: {mismatches} exact mismatches; AUC on 200 50-pixel cases ({auc_defined} defined): max |Δ| {auc_worst:.1e}; \
             DSC = 2·IoU/(1+IoU) max |Δ| {identity_worst:.1e}"
        ),
    ))
}

fn ac5_overfit() -> Outcome {
    let synth = SyntheticConfig {
        benign: 8,
        malignant: 0,
        normal: 0,
        height: 64,
        width: 64,
        speckle: 0.2,
        bright_lesions: true,
        seed: 3,
    };
    let samples: Vec<_> = dataio::synthetic_samples(&synth)?.into_iter().map(|(_, s, _)| s).collect();
    let config = TrainConfig { augment: AugmentSet::None, ..TrainConfig::default() };
    let mut trainer = Trainer::<f32>::new(&config)?;
    let start = Instant::now();
    let limit = Duration::from_secs(15 * 60);
    let mut dsc = 0.0;
    let mut epoch = 0;
    while epoch < 300 && start.elapsed() < limit {
        trainer.run_epoch(&samples)?;
        epoch += 1;
        if epoch % 5 == 0 {
            dsc = train::loss_and_dsc(trainer.model(), &samples, config.batch_size, config.smooth, config.threshold)?.1;
            if dsc >= 0.95 {
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        dsc >= 0.95 && elapsed < limit,
        format!(
            "default network, 8 bright-ellipse 64×64 images, Adam lr {}: eval-mode train DSC {dsc:.4} after {epoch} epochs in {:.0} s (limit 300 epochs, 900 s)",
            config.optimizer.lr,
            elapsed.as_secs_f64()
        ),
    ))
}

fn mse(a: &GrayImage, b: &GrayImage) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.data().len() as f64
}

fn ac6_nlm() -> Outcome {
    let clean = preprocess::phantom(128, 128);
    let params = NlmParams::default();
    let mut worst_reduction = f64::INFINITY;
    let mut slowest = Duration::ZERO;
    for seed in [1, 2, 3] {
        let noisy = preprocess::add_speckle(&clean, 0.2, seed)?;
        let start = Instant::now();
        let den = preprocess::nlm_denoise(&noisy, &params)?;
        slowest = slowest.max(start.elapsed());
        worst_reduction = worst_reduction.min(1.0 - mse(&den, &clean) / mse(&noisy, &clean));
    }
    Ok(verdict(
        worst_reduction >= 0.30 && slowest < Duration::from_secs(30),
        format!(
            "128×128 phantom, speckle σ=0.2, 3 noise seeds: MSE reduced by at least {:.1}% (h {}, patch {}, window {}); slowest {:.2} s",
            worst_reduction * 100.0,
            params.h,
            params.patch,
            params.window,
            slowest.as_secs_f64()
        ),
    ))
}

fn mock_records() -> Vec<SampleRecord> {
    [(SampleClass::Benign, 437), (SampleClass::Malignant, 210), (SampleClass::Normal, 133)]
        .into_iter()
        .flat_map(|(class, n)| {
            (1..=n).map(move |i| SampleRecord {
                id: format!("{0}/{0} ({i})", class.name()),
                class,
                image: PathBuf::from(format!("{} ({i}).png", class.name())),
                masks: vec![PathBuf::from(format!("{} ({i})_mask.png", class.name()))],
            })
        })
        .collect()
}

fn tiny_config(out: Option<&Path>) -> TrainConfig {
    let model = ModelSpec { encoder_filters: [4, 4, 4, 8, 8], bottleneck_filters: 8, decoder_divisor: 1, ..ModelSpec::default() }
        .with_input_size(32, 32);
    TrainConfig { model, epochs: 2, batch_size: 4, folds: 2, out_dir: out.map(Path::to_path_buf), ..TrainConfig::default() }
}

fn ac7_cross_validation() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let plan = dataio::kfold_split(&mock_records(), 5, 42, true)?;
    let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
    let benign: Vec<usize> = plan.class_table().iter().map(|t| t[&SampleClass::Benign]).collect();
    ok &= sizes.iter().all(|&s| s == 156) && benign.iter().all(|b| (87..=88).contains(b));
    notes.push(format!("780-record split: fold sizes {sizes:?}, benign {benign:?}"));

    let data = tempfile::tempdir()?;
    let small = SyntheticConfig { height: 32, width: 32, bright_lesions: true, ..SyntheticConfig::default() };
    let records = dataio::write_synthetic_dataset(data.path(), &small)?;
    let config = tiny_config(None);
    let plan = train::resolve_plan(&config, &records)?;
    let mut overlap = 0;
    for fold in 0..plan.k {
        let outcome = train::train_fold::<f32>(&config, &records, &plan, fold)?;
        let seen = outcome.audit.base_ids();
        overlap += plan.test_ids(fold)?.iter().filter(|id| seen.contains(id.as_str())).count();
        outcome.audit.check_disjoint(plan.test_ids(fold)?)?;
    }
    let mut leaky = AuditLog::default();
    leaky.record(1, 0, &[format!("{}#rot180", plan.test_ids(0)?[0])]);
    let caught = matches!(leaky.check_disjoint(plan.test_ids(0)?), Err(Error::Leakage { .. }));
    ok &= overlap == 0 && caught;
    notes.push(format!("audit logs: {overlap} test ids trained on, planted leak {}", if caught { "rejected" } else { "MISSED" }));

    let data = tempfile::tempdir()?;
    let out = tempfile::tempdir()?;
    let records = dataio::write_synthetic_dataset(data.path(), &SyntheticConfig::default())?;
    let config = TrainConfig { epochs: 5, folds: 2, out_dir: Some(out.path().to_path_buf()), ..TrainConfig::default() };
    let cv = train::cross_validate::<f32>(&config, &records)?;
    let complete = MetricKind::ALL.iter().all(|k| matches!(cv.report.summary.get(k), Some(Some(_))));
    let summary_lines = fs::read_to_string(out.path().join("summary.csv"))?.lines().count();
    let table = fs::read_to_string(out.path().join("report.txt"))?;
    let classes: Vec<&str> = cv.report.per_class.keys().map(|c| c.name()).collect();
    ok &= cv.report.folds.len() == 2 && complete && summary_lines == 5 && classes == ["benign", "malignant"] && table.contains("mean±std");
    let dsc = cv.report.summary_value(MetricKind::Dsc).map(|s| format!("{:.3}±{:.3}", s.mean, s.std)).unwrap_or_default();
    notes.push(format!(
        "k=2, 5-epoch cross_validate on {} synthetic images: {} fold rows, summary of {} metrics with per-class rows {classes:?}, DSC {dsc}",
        records.len(),
        cv.report.folds.len(),
        MetricKind::ALL.len()
    ));
    Ok(verdict(ok, notes.join("; ")))
}

fn ac8_determinism() -> Outcome {
    let data = tempfile::tempdir()?;
    let synth = SyntheticConfig { benign: 4, malignant: 2, normal: 2, ..SyntheticConfig::default() };
    let records = dataio::write_synthetic_dataset(data.path(), &synth)?;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir()?;
        let config = TrainConfig { epochs: 2, folds: 2, out_dir: Some(out.path().to_path_buf()), ..TrainConfig::default() };
        let plan = train::resolve_plan(&config, &records)?;
        let outcome = train::train_fold::<f32>(&config, &records, &plan, 0)?;
        let path = train::fold_dir(out.path(), 0).join("best.crun");
        let bytes = fs::read(&path)?;
        runs.push((bytes, outcome.history.trajectory(), outcome.best, out));
    }
    let identical = runs[0].0 == runs[1].0 && runs[0].1 == runs[1].1;

    let (bytes, _, model, dir) = &runs[0];
    let (loaded, _) = checkpoint::load_model::<f32>(&train::fold_dir(dir.path(), 0).join("best.crun"))?;
    let samples: Vec<_> = dataio::synthetic_samples(&synth)?.into_iter().map(|(_, s, _)| s).collect();
    let refs: Vec<_> = samples.iter().collect();
    let batch = dataio::to_batch::<f32>(&refs);
    let a = model.predict(&batch.images)?;
    let b = loaded.predict(&batch.images)?;
    let same_bits = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(verdict(
        identical && same_bits,
        format!(
            "two default-network runs: checkpoints ({} bytes) {}, histories {}; save→load→forward on {} images {}",
            bytes.len(),
            if runs[0].0 == runs[1].0 { "bit-identical" } else { "DIFFER" },
            if runs[0].1 == runs[1].1 { "identical" } else { "DIFFER" },
            samples.len(),
            if same_bits { "bit-identical" } else { "DIFFERS" }
        ),
    ))
}

fn ac9_real_data() -> Outcome {
    let Some(root) = std::env::var_os("CRESUNET_BUSI_DIR") else {
        return Ok(Skip("set CRESUNET_BUSI_DIR to a BUSI-layout directory to run".into()));
    };
    let records = dataio::scan_dataset(Path::new(&root))?;
    let counts = dataio::class_counts(&records);
    let got = [
        records.len(),
        counts.get(&SampleClass::Benign).copied().unwrap_or(0),
        counts.get(&SampleClass::Malignant).copied().unwrap_or(0),
        counts.get(&SampleClass::Normal).copied().unwrap_or(0),
    ];
    if got != [780, 437, 210, 133] {
        return Ok(Fail(format!("scan found {}/{}/{}/{}, expected 780/437/210/133", got[0], got[1], got[2], got[3])));
    }
    let config = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let plan = train::resolve_plan(&config, &records)?;
    let outcome = train::train_fold::<f32>(&config, &records, &plan, 0)?;
    let mut evaluator = Evaluator::new(config.threshold, config.auc_pooling);
    train::evaluate_fold(&config, &outcome.best, &records, &plan, 0, Some(&outcome.audit), &mut evaluator)?;
    let report = evaluator.finish();
    let valid = report.images.len() == plan.test_ids(0)?.len()
        && report.images.iter().all(|m| [m.dsc, m.iou, m.acc, m.precision, m.recall].iter().all(|v| (0.0..=1.0).contains(v)));
    let dsc = report.summary_value(MetricKind::Dsc).map(|s| format!("{:.3}", s.mean)).unwrap_or_default();
    Ok(verdict(
        valid,
        format!("scan 780/437/210/133; 2-epoch fold-0 run scored {} test images, DSC {dsc}", report.images.len()),
    ))
}
