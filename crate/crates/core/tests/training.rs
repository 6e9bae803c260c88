//! End-to-end training behaviour on small synthetic datasets.

use std::fs;
use std::path::Path;

use cresunet::config::{RunManifest, TrainConfig};
use cresunet::dataio::{self, SampleRecord, SyntheticConfig};
use cresunet::metrics::MetricKind;
use cresunet::model::ModelSpec;
use cresunet::preprocess::{AugmentSet, Provenance};
use cresunet::train::{self, AuditLog};
use cresunet::Error;

fn small_config(out: Option<&Path>) -> TrainConfig {
    let model = ModelSpec { encoder_filters: [4, 4, 4, 8, 8], bottleneck_filters: 8, decoder_divisor: 1, ..ModelSpec::default() }
        .with_input_size(32, 32);
    TrainConfig {
        model,
        epochs: 3,
        batch_size: 4,
        validation_fraction: 0.25,
        folds: 2,
        augment: AugmentSet::Rotated,
        out_dir: out.map(Path::to_path_buf),
        ..TrainConfig::default()
    }
}

fn dataset(root: &Path) -> Vec<SampleRecord> {
    let cfg = SyntheticConfig { benign: 6, malignant: 4, normal: 2, height: 32, width: 32, bright_lesions: true, ..Default::default() };
    dataio::write_synthetic_dataset(root, &cfg).unwrap()
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    let records = dataset(data.path());
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let mut config = small_config(Some(out.path()));
        config.checkpoint_every = 1;
        let plan = train::resolve_plan(&config, &records).unwrap();
        let outcome = train::train_fold::<f32>(&config, &records, &plan, 0).unwrap();
        let dir = train::fold_dir(out.path(), 0);
        let files: Vec<Vec<u8>> =
            ["best.crun", "epoch1.crun", "epoch3.crun", "audit.tsv"].iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
        outputs.push((files, outcome.history.trajectory()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn best_checkpoint_dominates_logged_validation_dsc() {
    let data = tempfile::tempdir().unwrap();
    let records = dataset(data.path());
    let mut config = small_config(None);
    config.epochs = 6;
    config.optimizer.lr = 1e-2;
    let plan = train::resolve_plan(&config, &records).unwrap();
    let split = train::fold_split(&config, &plan, 1).unwrap();
    let (train_set, val) = train::load_fold_data(&config, &records, &split).unwrap();
    let outcome = train::train_on::<f32>(&config, &train_set, &val, |_, _| Ok(())).unwrap();
    let (_, best_dsc) = train::loss_and_dsc(&outcome.best, &val, 4, config.smooth, config.threshold).unwrap();
    for rec in &outcome.history.epochs {
        assert!(best_dsc >= rec.val_dsc.unwrap(), "epoch {}: {} > best {}", rec.epoch, rec.val_dsc.unwrap(), best_dsc);
    }
    let best_epoch = outcome.history.best_epoch.unwrap();
    assert_eq!(outcome.history.epochs[best_epoch - 1].val_dsc, Some(best_dsc));
}

#[test]
fn audit_log_never_contains_test_ids() {
    let data = tempfile::tempdir().unwrap();
    let records = dataset(data.path());
    let config = small_config(None);
    let plan = train::resolve_plan(&config, &records).unwrap();
    for fold in 0..plan.k {
        let outcome = train::train_fold::<f32>(&config, &records, &plan, fold).unwrap();
        let test = plan.test_ids(fold).unwrap();
        let seen = outcome.audit.base_ids();
        assert!(test.iter().all(|id| !seen.contains(id.as_str())));
        // Every training id took part in a gradient step.
        let split = train::fold_split(&config, &plan, fold).unwrap();
        assert!(split.train.iter().all(|id| seen.contains(id.as_str())));
    }
    let mut leaky = AuditLog::default();
    leaky.record(1, 0, &[format!("{}#rot180", plan.test_ids(0).unwrap()[0])]);
    assert!(matches!(leaky.check_disjoint(plan.test_ids(0).unwrap()), Err(Error::Leakage { .. })));
}

#[test]
fn training_reduces_loss_and_fits_training_data_better_than_test() {
    let data = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { benign: 8, malignant: 6, normal: 2, height: 32, width: 32, bright_lesions: true, seed: 3, ..Default::default() };
    let records = dataio::write_synthetic_dataset(data.path(), &cfg).unwrap();
    let mut config = small_config(None);
    config.epochs = 25;
    config.validation_fraction = 0.0;
    config.augment = AugmentSet::None;
    config.optimizer.lr = 1e-2;
    let plan = train::resolve_plan(&config, &records).unwrap();
    let split = train::fold_split(&config, &plan, 0).unwrap();
    let (train_set, _) = train::load_fold_data(&config, &records, &split).unwrap();
    let outcome = train::train_on::<f32>(&config, &train_set, &[], |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = outcome.history.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses[losses.len() - 1] < losses[0], "losses {losses:?}");

    let test: Vec<SampleRecord> = dataio::select(&records, &split.test).unwrap().into_iter().cloned().collect();
    let test_set = dataio::load_samples(&test, 32, 32, None).unwrap();
    let (_, train_dsc) = train::loss_and_dsc(&outcome.best, &train_set, 4, 1.0, 0.5).unwrap();
    let (_, test_dsc) = train::loss_and_dsc(&outcome.best, &test_set, 4, 1.0, 0.5).unwrap();
    assert!(train_dsc >= test_dsc, "train {train_dsc} < test {test_dsc}");
}

#[test]
fn two_fold_cross_validation_writes_report_and_manifests() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let records = dataset(data.path());
    let mut config = small_config(Some(out.path()));
    config.epochs = 2;
    let cv = train::cross_validate::<f32>(&config, &records).unwrap();
    assert_eq!(cv.report.images.len(), records.len());
    assert_eq!(cv.report.folds.len(), 2);
    assert_eq!(cv.histories.len(), 2);
    assert_eq!(fs::read_to_string(out.path().join("report.csv")).unwrap().lines().count(), 1 + records.len());
    let summary = fs::read_to_string(out.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 + 2, "{summary}");
    let dsc = cv.report.summary_value(MetricKind::Dsc).unwrap();
    let folds: Vec<f64> = cv.report.folds.iter().map(|f| f.means[&MetricKind::Dsc].unwrap()).collect();
    assert!((dsc.mean - (folds[0] + folds[1]) / 2.0).abs() < 1e-12);
    let classes: Vec<_> = cv.report.per_class.keys().map(|c| c.name()).collect();
    assert_eq!(classes, ["benign", "malignant"]);

    for fold in 0..2 {
        let dir = train::fold_dir(out.path(), fold);
        let manifest = RunManifest::load(&dir.join("manifest.txt")).unwrap();
        assert_eq!(manifest.fold, Some(fold));
        assert_eq!(manifest.config.as_ref(), Some(&config));
        assert_eq!(manifest.dataset_hash.as_deref(), Some(dataio::dataset_hash(&records).unwrap().as_str()));
        for f in ["best.crun", "history.csv", "audit.tsv", "folds.tsv"] {
            assert!(dir.join(f).is_file(), "missing {f}");
        }
    }
}

#[test]
fn rerun_from_manifest_reproduces_the_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let records = dataset(data.path());
    let first = tempfile::tempdir().unwrap();
    let config = small_config(Some(first.path()));
    let plan = train::resolve_plan(&config, &records).unwrap();
    train::train_fold::<f32>(&config, &records, &plan, 1).unwrap();
    let manifest = RunManifest::load(&train::fold_dir(first.path(), 1).join("manifest.txt")).unwrap();

    let second = tempfile::tempdir().unwrap();
    let mut replay = manifest.config.clone().unwrap();
    replay.out_dir = Some(second.path().to_path_buf());
    let plan = train::resolve_plan(&replay, &records).unwrap();
    train::train_fold::<f32>(&replay, &records, &plan, manifest.fold.unwrap()).unwrap();
    let read = |root: &Path| fs::read(train::fold_dir(root, 1).join("best.crun")).unwrap();
    assert_eq!(read(first.path()), read(second.path()));
}

#[test]
fn training_images_are_denoised_and_validation_images_are_not() {
    let data = tempfile::tempdir().unwrap();
    let records = dataset(data.path());
    let mut config = small_config(None);
    let plan = train::resolve_plan(&config, &records).unwrap();
    let split = train::fold_split(&config, &plan, 0).unwrap();
    let (train_set, val) = train::load_fold_data(&config, &records, &split).unwrap();
    assert!(!val.is_empty());
    assert!(val.iter().all(|s| s.image.provenance() == Provenance::Raw));
    let originals = &train_set[..split.train.len()];
    assert!(originals.iter().all(|s| s.image.provenance() == Provenance::Denoised));

    config.denoise_train = false;
    let (raw, _) = train::load_fold_data(&config, &records, &split).unwrap();
    assert!(raw[..split.train.len()].iter().all(|s| s.image.provenance() == Provenance::Raw));
    assert_ne!(raw[0].image.data(), originals[0].image.data());
    assert_eq!(raw[0].mask, originals[0].mask);
}
