//! Optimisation, model selection and cross-validated evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::save_model;
use crate::config::{OptimizerConfig, OptimizerKind, RunManifest, TrainConfig};
use crate::dataio::{
    batches, dataset_hash, epoch_seed, kfold_split, load_samples, select, to_batch, validation_split, FoldPlan,
    SampleClass, SampleRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricReport};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::preprocess::{augment, AugmentSet, LabeledImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First- and second-moment state for every store entry.
pub struct Optimizer<T> {
    config: OptimizerConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads` holds one entry per store entry, `None` for
    /// non-trainable ones.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if self.m.is_empty() {
            self.m = store.entries().iter().map(|e| vec![T::zero(); e.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let lr = T::from_f64_lossy(c.lr);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let eps = T::from_f64_lossy(c.eps);
        let mom = T::from_f64_lossy(c.momentum);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.value_mut(id);
            if g.dims() != p.dims() {
                return Err(Error::shape("optimizer", format!("gradient {:?} for parameter {:?}", g.dims(), p.dims())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match c.kind {
                OptimizerKind::Adam => {
                    for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for ((p, &g), m) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *m = mom * *m + g;
                        *p -= lr * *m;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Every sample id that entered a gradient step, with its epoch and batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditLog {
    entries: Vec<(usize, usize, String)>,
}

/// Strips augmentation suffixes (`#rot180`, `#nlm`) from a sample id.
pub fn base_id(id: &str) -> &str {
    id.split('#').next().unwrap_or(id)
}

impl AuditLog {
    pub fn record(&mut self, epoch: usize, batch: usize, ids: &[String]) {
        self.entries.extend(ids.iter().map(|id| (epoch, batch, id.clone())));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct base ids seen in training.
    pub fn base_ids(&self) -> HashSet<&str> {
        self.entries.iter().map(|(_, _, id)| base_id(id)).collect()
    }

    /// Fails when any of `test_ids` was used for a gradient step.
    pub fn check_disjoint(&self, test_ids: &[String]) -> Result<()> {
        let seen = self.base_ids();
        let leaked: Vec<&String> = test_ids.iter().filter(|id| seen.contains(base_id(id))).collect();
        match leaked.first() {
            None => Ok(()),
            Some(first) => Err(Error::Leakage { count: leaked.len(), first: (*first).clone() }),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tbatch\tid\n");
        for (e, b, id) in &self.entries {
            let _ = writeln!(s, "{e}\t{b}\t{id}");
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let mut cols = line.splitn(3, '\t');
            let parse = |c: Option<&str>| c.and_then(|s| s.parse().ok());
            match (parse(cols.next()), parse(cols.next()), cols.next()) {
                (Some(e), Some(b), Some(id)) => entries.push((e, b, id.to_string())),
                _ => return Err(Error::Data(format!("audit log line {}: expected epoch, batch and id", n + 1))),
            }
        }
        Ok(AuditLog { entries })
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_dsc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    /// Loss and DSC per epoch without timings, for reproducibility checks.
    pub fn trajectory(&self) -> Vec<(usize, f64, Option<f64>, Option<f64>)> {
        self.epochs.iter().map(|e| (e.epoch, e.train_loss, e.val_loss, e.val_dsc)).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,val_loss,val_dsc,seconds,best\n");
        for e in &self.epochs {
            let best = u8::from(self.best_epoch == Some(e.epoch));
            let _ = writeln!(
                s,
                "{},{:.8},{},{},{:.3},{best}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_dsc),
                e.seconds
            );
        }
        s
    }
}

fn mix(seed: u64, a: usize, b: usize) -> u64 {
    epoch_seed(epoch_seed(seed, a), b)
}

/// Mini-batch gradient descent on one model.
pub struct Trainer<T> {
    model: Model<T>,
    optimizer: Optimizer<T>,
    batch_size: usize,
    smooth: f64,
    seed: u64,
    epoch: usize,
    audit: AuditLog,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let mut spec = config.model.clone();
        spec.seed = config.seed;
        Ok(Self::with_model(Model::build(spec)?, config))
    }

    pub fn with_model(model: Model<T>, config: &TrainConfig) -> Self {
        Trainer {
            model,
            optimizer: Optimizer::new(config.optimizer),
            batch_size: config.batch_size,
            smooth: config.smooth,
            seed: config.seed,
            epoch: 0,
            audit: AuditLog::default(),
        }
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// Epochs completed.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One gradient step on a batch; returns the loss.
    pub fn step(&mut self, images: &Tensor<T>, masks: &Tensor<T>, dropout_seed: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let mut ctx = self.model.context(&mut tape, Mode::Train, dropout_seed);
        let x = ctx.tape.constant(images.clone());
        let y = self.model.forward(&mut ctx, x)?;
        let loss = ctx.tape.dice_loss(y, masks, self.smooth)?;
        let value = ctx.tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { epoch: self.epoch + 1, batch: 0 });
        }
        let grads = ctx.tape.backward(loss)?;
        let param_grads = ctx.param_grads(&grads);
        let updates = ctx.take_updates();
        drop(ctx);
        self.optimizer.step(self.model.params_mut(), &param_grads)?;
        self.model.params_mut().apply_running_updates(&updates);
        Ok(value)
    }

    /// One pass over `samples` in a seeded order; returns the mean loss
    /// per sample.
    pub fn run_epoch(&mut self, samples: &[LabeledImage]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let order_seed = epoch_seed(self.seed, self.epoch);
        let mut total = 0.0;
        for (b, batch) in batches::<T>(samples, self.batch_size, Some(order_seed))?.enumerate() {
            self.audit.record(self.epoch + 1, b, &batch.ids);
            let loss = self.step(&batch.images, &batch.masks, mix(self.seed, self.epoch, b)).map_err(|e| match e {
                Error::NonFinite { epoch, .. } => Error::NonFinite { epoch, batch: b },
                other => other,
            })?;
            total += loss * batch.ids.len() as f64;
        }
        self.epoch += 1;
        Ok(total / samples.len() as f64)
    }
}

/// Eval-mode probability maps, one `1×H×W` tensor per sample.
pub fn predict_samples<T: Scalar>(model: &Model<T>, samples: &[LabeledImage], batch_size: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let batch = to_batch::<T>(&refs);
        let pred = model.predict(&batch.images)?;
        for i in 0..chunk.len() {
            out.push(pred.sample(i)?);
        }
    }
    Ok(out)
}

/// Mean dice loss and mean per-image DSC in eval mode.
pub fn loss_and_dsc<T: Scalar>(
    model: &Model<T>,
    samples: &[LabeledImage],
    batch_size: usize,
    smooth: f64,
    threshold: f64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let preds = predict_samples(model, samples, batch_size)?;
    let mut loss = 0.0;
    let mut dsc = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        let target: Vec<T> = s.mask.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        let target = Tensor::from_vec([1, 1, s.mask.height(), s.mask.width()], target)?;
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::from_vec(target.dims().to_vec(), p.data().to_vec())?);
        let l = tape.dice_loss(pv, &target, smooth)?;
        loss += tape.value(l).data()[0].as_f64();
        dsc += crate::metrics::ImageMetrics::compute("", None, 0, p.data(), target.data(), threshold)?.dsc;
    }
    let n = samples.len() as f64;
    Ok((loss / n, dsc / n))
}

pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch (the last epoch when there
    /// is no validation set).
    pub best: Model<T>,
    pub last: Model<T>,
    pub history: TrainHistory,
    pub audit: AuditLog,
}

/// Trains for `config.epochs`, keeping the model with the strictly best
/// validation DSC. `on_epoch` sees each record and the current model.
pub fn train_on<T: Scalar>(
    config: &TrainConfig,
    train: &[LabeledImage],
    validation: &[LabeledImage],
    mut on_epoch: impl FnMut(&EpochRecord, &Model<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut trainer = Trainer::<T>::new(config)?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<T>)> = None;
    for _ in 0..config.epochs {
        let start = Instant::now();
        let train_loss = trainer.run_epoch(train)?;
        let (val_loss, val_dsc) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, d) = loss_and_dsc(trainer.model(), validation, config.batch_size, config.smooth, config.threshold)?;
            (Some(l), Some(d))
        };
        let record = EpochRecord {
            epoch: trainer.epoch(),
            train_loss,
            val_loss,
            val_dsc,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = match (val_dsc, &best) {
            (None, _) | (Some(_), None) => true,
            (Some(d), Some((b, _))) => d > *b,
        };
        if improved {
            best = Some((val_dsc.unwrap_or(f64::NEG_INFINITY), trainer.model().clone()));
            history.best_epoch = Some(record.epoch);
        }
        log::info!(
            "epoch {} train_loss {:.5} val_loss {} val_dsc {}{}",
            record.epoch,
            record.train_loss,
            val_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
            val_dsc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            if improved { " *" } else { "" }
        );
        on_epoch(&record, trainer.model())?;
        history.epochs.push(record);
    }
    let audit = trainer.audit().clone();
    let last = trainer.into_model();
    let best = best.map(|(_, m)| m).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, history, audit })
}

/// Train, validation and test ids of one fold.
pub struct FoldSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub fn fold_split(config: &TrainConfig, plan: &FoldPlan, fold: usize) -> Result<FoldSplit> {
    let test = plan.test_ids(fold)?.to_vec();
    let (train, validation) = validation_split(&plan.train_ids(fold)?, config.validation_fraction, mix(config.seed, fold, 0))?;
    Ok(FoldSplit { train, validation, test })
}

/// The fold plan named in the config, or a fresh one drawn from its seed.
pub fn resolve_plan(config: &TrainConfig, records: &[SampleRecord]) -> Result<FoldPlan> {
    let plan = match &config.fold_plan {
        Some(path) if path.exists() => FoldPlan::load(path)?,
        _ => kfold_split(records, config.folds, config.seed, config.stratified)?,
    };
    plan.check_against(records)?;
    Ok(plan)
}

fn owned(records: Vec<&SampleRecord>) -> Vec<SampleRecord> {
    records.into_iter().cloned().collect()
}

/// Loads a fold's training (denoised, augmented) and validation samples.
/// Validation images are prepared like test images so model selection sees
/// test conditions.
pub fn load_fold_data(
    config: &TrainConfig,
    records: &[SampleRecord],
    split: &FoldSplit,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let (h, w) = (config.model.input_height, config.model.input_width);
    let denoise = config.denoise_train && config.augment != AugmentSet::DenoisedAndRotated;
    let train = load_samples(&owned(select(records, &split.train)?), h, w, denoise.then_some(&config.nlm))?;
    let train = augment(&train, config.augment, &config.nlm)?;
    let validation = load_samples(&owned(select(records, &split.validation)?), h, w, config.denoise_test.then_some(&config.nlm))?;
    Ok((train, validation))
}

/// Manifest of one training fold: config echo, seed, fold and dataset hash.
pub fn fold_manifest(config: &TrainConfig, fold: usize, dataset_hash: &str) -> RunManifest {
    let mut m = RunManifest::new("train").with_config(config).arg("fold", fold);
    m.fold = Some(fold);
    m.dataset_hash = Some(dataset_hash.to_string());
    m
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

/// Trains one fold from a dataset on disk. With `config.out_dir` set, writes
/// `fold<k>/best.crun`, periodic checkpoints, `history.csv`, `audit.tsv`
/// and `manifest.txt`.
pub fn train_fold<T: Scalar>(
    config: &TrainConfig,
    records: &[SampleRecord],
    plan: &FoldPlan,
    fold: usize,
) -> Result<TrainOutcome<T>> {
    let split = fold_split(config, plan, fold)?;
    let (train, validation) = load_fold_data(config, records, &split)?;
    log::info!(
        "fold {fold}: {} training samples after augmentation, {} validation, {} test",
        train.len(),
        validation.len(),
        split.test.len()
    );
    let dir = config.out_dir.as_ref().map(|o| fold_dir(o, fold));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        fold_manifest(config, fold, &dataset_hash(records)?).save(&d.join("manifest.txt"))?;
        plan.save(&d.join("folds.tsv"))?;
    }
    let mut best_dsc = f64::NEG_INFINITY;
    let outcome = train_on::<T>(config, &train, &validation, |rec, model| {
        let Some(d) = &dir else { return Ok(()) };
        if config.checkpoint_every > 0 && rec.epoch % config.checkpoint_every == 0 {
            save_model(model, config.seed, rec.epoch, &d.join(format!("epoch{}.crun", rec.epoch)))?;
        }
        let dsc = rec.val_dsc.unwrap_or(f64::INFINITY);
        if dsc > best_dsc || rec.val_dsc.is_none() {
            best_dsc = dsc;
            save_model(model, config.seed, rec.epoch, &d.join("best.crun"))?;
        }
        Ok(())
    })?;
    outcome.audit.check_disjoint(&split.test)?;
    if let Some(d) = &dir {
        let write = |name: &str, text: String| fs::write(d.join(name), text).map_err(|e| Error::io(d.join(name), e));
        write("history.csv", outcome.history.to_csv())?;
        write("audit.tsv", outcome.audit.to_tsv())?;
    }
    Ok(outcome)
}

/// Scores `model` on labelled samples into `evaluator`.
pub fn evaluate_into<T: Scalar>(
    evaluator: &mut Evaluator,
    model: &Model<T>,
    samples: &[LabeledImage],
    classes: &HashMap<String, SampleClass>,
    fold: usize,
    batch_size: usize,
) -> Result<()> {
    let preds = predict_samples(model, samples, batch_size)?;
    for (s, p) in samples.iter().zip(&preds) {
        let target: Vec<T> = s.mask.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        evaluator.add(&s.id, classes.get(base_id(&s.id)).copied(), fold, p.data(), &target)?;
    }
    Ok(())
}

/// Eval-mode metrics on the test fold. When `audit` is given, any test id
/// that was trained on is a hard error.
pub fn evaluate_fold<T: Scalar>(
    config: &TrainConfig,
    model: &Model<T>,
    records: &[SampleRecord],
    plan: &FoldPlan,
    fold: usize,
    audit: Option<&AuditLog>,
    evaluator: &mut Evaluator,
) -> Result<()> {
    if model.spec().input_height != config.model.input_height || model.spec().input_width != config.model.input_width {
        return Err(Error::Config("checkpoint input size differs from the configured size".into()));
    }
    let test_ids = plan.test_ids(fold)?;
    if let Some(a) = audit {
        a.check_disjoint(test_ids)?;
    }
    let test = owned(select(records, test_ids)?);
    let nlm = config.denoise_test.then_some(&config.nlm);
    let samples = load_samples(&test, config.model.input_height, config.model.input_width, nlm)?;
    let classes = records.iter().map(|r| (r.id.clone(), r.class)).collect();
    evaluate_into(evaluator, model, &samples, &classes, fold, config.batch_size)
}

pub struct CrossValidation {
    pub report: MetricReport,
    pub histories: Vec<TrainHistory>,
    pub plan: FoldPlan,
}

/// Trains and evaluates every fold in turn.
pub fn cross_validate<T: Scalar>(config: &TrainConfig, records: &[SampleRecord]) -> Result<CrossValidation> {
    config.validate()?;
    let plan = resolve_plan(config, records)?;
    let mut evaluator = Evaluator::new(config.threshold, config.auc_pooling);
    let mut histories = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let outcome = train_fold::<T>(config, records, &plan, fold)?;
        evaluate_fold(config, &outcome.best, records, &plan, fold, Some(&outcome.audit), &mut evaluator)?;
        histories.push(outcome.history);
    }
    let report = evaluator.finish();
    if let Some(out) = &config.out_dir {
        let write = |name: &str, text: String| fs::write(out.join(name), text).map_err(|e| Error::io(out.join(name), e));
        write("report.txt", report.to_table())?;
        write("report.csv", report.to_csv())?;
        write("summary.csv", report.summary_csv())?;
    }
    Ok(CrossValidation { report, histories, plan })
}

/// Per-fold image counts, for logging.
pub fn fold_sizes(plan: &FoldPlan) -> BTreeMap<usize, usize> {
    plan.folds.iter().enumerate().map(|(i, f)| (i, f.len())).collect()
}
