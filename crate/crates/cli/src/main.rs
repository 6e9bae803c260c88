//! `cresunet`: dataset splitting, training, evaluation, inference and
//! diagnostics for the CResU-Net segmentation model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cresunet::checkpoint::{load_model, Checkpoint};
use cresunet::checks;
use cresunet::config::{RunManifest, TrainConfig};
use cresunet::dataio::{self, SyntheticConfig};
use cresunet::metrics::Evaluator;
use cresunet::model::{Model, ModelSpec};
use cresunet::preprocess::{self, GrayImage, NlmParams};
use cresunet::train::{self, AuditLog};
use cresunet::{Error, OpKind, Tensor32};

const EXIT_CODES: &str = "\
EXIT CODES:
  0   success
  1   internal error
  2   invalid command line
  3   missing or unreadable file
  4   malformed configuration or invalid argument
  5   checkpoint does not match the configured model, or input shape mismatch
  6   corrupt or unsupported checkpoint
  7   dataset or image problem (undecodable PNG, missing mask, changed data)
  8   train/test fold leakage detected
  9   training diverged (non-finite loss)
  10  gradient check failed

ENVIRONMENT:
  CRESUNET_THREADS   number of worker threads (default: all cores)
  RUST_LOG           log filter, e.g. `info` (default) or `debug`";

/// Every configuration key with its desk-profile default, for `--help`.
fn config_help() -> String {
    let mut s = String::from("CONFIGURATION KEYS (for --config files and --set; desk-profile defaults):\n");
    for (k, v) in TrainConfig::default().to_pairs() {
        s.push_str(&format!("  {k}={v}\n"));
    }
    s.push_str("--full changes model.input_height/width to 256 and train.epochs to 200.");
    s
}

/// Accepted range of trainable parameters, inclusive.
const PARAM_BAND: (usize, usize) = (7_100_000, 10_700_000);

#[derive(Parser)]
#[command(name = "cresunet", version, about = "CResU-Net breast-ultrasound lesion segmentation", after_help = EXIT_CODES)]
struct Cli {
    /// Additionally write this run's manifest to FILE.
    #[arg(long, global = true, value_name = "FILE")]
    manifest_out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value configuration file; unknown keys are rejected.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=5`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Start from the full-scale profile (256×256 inputs, 200 epochs) instead of the desk profile (64×64, 20 epochs).
    #[arg(long)]
    full: bool,
}

impl ConfigArgs {
    fn resolve_from(&self, base: TrainConfig) -> Result<TrainConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::load(path, base)?,
            None => base,
        };
        config.apply_overrides(&self.set)?;
        Ok(config)
    }

    fn resolve(&self) -> Result<TrainConfig, Failure> {
        self.resolve_from(if self.full { TrainConfig::full() } else { TrainConfig::default() })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset and write a k-fold plan (one `id<TAB>class<TAB>fold` row per image).
    Split {
        /// Dataset root with benign/, malignant/ and normal/ subdirectories.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Number of folds.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Shuffle seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output fold-plan file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Ignore class labels when assigning folds.
        #[arg(long)]
        no_stratify: bool,
    },
    /// Train one fold; writes checkpoints, history, audit log and manifest under <out.dir>/fold<k>/.
    #[command(after_help = config_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fold held out for testing (0-based).
        #[arg(long)]
        fold: usize,
        /// Shorthand for `--set data.dir=DIR`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Shorthand for `--set out.dir=DIR`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its test fold. Without --config, the manifest.txt next to the
    /// checkpoint supplies the configuration; audit.tsv and folds.tsv next to it are used when present.
    #[command(after_help = config_help())]
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        fold: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set data.dir=DIR`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Training audit log to check for leakage (default: audit.tsv next to the checkpoint).
        #[arg(long, value_name = "FILE")]
        audit: Option<PathBuf>,
        /// Write per-image metrics as CSV.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Segment one image; the mask has the input image's size.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Grayscale PNG input.
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Binary PNG mask output.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write the probability map as PNG.
        #[arg(long, value_name = "FILE")]
        prob: Option<PathBuf>,
        /// Probabilities strictly above this are lesion.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// NLM-despeckle the resized input with default parameters first.
        #[arg(long)]
        denoise: bool,
    },
    /// Non-local-means despeckling of one PNG.
    Denoise {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Filtering strength.
        #[arg(long, default_value_t = NlmParams::default().h)]
        h: f64,
        /// Comparison patch side (odd).
        #[arg(long, default_value_t = NlmParams::default().patch)]
        patch: usize,
        /// Search window side (odd).
        #[arg(long, default_value_t = NlmParams::default().window)]
        window: usize,
        /// Noise level subtracted from patch distances.
        #[arg(long, default_value_t = NlmParams::default().sigma)]
        sigma: f64,
    },
    /// Print the parameter table, feature-map shapes and total trainable parameters.
    #[command(after_help = config_help())]
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the finite-difference gradient checks and print the worst relative errors.
    Gradcheck {
        /// Single check to run (a primitive such as `conv2d`, a block such as `block_co`, or a
        /// network check); all checks when omitted.
        #[arg(long, value_name = "NAME")]
        op: Option<String>,
        /// Random cases per primitive; blocks use a tenth as many.
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward pass of one operation kind (negative control), e.g. `conv2d`.
        #[arg(long, value_name = "KIND")]
        inject_fault: Option<String>,
    },
    /// Train and evaluate every fold; writes report.txt, report.csv and summary.csv under out.dir.
    #[command(after_help = config_help())]
    CrossValidate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set data.dir=DIR`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Shorthand for `--set out.dir=DIR`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the benign/malignant/normal directory layout.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticConfig::default().benign)]
        benign: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().malignant)]
        malignant: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().normal)]
        normal: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = SyntheticConfig::default().height)]
        size: usize,
        /// Multiplicative speckle level.
        #[arg(long, default_value_t = SyntheticConfig::default().speckle)]
        speckle: f64,
        #[arg(long, default_value_t = SyntheticConfig::default().seed)]
        seed: u64,
        /// Lesions brighter than the background instead of darker.
        #[arg(long)]
        bright_lesions: bool,
    },
    /// Repeat a command from the manifest it wrote.
    Rerun {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },
}

/// A failed command: exit code and one-line diagnostic.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => 3,
            Error::Config(_) | Error::InvalidArgument(_) => 4,
            Error::Shape { .. } | Error::ParamMismatch { .. } => 5,
            Error::Format(_) | Error::Version { .. } | Error::Truncated(_) => 6,
            Error::Decode { .. } | Error::Data(_) => 7,
            Error::Leakage { .. } => 8,
            Error::NonFinite { .. } => 9,
        };
        Failure::new(code, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn bool_arg(flag: bool) -> &'static str {
    if flag {
        "true"
    } else {
        "false"
    }
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

/// Writes the manifest next to the command's output and, if requested, to `--manifest-out`.
fn emit_manifest(manifest: &RunManifest, default: Option<&Path>, extra: Option<&Path>) -> CliResult {
    for path in default.into_iter().chain(extra) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
        }
        manifest.save(path)?;
        log::info!("manifest written to {}", path.display());
    }
    Ok(())
}

fn with_sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn set_data_and_out(config: &mut TrainConfig, data: &Option<PathBuf>, out: &Option<PathBuf>) {
    if let Some(d) = data {
        config.data_dir = Some(d.clone());
    }
    if let Some(o) = out {
        config.out_dir = Some(o.clone());
    }
}

fn require_data(config: &TrainConfig) -> CliResult<PathBuf> {
    config.data_dir.clone().ok_or_else(|| Failure::new(4, "no dataset: pass --data DIR or set data.dir"))
}

fn require_out(config: &TrainConfig) -> CliResult<PathBuf> {
    config.out_dir.clone().ok_or_else(|| Failure::new(4, "no output directory: pass --out DIR or set out.dir"))
}

fn cmd_split(data: &Path, k: usize, seed: u64, out: &Path, no_stratify: bool, manifest_out: Option<&Path>) -> CliResult {
    let records = dataio::scan_dataset(data)?;
    let plan = dataio::kfold_split(&records, k, seed, !no_stratify)?;
    plan.save(out)?;
    println!("{:<6}{:>8}{:>10}{:>11}{:>8}", "fold", "images", "benign", "malignant", "normal");
    for (i, table) in plan.class_table().iter().enumerate() {
        let n = |c| table.get(&c).copied().unwrap_or(0);
        println!(
            "{:<6}{:>8}{:>10}{:>11}{:>8}",
            i,
            plan.folds[i].len(),
            n(dataio::SampleClass::Benign),
            n(dataio::SampleClass::Malignant),
            n(dataio::SampleClass::Normal)
        );
    }
    println!("fold plan written to {}", out.display());
    let mut m = RunManifest::new("split")
        .arg("data", path_arg(data))
        .arg("k", k)
        .arg("seed", seed)
        .arg("out", path_arg(out))
        .arg("no-stratify", bool_arg(no_stratify));
    m.dataset_hash = Some(dataio::dataset_hash(&records)?);
    emit_manifest(&m, Some(&with_sibling(out, ".manifest")), manifest_out)
}

fn cmd_train(config: TrainConfig, fold: usize, manifest_out: Option<&Path>) -> CliResult {
    let data = require_data(&config)?;
    let out = require_out(&config)?;
    let records = dataio::scan_dataset(&data)?;
    let plan = train::resolve_plan(&config, &records)?;
    if fold >= plan.k {
        return Err(Failure::new(4, format!("fold {fold} out of range for {} folds", plan.k)));
    }
    let start = Instant::now();
    let outcome = train::train_fold::<f32>(&config, &records, &plan, fold)?;
    let dir = train::fold_dir(&out, fold);
    match outcome.history.best_epoch {
        Some(e) => {
            let rec = &outcome.history.epochs[e - 1];
            let dsc = rec.val_dsc.map(|d| format!(", validation DSC {d:.4}")).unwrap_or_default();
            println!("fold {fold}: best epoch {e} (train loss {:.5}{dsc})", rec.train_loss);
        }
        None => println!("fold {fold}: no epochs run"),
    }
    println!("outputs in {} ({:.1} s)", dir.display(), start.elapsed().as_secs_f64());
    if let Some(extra) = manifest_out {
        let m = train::fold_manifest(&config, fold, &dataio::dataset_hash(&records)?);
        emit_manifest(&m, None, Some(extra))?;
    }
    Ok(())
}

/// Keys whose values differ between two model specs.
fn spec_differences(a: &ModelSpec, b: &ModelSpec) -> Vec<String> {
    a.to_pairs()
        .into_iter()
        .zip(b.to_pairs())
        .filter(|((_, x), (_, y))| x != y)
        .map(|((k, x), (_, y))| format!("{k}: config {x}, checkpoint {y}"))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    fold: usize,
    cfg: &ConfigArgs,
    data: &Option<PathBuf>,
    audit: &Option<PathBuf>,
    report_path: &Option<PathBuf>,
    manifest_out: Option<&Path>,
) -> CliResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let sibling_manifest = dir.join("manifest.txt");
    let mut config = if cfg.config.is_none() && !cfg.full && sibling_manifest.is_file() {
        let base = RunManifest::load(&sibling_manifest)?
            .config
            .ok_or_else(|| Failure::new(4, format!("{} holds no configuration", sibling_manifest.display())))?;
        log::info!("configuration from {}", sibling_manifest.display());
        cfg.resolve_from(base)?
    } else {
        cfg.resolve()?
    };
    set_data_and_out(&mut config, data, &None);
    let sibling_plan = dir.join("folds.tsv");
    if config.fold_plan.is_none() && sibling_plan.is_file() {
        config.fold_plan = Some(sibling_plan);
    }

    let mut expected = config.model.clone();
    expected.seed = ckpt.meta.spec.seed;
    let diffs = spec_differences(&expected, &ckpt.meta.spec);
    if !diffs.is_empty() {
        return Err(Failure::new(5, format!("checkpoint does not match the configured model: {}", diffs.join("; "))));
    }
    let model: Model<f32> = ckpt.to_model()?;

    let data_dir = require_data(&config)?;
    let records = dataio::scan_dataset(&data_dir)?;
    let plan = train::resolve_plan(&config, &records)?;
    let audit_path = audit.clone().or_else(|| Some(dir.join("audit.tsv")).filter(|p| p.is_file()));
    let audit_log = match &audit_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            Some(AuditLog::from_tsv(&text)?)
        }
        None => {
            log::warn!("no audit log found; train/test leakage is not checked");
            None
        }
    };
    let mut evaluator = Evaluator::new(config.threshold, config.auc_pooling);
    train::evaluate_fold(&config, &model, &records, &plan, fold, audit_log.as_ref(), &mut evaluator)?;
    let report = evaluator.finish();
    print!("{}", report.to_table());
    if let Some(p) = report_path {
        fs::write(p, report.to_csv()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        println!("per-image metrics written to {}", p.display());
    }
    let mut m = RunManifest::new("eval").with_config(&config).arg("checkpoint", path_arg(checkpoint)).arg("fold", fold);
    if let Some(p) = &audit_path {
        m = m.arg("audit", path_arg(p));
    }
    if let Some(p) = report_path {
        m = m.arg("report", path_arg(p));
    }
    m.fold = Some(fold);
    m.dataset_hash = Some(dataio::dataset_hash(&records)?);
    emit_manifest(&m, report_path.as_ref().map(|p| with_sibling(p, ".manifest")).as_deref(), manifest_out)
}

fn cmd_predict(
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    prob_path: &Option<PathBuf>,
    threshold: f64,
    denoise: bool,
    manifest_out: Option<&Path>,
) -> CliResult {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Failure::new(4, format!("threshold {threshold} outside [0, 1)")));
    }
    let (model, _) = load_model::<f32>(checkpoint)?;
    let img = preprocess::read_png(image)?;
    let (h, w) = (model.spec().input_height, model.spec().input_width);
    let mut resized = preprocess::resize_bilinear(&img, h, w)?;
    if denoise {
        resized = preprocess::nlm_denoise(&resized, &NlmParams::default())?;
    }
    let x = Tensor32::from_vec([1, 1, h, w], resized.data().to_vec())?;
    let p = model.predict(&x)?;
    let prob = GrayImage::new(h, w, p.into_data())?;
    let prob = preprocess::resize_bilinear(&prob, img.height(), img.width())?;
    let mask = GrayImage::from_fn(img.height(), img.width(), |y, x| (prob.get(y, x) as f64 > threshold) as u8 as f32);
    preprocess::write_png(&mask, out)?;
    let lesion = mask.data().iter().filter(|&&v| v == 1.0).count();
    println!("{}×{} mask written to {} ({lesion} lesion pixels)", mask.height(), mask.width(), out.display());
    let mut m = RunManifest::new("predict")
        .arg("checkpoint", path_arg(checkpoint))
        .arg("image", path_arg(image))
        .arg("out", path_arg(out))
        .arg("threshold", threshold)
        .arg("denoise", denoise);
    if let Some(pp) = prob_path {
        preprocess::write_png(&prob, pp)?;
        println!("probability map written to {}", pp.display());
        m = m.arg("prob", path_arg(pp));
    }
    emit_manifest(&m, Some(&with_sibling(out, ".manifest")), manifest_out)
}

fn cmd_denoise(input: &Path, out: &Path, params: NlmParams, manifest_out: Option<&Path>) -> CliResult {
    let img = preprocess::read_png(input)?;
    let start = Instant::now();
    let clean = preprocess::nlm_denoise(&img, &params)?;
    preprocess::write_png(&clean, out)?;
    println!(
        "denoised {}×{} image in {:.2} s, written to {}",
        img.height(),
        img.width(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    let m = RunManifest::new("denoise")
        .arg("in", path_arg(input))
        .arg("out", path_arg(out))
        .arg("h", params.h)
        .arg("patch", params.patch)
        .arg("window", params.window)
        .arg("sigma", params.sigma);
    emit_manifest(&m, Some(&with_sibling(out, ".manifest")), manifest_out)
}

fn cmd_inspect(config: TrainConfig, manifest_out: Option<&Path>) -> CliResult {
    let spec = config.model.clone();
    let model = Model::<f32>::build(spec.clone())?;
    println!("parameters");
    print!("{}", model.layer_table());
    println!();
    println!("feature maps for a 1×{}×{}×{} input", spec.in_channels, spec.input_height, spec.input_width);
    let trace = model.infer(&Tensor32::zeros([1, spec.in_channels, spec.input_height, spec.input_width]))?.trace;
    for t in &trace {
        println!("  {:<5} {}", t.label, t.shape);
    }
    println!();
    println!("trainable parameters by stage");
    for (stage, n) in model.param_breakdown() {
        println!("  {stage:<12} {n:>10}");
    }
    let total = model.param_count();
    let within = (PARAM_BAND.0..=PARAM_BAND.1).contains(&total);
    println!();
    println!("total trainable parameters: {total} ({:.2}M)", total as f64 / 1e6);
    println!(
        "acceptance band [{:.1}M, {:.1}M]: {}",
        PARAM_BAND.0 as f64 / 1e6,
        PARAM_BAND.1 as f64 / 1e6,
        if within { "within" } else { "OUTSIDE" }
    );
    emit_manifest(&RunManifest::new("inspect").with_config(&config), None, manifest_out)
}

fn cmd_gradcheck(op: &Option<String>, cases: usize, seed: u64, fault: &Option<String>, manifest_out: Option<&Path>) -> CliResult {
    let fault_kind = match fault {
        Some(name) => Some(OpKind::from_name(name).filter(|k| *k != OpKind::Leaf).ok_or_else(|| {
            Failure::new(4, format!("unknown operation kind `{name}` for --inject-fault"))
        })?),
        None => None,
    };
    if cases == 0 {
        return Err(Failure::new(4, "--cases must be at least 1"));
    }
    let mut m = RunManifest::new("gradcheck").arg("cases", cases).arg("seed", seed);
    if let Some(o) = op {
        m = m.arg("op", o);
    }
    if let Some(f) = fault {
        m = m.arg("inject-fault", f);
    }
    emit_manifest(&m, None, manifest_out)?;
    let start = Instant::now();
    let outcomes = checks::run_suite(op.as_deref(), cases, seed, fault_kind)?;
    let mut failed = 0;
    for o in &outcomes {
        println!("{}", o.line());
        failed += usize::from(!o.passed());
    }
    println!("{} check(s), {failed} failed, {:.1} s", outcomes.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::new(10, format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn cmd_cross_validate(config: TrainConfig, manifest_out: Option<&Path>) -> CliResult {
    let data = require_data(&config)?;
    let out = require_out(&config)?;
    let records = dataio::scan_dataset(&data)?;
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let mut m = RunManifest::new("cross-validate").with_config(&config);
    m.dataset_hash = Some(dataio::dataset_hash(&records)?);
    emit_manifest(&m, Some(&out.join("manifest.txt")), manifest_out)?;
    let start = Instant::now();
    let cv = train::cross_validate::<f32>(&config, &records)?;
    print!("{}", cv.report.to_table());
    println!("{} folds in {:.1} s; reports under {}", cv.plan.k, start.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn cmd_synth(out: &Path, cfg: SyntheticConfig, manifest_out: Option<&Path>) -> CliResult {
    let records = dataio::write_synthetic_dataset(out, &cfg)?;
    let counts = dataio::class_counts(&records);
    let summary: Vec<String> = counts.iter().map(|(c, n)| format!("{c} {n}")).collect();
    println!("{} samples ({}) written to {}", records.len(), summary.join(", "), out.display());
    let m = RunManifest::new("synth")
        .arg("out", path_arg(out))
        .arg("benign", cfg.benign)
        .arg("malignant", cfg.malignant)
        .arg("normal", cfg.normal)
        .arg("size", cfg.height)
        .arg("speckle", cfg.speckle)
        .arg("seed", cfg.seed)
        .arg("bright-lesions", bool_arg(cfg.bright_lesions));
    emit_manifest(&m, Some(&out.join("manifest.txt")), manifest_out)
}

/// Command line equivalent to a manifest: recorded flags, then every
/// configuration key as `--set`.
fn replay_argv(m: &RunManifest) -> Vec<String> {
    let mut argv = vec!["cresunet".to_string(), m.command.clone()];
    for (k, v) in &m.args {
        match v.as_str() {
            "true" => argv.push(format!("--{k}")),
            "false" => {}
            _ => {
                argv.push(format!("--{k}"));
                argv.push(v.clone());
            }
        }
    }
    if let Some(c) = &m.config {
        for (k, v) in c.to_pairs() {
            argv.push("--set".into());
            argv.push(format!("{k}={v}"));
        }
    }
    argv
}

fn cmd_rerun(path: &Path) -> CliResult {
    let m = RunManifest::load(path)?;
    if m.command == "rerun" {
        return Err(Failure::new(4, "a rerun manifest cannot be replayed"));
    }
    if m.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest written by version {}, replaying with {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    if let (Some(expected), Some(dir)) = (&m.dataset_hash, m.config.as_ref().and_then(|c| c.data_dir.clone())) {
        let found = dataio::dataset_hash(&dataio::scan_dataset(&dir)?)?;
        if &found != expected {
            return Err(Failure::new(7, format!("dataset under {} changed since the manifest was written", dir.display())));
        }
    }
    let argv = replay_argv(&m);
    log::info!("replaying: {}", argv.join(" "));
    let cli = Cli::try_parse_from(&argv).map_err(|e| Failure::new(4, format!("manifest does not form a valid command: {e}")))?;
    run(cli)
}

fn run(cli: Cli) -> CliResult {
    let mo = cli.manifest_out.as_deref();
    match cli.command {
        Command::Split { data, k, seed, out, no_stratify } => cmd_split(&data, k, seed, &out, no_stratify, mo),
        Command::Train { cfg, fold, data, out } => {
            let mut config = cfg.resolve()?;
            set_data_and_out(&mut config, &data, &out);
            cmd_train(config, fold, mo)
        }
        Command::Eval { checkpoint, fold, cfg, data, audit, report } => {
            cmd_eval(&checkpoint, fold, &cfg, &data, &audit, &report, mo)
        }
        Command::Predict { checkpoint, image, out, prob, threshold, denoise } => {
            cmd_predict(&checkpoint, &image, &out, &prob, threshold, denoise, mo)
        }
        Command::Denoise { input, out, h, patch, window, sigma } => {
            cmd_denoise(&input, &out, NlmParams { h, patch, window, sigma }, mo)
        }
        Command::Inspect { cfg } => cmd_inspect(cfg.resolve()?, mo),
        Command::Gradcheck { op, cases, seed, inject_fault } => cmd_gradcheck(&op, cases, seed, &inject_fault, mo),
        Command::CrossValidate { cfg, data, out } => {
            let mut config = cfg.resolve()?;
            set_data_and_out(&mut config, &data, &out);
            cmd_cross_validate(config, mo)
        }
        Command::Synth { out, benign, malignant, normal, size, speckle, seed, bright_lesions } => {
            let cfg = SyntheticConfig { benign, malignant, normal, height: size, width: size, speckle, bright_lesions, seed };
            cmd_synth(&out, cfg, mo)
        }
        Command::Rerun { manifest } => cmd_rerun(&manifest),
    }
}

fn init_threads() -> CliResult {
    let Ok(raw) = std::env::var("CRESUNET_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::new(4, format!("CRESUNET_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(1, format!("cannot start {n} worker threads: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
