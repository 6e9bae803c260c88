//! Run configuration: a flat `key=value` text format with dotted sections,
//! e.g. `train.epochs=200`. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{AucPooling, DEFAULT_SMOOTH, DEFAULT_THRESHOLD};
use crate::model::{parse_bool, parse_num, ModelSpec};
use crate::preprocess::{AugmentSet, NlmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Heavy-ball momentum for SGD; ignored by Adam.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7, momentum: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Share of the training folds held out for model selection.
    pub validation_fraction: f64,
    /// Also save a checkpoint every this many epochs; 0 keeps only the best.
    pub checkpoint_every: usize,
    pub data_dir: Option<PathBuf>,
    /// Existing fold plan to reuse; a fresh one is drawn when absent.
    pub fold_plan: Option<PathBuf>,
    pub folds: usize,
    pub stratified: bool,
    pub augment: AugmentSet,
    pub nlm: NlmParams,
    /// NLM-denoise training images before augmentation. Ignored by
    /// `denoised+rotated`, which keeps raw and denoised copies.
    pub denoise_train: bool,
    pub denoise_test: bool,
    pub threshold: f64,
    pub auc_pooling: AucPooling,
    pub smooth: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Desk-scale profile: 64×64 inputs, 20 epochs.
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::default().with_input_size(64, 64),
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            seed: 42,
            validation_fraction: 0.2,
            checkpoint_every: 0,
            data_dir: None,
            fold_plan: None,
            folds: 5,
            stratified: true,
            augment: AugmentSet::Rotated,
            nlm: NlmParams::default(),
            denoise_train: true,
            denoise_test: false,
            threshold: DEFAULT_THRESHOLD,
            auc_pooling: AucPooling::PerImage,
            smooth: DEFAULT_SMOOTH,
            out_dir: None,
        }
    }
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()))
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    parse_bool(v).ok_or_else(|| Error::Config(format!("{key}: expected a boolean, got `{v}`")))
}

impl TrainConfig {
    /// Full-scale profile: 256×256 inputs, 200 epochs.
    pub fn full() -> Self {
        TrainConfig { model: ModelSpec::default(), epochs: 200, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("train.validation_fraction {} outside [0, 0.5]", self.validation_fraction)));
        }
        if self.folds < 2 {
            return Err(Error::Config("data.folds must be at least 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.eps <= 0.0 {
            return Err(Error::Config("optim.lr and optim.eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::Config("optim.beta1 and optim.beta2 must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::Config("optim.momentum must be in [0, 1)".into()));
        }
        if self.smooth < 0.0 {
            return Err(Error::Config("loss.smooth must be non-negative".into()));
        }
        let size = self.model.input_height.min(self.model.input_width);
        self.nlm.validate(size, size).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let v = value.trim();
        match key {
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.validation_fraction" => self.validation_fraction = parse_num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "optim.kind" => {
                self.optimizer.kind =
                    OptimizerKind::parse(v).ok_or_else(|| Error::Config(format!("{key}: expected adam or sgd, got `{v}`")))?
            }
            "optim.lr" => self.optimizer.lr = parse_num(key, v)?,
            "optim.beta1" => self.optimizer.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.optimizer.beta2 = parse_num(key, v)?,
            "optim.eps" => self.optimizer.eps = parse_num(key, v)?,
            "optim.momentum" => self.optimizer.momentum = parse_num(key, v)?,
            "data.dir" => self.data_dir = path_or_none(v),
            "data.fold_plan" => self.fold_plan = path_or_none(v),
            "data.folds" => self.folds = parse_num(key, v)?,
            "data.stratified" => self.stratified = bool_value(key, v)?,
            "data.denoise" => self.denoise_train = bool_value(key, v)?,
            "data.augment" => {
                self.augment = AugmentSet::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: expected none, rotated or denoised+rotated, got `{v}`")))?
            }
            "nlm.h" => self.nlm.h = parse_num(key, v)?,
            "nlm.patch" => self.nlm.patch = parse_num(key, v)?,
            "nlm.window" => self.nlm.window = parse_num(key, v)?,
            "nlm.sigma" => self.nlm.sigma = parse_num(key, v)?,
            "eval.denoise_test" => self.denoise_test = bool_value(key, v)?,
            "eval.threshold" => self.threshold = parse_num(key, v)?,
            "eval.auc_pooling" => {
                self.auc_pooling = AucPooling::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: expected per-image or pooled, got `{v}`")))?
            }
            "loss.smooth" => self.smooth = parse_num(key, v)?,
            "out.dir" => self.out_dir = path_or_none(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every effective value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let o = &self.optimizer;
        let mut pairs: Vec<(String, String)> = vec![
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.validation_fraction".into(), self.validation_fraction.to_string()),
            ("train.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("optim.kind".into(), o.kind.name().into()),
            ("optim.lr".into(), o.lr.to_string()),
            ("optim.beta1".into(), o.beta1.to_string()),
            ("optim.beta2".into(), o.beta2.to_string()),
            ("optim.eps".into(), o.eps.to_string()),
            ("optim.momentum".into(), o.momentum.to_string()),
            ("data.dir".into(), path(&self.data_dir)),
            ("data.fold_plan".into(), path(&self.fold_plan)),
            ("data.folds".into(), self.folds.to_string()),
            ("data.stratified".into(), self.stratified.to_string()),
            ("data.denoise".into(), self.denoise_train.to_string()),
            ("data.augment".into(), self.augment.name().into()),
            ("nlm.h".into(), self.nlm.h.to_string()),
            ("nlm.patch".into(), self.nlm.patch.to_string()),
            ("nlm.window".into(), self.nlm.window.to_string()),
            ("nlm.sigma".into(), self.nlm.sigma.to_string()),
            ("eval.denoise_test".into(), self.denoise_test.to_string()),
            ("eval.threshold".into(), self.threshold.to_string()),
            ("eval.auc_pooling".into(), self.auc_pooling.name().into()),
            ("loss.smooth".into(), self.smooth.to_string()),
            ("out.dir".into(), path(&self.out_dir)),
        ];
        pairs.extend(self.model.to_pairs());
        pairs
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `text` on top of `self`, then validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_pairs(text)? {
            self.set(&key, &value)?;
        }
        self.validate()
    }

    pub fn load(path: &Path, base: TrainConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = base;
        config.apply_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(config)
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = split_pair(o.as_ref(), 0)?;
            self.set(&k, &v)?;
        }
        self.validate()
    }
}

/// Everything needed to repeat a command: its name, the effective flag
/// values, the full configuration and, where data was read, the dataset
/// hash. Serialized as `key=value` lines (`run.*`, `arg.*`, then config).
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub fold: Option<usize>,
    pub dataset_hash: Option<String>,
    pub args: BTreeMap<String, String>,
    /// Present for commands driven by a training configuration.
    pub config: Option<TrainConfig>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.into(),
            fold: None,
            dataset_hash: None,
            args: BTreeMap::new(),
            config: None,
        }
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        self.config = Some(config.clone());
        self
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# run manifest; replay with `cresunet rerun --manifest <this file>`\n");
        s.push_str(&format!("run.version={}\nrun.command={}\n", self.version, self.command));
        if let Some(f) = self.fold {
            s.push_str(&format!("run.fold={f}\n"));
        }
        if let Some(h) = &self.dataset_hash {
            s.push_str(&format!("run.dataset_sha256={h}\n"));
        }
        for (k, v) in &self.args {
            s.push_str(&format!("arg.{k}={v}\n"));
        }
        if let Some(c) = &self.config {
            s.push_str(&c.to_text());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        let mut has_config = false;
        let (mut version, mut command, mut fold, mut hash) = (None, None, None, None);
        let mut args = BTreeMap::new();
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "run.version" => version = Some(v),
                "run.command" => command = Some(v),
                "run.fold" => fold = Some(parse_num(&k, &v)?),
                "run.dataset_sha256" => hash = Some(v),
                _ => match k.strip_prefix("arg.") {
                    Some(name) => {
                        args.insert(name.to_string(), v);
                    }
                    None => {
                        config.set(&k, &v)?;
                        has_config = true;
                    }
                },
            }
        }
        if has_config {
            config.validate()?;
        }
        Ok(RunManifest {
            version: version.ok_or_else(|| Error::Config("manifest lacks run.version".into()))?,
            command: command.ok_or_else(|| Error::Config("manifest lacks run.command".into()))?,
            fold,
            dataset_hash: hash,
            args,
            config: has_config.then_some(config),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn split_pair(line: &str, lineno: usize) -> Result<(String, String)> {
    let (k, v) = line.split_once('=').ok_or_else(|| {
        let at = if lineno > 0 { format!("line {lineno}: ") } else { String::new() };
        Error::Config(format!("{at}expected key=value, got `{line}`"))
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_pair(line, i + 1)?;
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let mut c = TrainConfig::default();
        c.epochs = 3;
        let mut m = RunManifest::new("train").with_config(&c).arg("checkpoint", "a b.crun");
        m.fold = Some(2);
        m.dataset_hash = Some("abc".into());
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
        assert!(RunManifest::parse("run.command=x\n").is_err());
        let bare = RunManifest::new("denoise").arg("h", 0.1);
        assert_eq!(RunManifest::parse(&bare.to_text()).unwrap(), bare);
        assert!(RunManifest::parse("run.version=1\nrun.command=x\nbogus.key=1\n").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.epochs = 7;
        c.optimizer.kind = OptimizerKind::Sgd;
        c.data_dir = Some(PathBuf::from("/data/x"));
        c.augment = AugmentSet::DenoisedAndRotated;
        c.model.dropout = 0.25;
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.apply_text("train.epoch=3"), Err(Error::Config(_))));
        assert!(c.apply_text("train.epochs=0").is_err());
        let mut c = TrainConfig::default();
        assert!(c.apply_text("train.validation_fraction=0.6").is_err());
        assert!(parse_pairs("a=1\na=2").is_err());
        assert!(parse_pairs("novalue").is_err());
        assert!(TrainConfig::default().apply_text("model.input_size=100").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = TrainConfig::default();
        c.apply_text("# desk run\n\ntrain.epochs = 3\nmodel.input_size=32\n").unwrap();
        assert_eq!((c.epochs, c.model.input_height), (3, 32));
        c.apply_overrides(&["optim.lr=0.01"]).unwrap();
        assert_eq!(c.optimizer.lr, 0.01);
        assert!(c.apply_overrides(&["bogus"]).is_err());
    }

    #[test]
    fn profiles() {
        let desk = TrainConfig::default();
        let full = TrainConfig::full();
        assert_eq!((desk.model.input_height, desk.epochs), (64, 20));
        assert_eq!((full.model.input_height, full.epochs), (256, 200));
        desk.validate().unwrap();
        full.validate().unwrap();
    }
}
