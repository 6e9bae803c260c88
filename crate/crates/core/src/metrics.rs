//! Segmentation metrics and their aggregation across folds.
//!
//! Degenerate denominators follow the empty-mask convention: when both the
//! prediction and the ground truth are empty, DSC, IoU, precision and recall
//! are 1; when exactly one is empty they are 0.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::autodiff::{Tape, Var};
use crate::dataio::SampleClass;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SMOOTH: f64 = 1.0;

/// Soft dice loss per image, averaged over the batch.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
    tape.dice_loss(pred, target, smooth)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    num as f64 / den as f64
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            ratio(2 * self.tp, den)
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            ratio(self.tp, den)
        }
    }

    pub fn acc(&self) -> f64 {
        if self.total() == 0 {
            1.0
        } else {
            ratio(self.tp + self.tn, self.total())
        }
    }

    pub fn precision(&self) -> f64 {
        match (self.tp + self.fp, self.fn_) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (den, _) => ratio(self.tp, den),
        }
    }

    pub fn recall(&self) -> f64 {
        match (self.tp + self.fn_, self.fp) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (den, _) => ratio(self.tp, den),
        }
    }

    /// Both masks empty.
    pub fn is_empty_pair(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

fn as_bit<T: Scalar>(v: T, what: &str, i: usize) -> Result<bool> {
    if v == T::zero() {
        Ok(false)
    } else if v == T::one() {
        Ok(true)
    } else {
        Err(Error::InvalidArgument(format!("{what} is not binary at index {i}: {}", v.as_f64())))
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape { op: "metrics", detail: format!("prediction has {a} pixels, target {b}") });
    }
    Ok(())
}

/// Pixel counts of two binary masks.
pub fn confusion<T: Scalar>(pred: &[T], target: &[T]) -> Result<ConfusionCounts> {
    check_len(pred.len(), target.len())?;
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        match (as_bit(p, "prediction", i)?, as_bit(t, "target", i)?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Probabilities strictly above `threshold` become 1.
pub fn binarize<T: Scalar>(prob: &[T], threshold: f64) -> Vec<T> {
    prob.iter().map(|&p| if p.as_f64() > threshold { T::one() } else { T::zero() }).collect()
}

/// ROC AUC as the Mann–Whitney statistic with midranks for ties. `None`
/// when the target holds a single class.
pub fn auc<T: Scalar>(scores: &[T], target: &[T]) -> Result<Option<f64>> {
    check_len(scores.len(), target.len())?;
    let labels: Vec<bool> = target.iter().enumerate().map(|(i, &t)| as_bit(t, "target", i)).collect::<Result<_>>()?;
    let scores: Vec<f64> = scores.iter().map(|s| s.as_f64()).collect();
    Ok(auc_f64(&scores, &labels))
}

pub fn auc_f64(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Rank sums doubled so midranks stay integral.
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u128;
        pos_rank2 += midrank2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = pos_rank2 - p * (p + 1);
    Some(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKind {
    Dsc,
    Iou,
    Acc,
    Auc,
    Precision,
    Recall,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] =
        [MetricKind::Dsc, MetricKind::Iou, MetricKind::Acc, MetricKind::Auc, MetricKind::Precision, MetricKind::Recall];
    /// Columns of the per-class breakdown.
    pub const PER_CLASS: [MetricKind; 4] = [MetricKind::Dsc, MetricKind::Iou, MetricKind::Precision, MetricKind::Recall];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Dsc => "DSC",
            MetricKind::Iou => "IoU",
            MetricKind::Acc => "ACC",
            MetricKind::Auc => "AUC",
            MetricKind::Precision => "Precision",
            MetricKind::Recall => "Recall",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub class: Option<SampleClass>,
    pub fold: usize,
    pub counts: ConfusionCounts,
    pub dsc: f64,
    pub iou: f64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

impl ImageMetrics {
    pub fn from_counts(id: impl Into<String>, class: Option<SampleClass>, fold: usize, counts: ConfusionCounts, auc: Option<f64>) -> Self {
        ImageMetrics {
            id: id.into(),
            class,
            fold,
            counts,
            dsc: counts.dsc(),
            iou: counts.iou(),
            acc: counts.acc(),
            auc,
            precision: counts.precision(),
            recall: counts.recall(),
        }
    }

    /// Metrics of one probability map against its binary target.
    pub fn compute<T: Scalar>(
        id: impl Into<String>,
        class: Option<SampleClass>,
        fold: usize,
        prob: &[T],
        target: &[T],
        threshold: f64,
    ) -> Result<Self> {
        let counts = confusion(&binarize(prob, threshold), target)?;
        let auc = auc(prob, target)?;
        Ok(Self::from_counts(id, class, fold, counts, auc))
    }

    pub fn value(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Dsc => Some(self.dsc),
            MetricKind::Iou => Some(self.iou),
            MetricKind::Acc => Some(self.acc),
            MetricKind::Auc => self.auc,
            MetricKind::Precision => Some(self.precision),
            MetricKind::Recall => Some(self.recall),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AucPooling {
    /// AUC per image, then averaged.
    PerImage,
    /// One AUC over all pixels of a fold.
    Pooled,
}

impl AucPooling {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per-image" => Some(AucPooling::PerImage),
            "pooled" => Some(AucPooling::Pooled),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AucPooling::PerImage => "per-image",
            AucPooling::Pooled => "pooled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Stat { mean, std, n })
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub fold: usize,
    pub images: usize,
    /// Means over images; `None` when no image defines the metric.
    pub means: BTreeMap<MetricKind, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub folds: Vec<FoldSummary>,
    /// Cross-fold mean and sample std of the fold means.
    pub summary: BTreeMap<MetricKind, Option<Stat>>,
    /// Benign and malignant rows; normals only count in the global figures.
    pub per_class: BTreeMap<SampleClass, BTreeMap<MetricKind, Option<Stat>>>,
    pub auc_pooling: AucPooling,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    Stat::of(&v).map(|s| s.mean)
}

/// Per-fold means, then mean and sample std across folds. `pooled_auc`
/// replaces the per-image AUC mean of the listed folds.
pub fn aggregate(images: Vec<ImageMetrics>, auc_pooling: AucPooling, pooled_auc: &BTreeMap<usize, Option<f64>>) -> MetricReport {
    let mut by_fold: BTreeMap<usize, Vec<&ImageMetrics>> = BTreeMap::new();
    for m in &images {
        by_fold.entry(m.fold).or_default().push(m);
    }
    let folds: Vec<FoldSummary> = by_fold
        .iter()
        .map(|(&fold, ms)| {
            let mut means: BTreeMap<MetricKind, Option<f64>> =
                MetricKind::ALL.iter().map(|&k| (k, mean_of(ms.iter().map(|m| m.value(k))))).collect();
            if auc_pooling == AucPooling::Pooled {
                if let Some(a) = pooled_auc.get(&fold) {
                    means.insert(MetricKind::Auc, *a);
                }
            }
            FoldSummary { fold, images: ms.len(), means }
        })
        .collect();
    let summary = MetricKind::ALL
        .iter()
        .map(|&k| {
            let v: Vec<f64> = folds.iter().filter_map(|f| f.means[&k]).collect();
            (k, Stat::of(&v))
        })
        .collect();
    let mut per_class = BTreeMap::new();
    for class in [SampleClass::Benign, SampleClass::Malignant] {
        let row = MetricKind::PER_CLASS
            .iter()
            .map(|&k| {
                let fold_means: Vec<f64> = by_fold
                    .values()
                    .filter_map(|ms| mean_of(ms.iter().filter(|m| m.class == Some(class)).map(|m| m.value(k))))
                    .collect();
                (k, Stat::of(&fold_means))
            })
            .collect();
        per_class.insert(class, row);
    }
    MetricReport { images, folds, summary, per_class, auc_pooling }
}

/// Collects per-image metrics and, for pooled AUC, the pixel scores.
pub struct Evaluator {
    threshold: f64,
    pooling: AucPooling,
    images: Vec<ImageMetrics>,
    pooled: BTreeMap<usize, (Vec<f64>, Vec<bool>)>,
}

impl Evaluator {
    pub fn new(threshold: f64, pooling: AucPooling) -> Self {
        Evaluator { threshold, pooling, images: Vec::new(), pooled: BTreeMap::new() }
    }

    pub fn add<T: Scalar>(&mut self, id: &str, class: Option<SampleClass>, fold: usize, prob: &[T], target: &[T]) -> Result<&ImageMetrics> {
        let m = ImageMetrics::compute(id, class, fold, prob, target, self.threshold)?;
        if self.pooling == AucPooling::Pooled {
            let (s, l) = self.pooled.entry(fold).or_default();
            s.extend(prob.iter().map(|p| p.as_f64()));
            l.extend(target.iter().map(|&t| t == T::one()));
        }
        self.images.push(m);
        Ok(self.images.last().expect("just pushed"))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn finish(self) -> MetricReport {
        let pooled = self.pooled.iter().map(|(&f, (s, l))| (f, auc_f64(s, l))).collect();
        aggregate(self.images, self.pooling, &pooled)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

fn fmt_csv(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn summary_value(&self, kind: MetricKind) -> Option<Stat> {
        self.summary.get(&kind).copied().flatten()
    }

    /// Plain-text table, values in percent: one row per fold, a mean ± std
    /// row, then the per-class breakdown.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}{:>7}", "fold", "images");
        for k in MetricKind::ALL {
            let _ = write!(s, "{:>16}", k.name());
        }
        s.push('\n');
        for f in &self.folds {
            let _ = write!(s, "{:<10}{:>7}", f.fold, f.images);
            for k in MetricKind::ALL {
                let _ = write!(s, "{:>16}", fmt_opt(f.means[&k]));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<10}{:>7}", "mean±std", self.images.len());
        for k in MetricKind::ALL {
            let cell = self.summary_value(k).map(|st| st.to_string()).unwrap_or_else(|| "n/a".into());
            let _ = write!(s, "{cell:>16}");
        }
        s.push_str("\n\n");
        let _ = write!(s, "{:<10}", "class");
        for k in MetricKind::PER_CLASS {
            let _ = write!(s, "{:>16}", k.name());
        }
        s.push('\n');
        for (class, row) in &self.per_class {
            let _ = write!(s, "{:<10}", class.name());
            for k in MetricKind::PER_CLASS {
                let cell = row[&k].map(|st| st.to_string()).unwrap_or_else(|| "n/a".into());
                let _ = write!(s, "{cell:>16}");
            }
            s.push('\n');
        }
        let empty = self.images.iter().filter(|m| m.counts.is_empty_pair()).count();
        let no_auc = self.images.iter().filter(|m| m.auc.is_none()).count();
        let _ = writeln!(
            s,
            "\n{empty} image(s) with empty prediction and empty target scored 1.0; {no_auc} image(s) without a defined AUC; AUC {}",
            self.auc_pooling.name()
        );
        s
    }

    /// One comma-separated row per image, values as fractions.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,class,fold,dsc,iou,acc,auc,precision,recall\n");
        for m in &self.images {
            let class = m.class.map(|c| c.name()).unwrap_or("");
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6}",
                m.id, class, m.fold, m.dsc, m.iou, m.acc, fmt_csv(m.auc), m.precision, m.recall
            );
        }
        s
    }

    /// Fold rows followed by `mean` and `std` rows.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("fold,images,dsc,iou,acc,auc,precision,recall\n");
        for f in &self.folds {
            let vals: Vec<String> = MetricKind::ALL.iter().map(|k| fmt_csv(f.means[k])).collect();
            let _ = writeln!(s, "{},{},{}", f.fold, f.images, vals.join(","));
        }
        for (label, pick) in [("mean", true), ("std", false)] {
            let vals: Vec<String> = MetricKind::ALL
                .iter()
                .map(|&k| fmt_csv(self.summary_value(k).map(|st| if pick { st.mean } else { st.std })))
                .collect();
            let _ = writeln!(s, "{label},{},{}", self.images.len(), vals.join(","));
        }
        s
    }
}
