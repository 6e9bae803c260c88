//! Dataset ingestion for the class-per-directory ultrasound layout, fold
//! planning and mini-batch iteration.
//!
//! Expected layout:
//!
//! ```text
//! root/benign/<name>.png  root/benign/<name>_mask.png  [root/benign/<name>_mask_1.png ...]
//! root/malignant/...      root/normal/...
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::{add_speckle, read_mask_png, read_png, write_png, GrayImage, LabeledImage, NlmParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleClass {
    Benign,
    Malignant,
    Normal,
}

impl SampleClass {
    pub const ALL: [SampleClass; 3] = [SampleClass::Benign, SampleClass::Malignant, SampleClass::Normal];

    pub fn name(self) -> &'static str {
        match self {
            SampleClass::Benign => "benign",
            SampleClass::Malignant => "malignant",
            SampleClass::Normal => "normal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SampleClass::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for SampleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    /// `class/name`, unique within a dataset.
    pub id: String,
    pub class: SampleClass,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
}

/// Orders `"x (2)"` before `"x (10)"`.
fn natural_key(s: &str) -> Vec<(bool, u64, String)> {
    let mut key = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        let digit = c.is_ascii_digit();
        let mut run = String::new();
        while let Some(&d) = chars.peek() {
            if d.is_ascii_digit() != digit {
                break;
            }
            run.push(d);
            chars.next();
        }
        let num = if digit { run.parse().unwrap_or(u64::MAX) } else { 0 };
        key.push((digit, num, run));
    }
    key
}

fn check_png(path: &Path) -> Result<()> {
    let mut sig = [0u8; 8];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut sig).map_err(|e| Error::io(path, e))?;
    if n < sig.len() || sig != PNG_SIGNATURE {
        return Err(Error::Decode { path: path.to_path_buf(), detail: "not a PNG file".into() });
    }
    Ok(())
}

/// Splits `stem` into `(base, mask index)` when it names a mask file.
fn mask_base(stem: &str) -> Option<(&str, usize)> {
    if let Some(base) = stem.strip_suffix("_mask") {
        return Some((base, 0));
    }
    let (rest, idx) = stem.rsplit_once('_')?;
    let base = rest.strip_suffix("_mask")?;
    idx.parse::<usize>().ok().filter(|&i| i >= 1).map(|i| (base, i))
}

/// Lists samples under `root`. Records are sorted by class, then by name in
/// natural order. Directories other than the three class names are skipped.
pub fn scan_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match SampleClass::parse(&name) {
            Some(class) => class_dirs.push((class, path)),
            None => log::warn!("skipping unrecognised directory {}", path.display()),
        }
    }
    class_dirs.sort();

    let mut records = Vec::new();
    for (class, dir) in class_dirs {
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut masks: HashMap<String, Vec<(usize, PathBuf)>> = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if !path.is_file() || !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                continue;
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            match mask_base(&stem) {
                Some((base, idx)) => masks.entry(base.to_string()).or_default().push((idx, path)),
                None => {
                    images.insert(stem, path);
                }
            }
        }
        let mut missing = Vec::new();
        let mut class_records = Vec::new();
        for (name, image) in images {
            let Some(mut m) = masks.remove(&name) else {
                missing.push(image.display().to_string());
                continue;
            };
            m.sort();
            class_records.push(SampleRecord {
                id: format!("{}/{}", class.name(), name),
                class,
                image,
                masks: m.into_iter().map(|(_, p)| p).collect(),
            });
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("image(s) without a mask: {}", missing.join(", "))));
        }
        for orphan in masks.keys() {
            log::warn!("mask(s) for `{orphan}` in {} have no image", dir.display());
        }
        class_records.sort_by_key(|r| natural_key(&r.id));
        records.extend(class_records);
    }
    for r in &records {
        check_png(&r.image)?;
        for m in &r.masks {
            check_png(m)?;
        }
    }
    if records.is_empty() {
        log::warn!("no samples found under {}", root.display());
    } else {
        let counts = class_counts(&records);
        let summary: Vec<String> = counts.iter().map(|(c, n)| format!("{c} {n}")).collect();
        log::info!("scanned {} samples: {}", records.len(), summary.join(", "));
    }
    Ok(records)
}

pub fn class_counts(records: &[SampleRecord]) -> BTreeMap<SampleClass, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.class).or_insert(0) += 1;
    }
    counts
}

/// Pixelwise union of binary masks.
pub fn merge_masks(masks: &[GrayImage]) -> Result<GrayImage> {
    let (first, rest) = masks.split_first().ok_or_else(|| Error::InvalidArgument("no masks to merge".into()))?;
    rest.iter().try_fold(first.clone(), |acc, m| acc.union(m))
}

/// Assignment of sample ids to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    /// Test ids of each fold, in assignment order.
    pub folds: Vec<Vec<String>>,
    pub classes: BTreeMap<String, SampleClass>,
}

/// Deals shuffled records round-robin into `k` folds. With `stratified`,
/// records are shuffled within each class and the deal continues across
/// classes, so per-class and total fold sizes each differ by at most one.
pub fn kfold_split(records: &[SampleRecord], k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold split needs k ≥ 2, got {k}")));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.id.as_str())) {
        return Err(Error::Data(format!("duplicate sample id `{}`", dup.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<&SampleRecord>> = if stratified {
        let mut by_class: BTreeMap<SampleClass, Vec<&SampleRecord>> = BTreeMap::new();
        for r in records {
            by_class.entry(r.class).or_default().push(r);
        }
        for (class, members) in &by_class {
            if members.len() < k {
                return Err(Error::Data(format!("class {class} has {} samples, fewer than k = {k}", members.len())));
            }
        }
        by_class.into_values().collect()
    } else {
        if records.len() < k {
            return Err(Error::Data(format!("{} samples cannot fill {k} folds", records.len())));
        }
        vec![records.iter().collect()]
    };
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        for r in group {
            folds[next % k].push(r.id.clone());
            next += 1;
        }
    }
    let classes = records.iter().map(|r| (r.id.clone(), r.class)).collect();
    Ok(FoldPlan { k, seed, stratified, folds, classes })
}

impl FoldPlan {
    pub fn test_ids(&self, fold: usize) -> Result<&[String]> {
        self.folds
            .get(fold)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} out of range 0..{}", self.k)))
    }

    /// Ids of every other fold, in fold order.
    pub fn train_ids(&self, fold: usize) -> Result<Vec<String>> {
        self.test_ids(fold)?;
        Ok(self.folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.iter().cloned()).collect())
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|x| x == id))
    }

    pub fn len(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of each class in each fold.
    pub fn class_table(&self) -> Vec<BTreeMap<SampleClass, usize>> {
        self.folds
            .iter()
            .map(|f| {
                let mut m = BTreeMap::new();
                for id in f {
                    if let Some(c) = self.classes.get(id) {
                        *m.entry(*c).or_insert(0) += 1;
                    }
                }
                m
            })
            .collect()
    }

    /// Checks that the plan covers exactly the ids in `records`.
    pub fn check_against(&self, records: &[SampleRecord]) -> Result<()> {
        let planned: HashSet<&str> = self.folds.iter().flatten().map(String::as_str).collect();
        let present: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        if let Some(id) = present.difference(&planned).next() {
            return Err(Error::Data(format!("sample `{id}` is not in the fold plan")));
        }
        if let Some(id) = planned.difference(&present).next() {
            return Err(Error::Data(format!("fold plan lists `{id}`, which is not in the dataset")));
        }
        Ok(())
    }

    /// Tab-separated `id class fold` rows after a `#` header line.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# k={} seed={} stratified={}\nid\tclass\tfold\n", self.k, self.seed, self.stratified);
        for (f, ids) in self.folds.iter().enumerate() {
            for id in ids {
                let class = self.classes.get(id).map(|c| c.name()).unwrap_or("?");
                s.push_str(&format!("{id}\t{class}\t{f}\n"));
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("fold plan: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut meta: HashMap<&str, &str> = HashMap::new();
        for kv in header.strip_prefix('#').ok_or_else(|| bad("missing `#` header".into()))?.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad header field `{kv}`")))?;
            meta.insert(k, v);
        }
        let get = |k: &str| meta.get(k).copied().ok_or_else(|| bad(format!("header lacks `{k}`")));
        let k: usize = get("k")?.parse().map_err(|_| bad("bad k".into()))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let stratified: bool = get("stratified")?.parse().map_err(|_| bad("bad stratified flag".into()))?;
        if k < 2 {
            return Err(bad(format!("k = {k}")));
        }
        let mut folds = vec![Vec::new(); k];
        let mut classes = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() || (n == 0 && line.starts_with("id\t")) {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, class, fold] = cols[..] else {
                return Err(bad(format!("line {}: expected 3 tab-separated columns", n + 2)));
            };
            let class = SampleClass::parse(class).ok_or_else(|| bad(format!("unknown class `{class}`")))?;
            let fold: usize = fold.parse().ok().filter(|&f| f < k).ok_or_else(|| bad(format!("bad fold `{fold}`")))?;
            if classes.insert(id.to_string(), class).is_some() {
                return Err(bad(format!("duplicate id `{id}`")));
            }
            folds[fold].push(id.to_string());
        }
        Ok(FoldPlan { k, seed, stratified, folds, classes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Holds out `fraction` of `train_ids` (rounded, at least one when
/// possible) for validation. Returns `(train, validation)`.
pub fn validation_split(train_ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (fraction * ids.len() as f64).round() as usize;
    if fraction > 0.0 && n_val == 0 && ids.len() > 1 {
        n_val = 1;
    }
    let train = ids.split_off(n_val);
    Ok((train, ids))
}

/// Decodes a record: image and merged mask, resized to `height × width`,
/// optionally despeckled after resizing.
pub fn load_sample(record: &SampleRecord, height: usize, width: usize, nlm: Option<&NlmParams>) -> Result<LabeledImage> {
    let image = read_png(&record.image)?;
    let masks: Vec<GrayImage> = record.masks.iter().map(|p| read_mask_png(p)).collect::<Result<_>>()?;
    let mask = merge_masks(&masks)?;
    let sample = LabeledImage::new(record.id.clone(), image, mask)?.resized(height, width)?;
    match nlm {
        Some(p) => sample.denoised(p),
        None => Ok(sample),
    }
}

pub fn load_samples(
    records: &[SampleRecord],
    height: usize,
    width: usize,
    nlm: Option<&NlmParams>,
) -> Result<Vec<LabeledImage>> {
    records.par_iter().map(|r| load_sample(r, height, width, nlm)).collect()
}

/// Selects the records with the given ids, in the order of `ids`.
pub fn select<'a>(records: &'a [SampleRecord], ids: &[String]) -> Result<Vec<&'a SampleRecord>> {
    let index: HashMap<&str, &SampleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::Data(format!("unknown sample id `{id}`"))))
        .collect()
}

/// Mixes an epoch number into a base seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `N×1×H×W`.
    pub images: Tensor<T>,
    /// `N×1×H×W`, binary.
    pub masks: Tensor<T>,
}

/// Visiting order of `n` samples: identity without a seed, otherwise a
/// seeded permutation.
pub fn batch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Mini-batches over `samples`; the last batch may be short.
pub fn batches<'a, T: Scalar>(
    samples: &'a [LabeledImage],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Batch<T>> + 'a> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let order = batch_order(samples.len(), shuffle_seed);
    Ok((0..samples.len().div_ceil(batch_size)).map(move |b| {
        let idx = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        let chosen: Vec<&LabeledImage> = idx.iter().map(|&i| &samples[i]).collect();
        to_batch(&chosen)
    }))
}

/// Stacks samples of equal size into a batch.
pub fn to_batch<T: Scalar>(samples: &[&LabeledImage]) -> Batch<T> {
    let (h, w) = samples.first().map(|s| (s.image.height(), s.image.width())).unwrap_or((0, 0));
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        assert_eq!((s.image.height(), s.image.width()), (h, w), "batch samples must share one size");
        images.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        masks.extend(s.mask.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let shape = [samples.len(), 1, h, w];
    Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::from_vec(shape, images).expect("sizes checked"),
        masks: Tensor::from_vec(shape, masks).expect("sizes checked"),
    }
}

/// SHA-256 over sample ids and the bytes of every image and mask file.
pub fn dataset_hash(records: &[SampleRecord]) -> Result<String> {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.id.as_bytes());
        hasher.update([0]);
        for path in std::iter::once(&r.image).chain(&r.masks) {
            hasher.update(fs::read(path).map_err(|e| Error::io(path, e))?);
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub benign: usize,
    pub malignant: usize,
    pub normal: usize,
    pub height: usize,
    pub width: usize,
    pub speckle: f64,
    /// Lesions brighter than the background instead of darker.
    pub bright_lesions: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { benign: 12, malignant: 8, normal: 5, height: 64, width: 64, speckle: 0.15, bright_lesions: false, seed: 1 }
    }
}

struct Lesion {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    /// Boundary modulation; zero for smooth ellipses.
    lobes: f64,
}

impl Lesion {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64, irregular: bool) -> Self {
        Lesion {
            cy: rng.random_range(0.3..0.7) * h,
            cx: rng.random_range(0.3..0.7) * w,
            ry: rng.random_range(0.1..0.2) * h,
            rx: rng.random_range(0.12..0.25) * w,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            lobes: if irregular { rng.random_range(0.15..0.3) } else { 0.0 },
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        let theta = v.atan2(u);
        let radius = 1.0 + self.lobes * (5.0 * theta).sin();
        u * u + v * v <= radius * radius
    }
}

/// Speckled ultrasound-like images with dark (or, optionally, bright)
/// lesions. Benign lesions are
/// ellipses (every third benign sample has two, stored as two masks);
/// malignant lesions have lobed borders; normal samples have empty masks.
pub fn synthetic_samples(config: &SyntheticConfig) -> Result<Vec<(SampleClass, LabeledImage, Vec<GrayImage>)>> {
    let (h, w) = (config.height, config.width);
    let mut out = Vec::new();
    let plan = [
        (SampleClass::Benign, config.benign),
        (SampleClass::Malignant, config.malignant),
        (SampleClass::Normal, config.normal),
    ];
    let mut sample_seed = config.seed;
    for (class, count) in plan {
        for i in 0..count {
            sample_seed = sample_seed.wrapping_add(0x9e37_79b9);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let lesions: Vec<Lesion> = match class {
                SampleClass::Normal => Vec::new(),
                SampleClass::Benign if i % 3 == 2 => {
                    let mut a = Lesion::random(&mut rng, h as f64, w as f64, false);
                    let mut b = Lesion::random(&mut rng, h as f64, w as f64, false);
                    a.cx = 0.3 * w as f64;
                    b.cx = 0.72 * w as f64;
                    a.rx = a.rx.min(0.15 * w as f64);
                    b.rx = b.rx.min(0.15 * w as f64);
                    vec![a, b]
                }
                SampleClass::Benign => vec![Lesion::random(&mut rng, h as f64, w as f64, false)],
                SampleClass::Malignant => vec![Lesion::random(&mut rng, h as f64, w as f64, true)],
            };
            let masks: Vec<GrayImage> = if lesions.is_empty() {
                vec![GrayImage::filled(h, w, 0.0)]
            } else {
                lesions
                    .iter()
                    .map(|l| GrayImage::from_fn(h, w, |y, x| if l.contains(y as f64, x as f64) { 1.0 } else { 0.0 }))
                    .collect()
            };
            let merged = merge_masks(&masks)?;
            let mut base = rng.random_range(0.45..0.6f32);
            let mut lesion_level = rng.random_range(0.12..0.22f32);
            if config.bright_lesions {
                base -= 0.15;
                lesion_level += 0.65;
            }
            let clean = GrayImage::from_fn(h, w, |y, x| {
                let shade = 0.08 * (y as f32 / h as f32);
                if merged.get(y, x) > 0.5 {
                    lesion_level
                } else {
                    base + shade
                }
            });
            let image = add_speckle(&clean, config.speckle, rng.random())?;
            let id = format!("{}/{} ({})", class.name(), class.name(), i + 1);
            out.push((class, LabeledImage::new(id, image, merged)?, masks));
        }
    }
    Ok(out)
}

/// Writes a synthetic dataset in the on-disk layout read by [`scan_dataset`].
pub fn write_synthetic_dataset(root: &Path, config: &SyntheticConfig) -> Result<Vec<SampleRecord>> {
    for class in SampleClass::ALL {
        let dir = root.join(class.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (class, sample, masks) in synthetic_samples(config)? {
        let name = sample.id.rsplit_once('/').map(|(_, n)| n.to_string()).unwrap_or_else(|| sample.id.clone());
        let dir = root.join(class.name());
        write_png(&sample.image, &dir.join(format!("{name}.png")))?;
        for (i, m) in masks.iter().enumerate() {
            let file = if i == 0 { format!("{name}_mask.png") } else { format!("{name}_mask_{i}.png") };
            write_png(m, &dir.join(file))?;
        }
    }
    scan_dataset(root)
}
