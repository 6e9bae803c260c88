//! Image preprocessing: resizing, non-local-means despeckling, 180° rotation
//! augmentation and a multiplicative speckle generator.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Raw,
    Denoised,
    Augmented,
}

/// Single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
    provenance: Provenance,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "image {height}×{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data, provenance: Provenance::Raw })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage { height, width, data: vec![value; height * width], provenance: Provenance::Raw }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        GrayImage { height, width, data, provenance: Provenance::Raw }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Thresholds at 0.5 into `{0, 1}`.
    pub fn binarize(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = if *v > 0.5 { 1.0 } else { 0.0 });
        self
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Pixelwise maximum; used to merge several lesion masks.
    pub fn union(&self, other: &GrayImage) -> Result<GrayImage> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::InvalidArgument(format!(
                "cannot merge {}×{} with {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a.max(*b)).collect();
        Ok(GrayImage { data, ..self.clone() })
    }
}

/// Reads a PNG as luma, mapping the 8-bit range linearly onto `[0, 1]`.
pub fn read_png(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), detail: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    GrayImage::new(h as usize, w as usize, data)
}

pub fn read_mask_png(path: &Path) -> Result<GrayImage> {
    Ok(read_png(path)?.binarize())
}

pub fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::InvalidArgument("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), detail: other.to_string() },
    })
}

/// Bilinear resize, half-pixel centres, edges clamped.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}×{out_w} is empty")));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, img.height);
    let xs = taps(out_w, img.width);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
            let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(GrayImage { height: out_h, width: out_w, data, provenance: img.provenance })
}

/// Nearest-neighbour resize; keeps masks binary.
pub fn resize_nearest(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}×{out_w} is empty")));
    }
    let pick = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let data = (0..out_h * out_w)
        .map(|i| img.get(pick(i / out_w, out_h, img.height), pick(i % out_w, out_w, img.width)))
        .collect();
    Ok(GrayImage { height: out_h, width: out_w, data, provenance: img.provenance })
}

pub fn rotate180(img: &GrayImage) -> GrayImage {
    let mut data = img.data.clone();
    data.reverse();
    GrayImage { data, ..img.clone() }
}

/// `img·(1 + n)` with `n ~ N(0, σ²)` per pixel, clamped to `[0, 1]`.
pub fn add_speckle(img: &GrayImage, sigma: f64, seed: u64) -> Result<GrayImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("speckle sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img.data.iter().map(|&v| (v as f64 * (1.0 + normal.sample(&mut rng))).clamp(0.0, 1.0) as f32).collect();
    Ok(GrayImage { data, ..img.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NlmParams {
    /// Filtering strength; larger values average more aggressively.
    pub h: f64,
    /// Side of the comparison patch, odd.
    pub patch: usize,
    /// Side of the search window, odd.
    pub window: usize,
    /// Noise standard deviation subtracted from patch distances.
    pub sigma: f64,
}

impl Default for NlmParams {
    fn default() -> Self {
        NlmParams { h: 0.1, patch: 7, window: 21, sigma: 0.0 }
    }
}

impl NlmParams {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch % 2 == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "NLM patch ({}) and window ({}) must be odd",
                self.patch, self.window
            )));
        }
        if self.patch > self.window || self.window > height.min(width) {
            return Err(Error::InvalidArgument(format!(
                "NLM needs patch ≤ window ≤ min(H, W); got {} ≤ {} ≤ {}",
                self.patch,
                self.window,
                height.min(width)
            )));
        }
        if !(self.h > 0.0) || self.sigma < 0.0 {
            return Err(Error::InvalidArgument("NLM h must be positive and sigma non-negative".into()));
        }
        Ok(())
    }

    fn weight(&self, d2: f64) -> f64 {
        (-(d2 - 2.0 * self.sigma * self.sigma).max(0.0) / (self.h * self.h)).exp()
    }
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

struct Padded {
    data: Vec<f64>,
    stride: usize,
    pad: usize,
}

impl Padded {
    fn new(img: &GrayImage, pad: usize) -> Self {
        let stride = img.width + 2 * pad;
        let rows = img.height + 2 * pad;
        let mut data = Vec::with_capacity(rows * stride);
        for y in 0..rows {
            let sy = reflect(y as isize - pad as isize, img.height);
            for x in 0..stride {
                data.push(img.get(sy, reflect(x as isize - pad as isize, img.width)) as f64);
            }
        }
        Padded { data, stride, pad }
    }

    /// Pixel at original-image coordinates, which may lie in the border.
    fn at(&self, y: isize, x: isize) -> f64 {
        self.data[(y + self.pad as isize) as usize * self.stride + (x + self.pad as isize) as usize]
    }
}

/// Non-local means: each pixel becomes the weighted mean of the window
/// pixels, weighted by `exp(−max(d² − 2σ², 0)/h²)` where `d²` is the mean
/// squared difference between the two surrounding patches. Borders are
/// handled by reflection.
pub fn nlm_denoise(img: &GrayImage, params: &NlmParams) -> Result<GrayImage> {
    params.validate(img.height, img.width)?;
    let (h, w) = (img.height, img.width);
    let p = params.patch / 2;
    let s = (params.window / 2) as isize;
    let padded = Padded::new(img, params.window / 2 + p);
    let patch_area = (params.patch * params.patch) as f64;
    // difference images cover the pixels plus a patch-radius border
    let eh = h + 2 * p;
    let ew = w + 2 * p;

    // One partial sum per window row, combined in row order so the result
    // does not depend on thread scheduling.
    let rows: Vec<isize> = (-s..=s).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = rows
        .par_iter()
        .map(|&dy| {
            let mut num = vec![0.0f64; h * w];
            let mut den = vec![0.0f64; h * w];
            let mut integral = vec![0.0f64; (eh + 1) * (ew + 1)];
            for dx in -s..=s {
                for ey in 0..eh {
                    let y = ey as isize - p as isize;
                    let mut row = 0.0;
                    for ex in 0..ew {
                        let x = ex as isize - p as isize;
                        let d = padded.at(y, x) - padded.at(y + dy, x + dx);
                        row += d * d;
                        integral[(ey + 1) * (ew + 1) + ex + 1] = integral[ey * (ew + 1) + ex + 1] + row;
                    }
                }
                let k = 2 * p + 1;
                for y in 0..h {
                    for x in 0..w {
                        let a = integral[(y + k) * (ew + 1) + x + k] - integral[y * (ew + 1) + x + k]
                            - integral[(y + k) * (ew + 1) + x]
                            + integral[y * (ew + 1) + x];
                        let wgt = params.weight(a / patch_area);
                        num[y * w + x] += wgt * padded.at(y as isize + dy, x as isize + dx);
                        den[y * w + x] += wgt;
                    }
                }
            }
            (num, den)
        })
        .collect();
    let mut num = vec![0.0f64; h * w];
    let mut den = vec![0.0f64; h * w];
    for (n, d) in &partials {
        num.iter_mut().zip(n).for_each(|(a, b)| *a += b);
        den.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    let data = num.iter().zip(&den).map(|(n, d)| (n / d).clamp(0.0, 1.0) as f32).collect();
    Ok(GrayImage { height: h, width: w, data, provenance: Provenance::Denoised })
}

/// Normalized NLM weights of the search window around `(y, x)`, row-major
/// over window offsets, computed directly from patch distances.
pub fn nlm_weights_at(img: &GrayImage, params: &NlmParams, y: usize, x: usize) -> Result<Vec<f64>> {
    params.validate(img.height, img.width)?;
    if y >= img.height || x >= img.width {
        return Err(Error::InvalidArgument(format!("pixel ({y}, {x}) outside the image")));
    }
    let p = (params.patch / 2) as isize;
    let s = (params.window / 2) as isize;
    let padded = Padded::new(img, params.window / 2 + params.patch / 2);
    let (y, x) = (y as isize, x as isize);
    let mut weights = Vec::with_capacity(params.window * params.window);
    for dy in -s..=s {
        for dx in -s..=s {
            let mut d2 = 0.0;
            for py in -p..=p {
                for px in -p..=p {
                    let d = padded.at(y + py, x + px) - padded.at(y + dy + py, x + dx + px);
                    d2 += d * d;
                }
            }
            weights.push(params.weight(d2 / (params.patch * params.patch) as f64));
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Ok(weights)
}

/// Image with its binary lesion mask. Geometric operations act on both.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: GrayImage,
    pub mask: GrayImage,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: GrayImage, mask: GrayImage) -> Result<Self> {
        let id = id.into();
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::Data(format!(
                "{id}: image {}×{} and mask {}×{} differ in size",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(LabeledImage { id, image, mask })
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        Ok(LabeledImage {
            id: self.id.clone(),
            image: resize_bilinear(&self.image, height, width)?,
            mask: resize_nearest(&self.mask, height, width)?,
        })
    }

    pub fn rotated180(&self) -> Self {
        LabeledImage {
            id: format!("{}#rot180", self.id),
            image: rotate180(&self.image).with_provenance(Provenance::Augmented),
            mask: rotate180(&self.mask),
        }
    }

    pub fn denoised(&self, params: &NlmParams) -> Result<Self> {
        Ok(LabeledImage { id: self.id.clone(), image: nlm_denoise(&self.image, params)?, mask: self.mask.clone() })
    }
}

/// Which extra training variants are generated per record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentSet {
    /// Originals only.
    None,
    /// Original plus its 180° rotation.
    Rotated,
    /// Raw, denoised, rotated raw and rotated denoised.
    DenoisedAndRotated,
}

impl AugmentSet {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AugmentSet::None),
            "rotated" => Some(AugmentSet::Rotated),
            "denoised+rotated" => Some(AugmentSet::DenoisedAndRotated),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentSet::None => "none",
            AugmentSet::Rotated => "rotated",
            AugmentSet::DenoisedAndRotated => "denoised+rotated",
        }
    }
}

/// Expands training records. Rotated copies follow all originals, so the
/// first `records.len()` outputs are the inputs unchanged. With
/// `DenoisedAndRotated` the inputs are taken as raw images.
pub fn augment(records: &[LabeledImage], set: AugmentSet, nlm: &NlmParams) -> Result<Vec<LabeledImage>> {
    let mut out = records.to_vec();
    if set == AugmentSet::DenoisedAndRotated {
        let denoised: Vec<LabeledImage> = records
            .par_iter()
            .map(|r| {
                let mut d = r.denoised(nlm)?;
                d.id = format!("{}#nlm", r.id);
                Ok(d)
            })
            .collect::<Result<_>>()?;
        out.extend(denoised);
    }
    if set != AugmentSet::None {
        let rotated: Vec<LabeledImage> = out.iter().map(LabeledImage::rotated180).collect();
        out.extend(rotated);
    }
    Ok(out)
}

/// Piecewise-constant test image: a background with a darker ellipse and a
/// bright rectangle.
pub fn phantom(height: usize, width: usize) -> GrayImage {
    let (cy, cx) = (height as f32 * 0.55, width as f32 * 0.4);
    let (ry, rx) = (height as f32 * 0.22, width as f32 * 0.25);
    GrayImage::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f32, x as f32);
        let e = ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2);
        if e <= 1.0 {
            0.2
        } else if y > height / 8 && y < height / 3 && x > width * 3 / 5 && x < width * 7 / 8 {
            0.85
        } else {
            0.55
        }
    })
}
