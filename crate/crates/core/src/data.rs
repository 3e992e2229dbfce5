//! Bitemporal datasets on disk, augmentation and a synthetic generator.
//!
//! Layout: `<root>/<split>/{A,B,label}/<id>.png`, RGB for `A`/`B` and
//! single channel for `label`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::MAX_STRIDE;
use crate::error::{Error, Result};
use crate::ops::axis_taps;
use crate::tensor::Tensor;

pub const LABEL_THRESHOLD: u8 = 128;
pub const MANIFEST_FILE: &str = "synth_manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}`"))),
        }
    }
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("data.normalization.std", "entries must be positive"));
        }
        Ok(())
    }
}

/// Two co-registered images `[3, h, w]` (standardized) and the change
/// mask `[1, h, w]` with values 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BitemporalPair {
    pub id: String,
    pub t1: Tensor<f32>,
    pub t2: Tensor<f32>,
    pub g: Tensor<f32>,
}

impl BitemporalPair {
    pub fn new(id: impl Into<String>, t1: Tensor<f32>, t2: Tensor<f32>, g: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if t1.shape().len() != 3 || t1.shape()[0] != 3 {
            return Err(Error::InvalidInput(format!("{id}: image must be [3, h, w], got {:?}", t1.shape())));
        }
        if t1.shape() != t2.shape() {
            return Err(Error::shape(format!("{id}: t1/t2"), t1.shape(), t2.shape()));
        }
        let (h, w) = (t1.shape()[1], t1.shape()[2]);
        if g.shape() != [1, h, w] {
            return Err(Error::shape(format!("{id}: mask"), g.shape(), &[1, h, w]));
        }
        if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(format!("{id}: mask is not binary")));
        }
        Ok(Self { id, t1, t2, g })
    }

    pub fn height(&self) -> usize {
        self.t1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t1.shape()[2]
    }

    pub fn mask_u8(&self) -> Vec<u8> {
        self.g.data().iter().map(|&v| v as u8).collect()
    }
}

/// A stacked mini-batch: images `[n, 3, h, w]`, masks `[n, 1, h, w]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub t1: Tensor<f32>,
    pub t2: Tensor<f32>,
    pub g: Tensor<f32>,
}

pub fn make_batch(pairs: &[BitemporalPair]) -> Result<Batch> {
    let stack = |f: fn(&BitemporalPair) -> &Tensor<f32>| Tensor::stack(&pairs.iter().map(|p| f(p).clone()).collect::<Vec<_>>());
    Ok(Batch {
        t1: stack(|p| &p.t1)?,
        t2: stack(|p| &p.t2)?,
        g: stack(|p| &p.g)?,
    })
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => Error::MissingFile { path: path.into() },
        source => Error::Image { path: path.into(), source },
    }
}

/// Reads an RGB image as a standardized `[3, h, w]` tensor.
pub fn load_image(path: &Path, norm: &Normalization) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&img, norm))
}

/// Reads a mask, binarized at [`LABEL_THRESHOLD`], as `[1, h, w]`.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v >= LABEL_THRESHOLD)).collect();
    Tensor::new(&[1, h as usize, w as usize], data)
}

pub fn rgb_to_tensor(img: &RgbImage, norm: &Normalization) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        (f32::from(raw[p * 3 + c]) / 255.0 - norm.mean[c]) / norm.std[c]
    })
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| Error::InvalidInput(format!("{}: buffer does not match {width}x{height}", path.display())))?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, gray: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, gray)
        .ok_or_else(|| Error::InvalidInput(format!("{}: buffer does not match {width}x{height}", path.display())))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Edge-replicates `[c, h, w]` to `[c, out_h, out_w]` (bottom/right).
pub fn pad_replicate(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (k, r, col) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        d[(k * h + r.min(h - 1)) * w + col.min(w - 1)]
    })
}

/// Crops the top-left `h x w` window of `[c, H, W]`.
pub fn crop_top_left(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    crop(t, 0, 0, h, w)
}

pub const OVERLAY_TP: [u8; 3] = [255, 255, 255];
pub const OVERLAY_TN: [u8; 3] = [0, 0, 0];
pub const OVERLAY_FP: [u8; 3] = [255, 0, 0];
pub const OVERLAY_FN: [u8; 3] = [0, 0, 255];

/// RGB rendering of a prediction against ground truth: true positives
/// white, true negatives black, false positives red, false negatives blue.
pub fn confusion_overlay(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(Error::shape("overlay", &[pred.len()], &[truth.len()]));
    }
    let mut out = Vec::with_capacity(pred.len() * 3);
    for (&p, &g) in pred.iter().zip(truth) {
        out.extend_from_slice(&match (p != 0, g != 0) {
            (true, true) => OVERLAY_TP,
            (false, false) => OVERLAY_TN,
            (true, false) => OVERLAY_FP,
            (false, true) => OVERLAY_FN,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Entry {
    id: String,
    a: PathBuf,
    b: PathBuf,
    label: PathBuf,
}

/// File-backed dataset. Files are checked when opened and decoded on
/// [`Dataset::get`].
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    entries: Vec<Entry>,
    patch: Option<usize>,
    // (entry, row, col) of each item
    items: Vec<(usize, usize, usize)>,
    norm: Normalization,
}

/// Opens `<root>/<split>/{A,B,label}`. With `patch` set, every image is
/// tiled into non-overlapping `patch x patch` squares.
pub fn load_dataset(root: &Path, split: Split, patch: Option<usize>, norm: Normalization) -> Result<Dataset> {
    Dataset::open_dir(&root.join(split.name()), patch, norm)
}

impl Dataset {
    /// Opens a directory holding `A/`, `B/` and `label/` directly.
    pub fn open_dir(dir: &Path, patch: Option<usize>, norm: Normalization) -> Result<Self> {
        norm.validate()?;
        if patch == Some(0) {
            return Err(Error::config("data.patch_size", "must be positive"));
        }
        let a_dir = dir.join("A");
        let listing = fs::read_dir(&a_dir).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: a_dir.clone() },
            _ => Error::io(&a_dir, e),
        })?;
        let mut names = Vec::new();
        for item in listing {
            let path = item.map_err(|e| Error::io(&a_dir, e))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                names.push(path.file_name().expect("file name").to_owned());
            }
        }
        names.sort();

        let mut entries = Vec::new();
        let mut items = Vec::new();
        for name in names {
            let id = Path::new(&name).file_stem().expect("stem").to_string_lossy().into_owned();
            let e = Entry {
                id,
                a: a_dir.join(&name),
                b: dir.join("B").join(&name),
                label: dir.join("label").join(&name),
            };
            let dims = |p: &Path| -> Result<(usize, usize)> {
                if !p.is_file() {
                    return Err(Error::MissingFile { path: p.into() });
                }
                let (w, h) = image::image_dimensions(p).map_err(|err| image_err(p, err))?;
                Ok((h as usize, w as usize))
            };
            let (da, db, dl) = (dims(&e.a)?, dims(&e.b)?, dims(&e.label)?);
            if da != db || da != dl {
                return Err(Error::InvalidInput(format!(
                    "{}: sizes differ (A {}x{}, B {}x{}, label {}x{})",
                    e.id, da.0, da.1, db.0, db.1, dl.0, dl.1
                )));
            }
            let index = entries.len();
            match patch {
                None => items.push((index, 0, 0)),
                Some(p) => {
                    if da.0 < p || da.1 < p {
                        return Err(Error::InvalidInput(format!("{}: {}x{} is smaller than patch {p}", e.id, da.0, da.1)));
                    }
                    for r in 0..da.0 / p {
                        for c in 0..da.1 / p {
                            items.push((index, r, c));
                        }
                    }
                }
            }
            entries.push(e);
        }
        Ok(Self {
            dir: dir.into(),
            entries,
            patch,
            items,
            norm,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<BitemporalPair> {
        let &(e, r, c) = self
            .items
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("item {index} out of range ({})", self.len())))?;
        let e = &self.entries[e];
        let t1 = load_image(&e.a, &self.norm)?;
        let t2 = load_image(&e.b, &self.norm)?;
        let g = load_mask(&e.label)?;
        match self.patch {
            None => BitemporalPair::new(e.id.clone(), t1, t2, g),
            Some(p) => {
                let (y, x) = (r * p, c * p);
                BitemporalPair::new(
                    format!("{}_{r}_{c}", e.id),
                    crop(&t1, y, x, p, p),
                    crop(&t2, y, x, p, p),
                    crop(&g, y, x, p, p),
                )
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<BitemporalPair>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Decodes every item into memory.
    pub fn load_all(&self) -> Result<Vec<BitemporalPair>> {
        self.iter().collect()
    }
}

fn crop(t: &Tensor<f32>, y: usize, x: usize, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    let (sh, sw) = (s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(&[s[0], h, w], |i| {
        let (c, r, col) = (i / (h * w), (i / w) % h, i % w);
        d[(c * sh + y + r) * sw + x + col]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub crop_prob: f64,
    /// Side length of the crop as a fraction of the input side.
    pub crop_scale: [f64; 2],
    pub exchange_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            crop_prob: 0.5,
            crop_scale: [0.8, 1.0],
            exchange_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop_prob: 0.0,
            crop_scale: [1.0, 1.0],
            exchange_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("augment.hflip_prob", self.hflip_prob),
            ("augment.vflip_prob", self.vflip_prob),
            ("augment.crop_prob", self.crop_prob),
            ("augment.exchange_prob", self.exchange_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("{p} is not a probability")));
            }
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("augment.crop_scale", "need 0 < lo <= hi <= 1"));
        }
        Ok(())
    }
}

pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (row, col) = (i / w, i % w);
        d[row * w + (w - 1 - col)]
    })
}

pub fn vflip(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (c, r, col) = (i / (h * w), (i / w) % h, i % w);
        d[(c * h + (h - 1 - r)) * w + col]
    })
}

/// Bilinear resize of the `ch x cw` window at `(y, x)` back to full size.
pub fn crop_resize_bilinear(t: &Tensor<f32>, y: usize, x: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let ty = axis_taps::<f32>(ch, h);
    let tx = axis_taps::<f32>(cw, w);
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (k, r, col) = (i / (h * w), (i / w) % h, i % w);
        let (a, b) = (&ty[r], &tx[col]);
        let at = |yy: usize, xx: usize| d[(k * h + y + yy) * w + x + xx];
        a.w0 * (b.w0 * at(a.i0, b.i0) + b.w1 * at(a.i0, b.i1)) + a.w1 * (b.w0 * at(a.i1, b.i0) + b.w1 * at(a.i1, b.i1))
    })
}

/// Nearest-neighbour counterpart of [`crop_resize_bilinear`] for masks.
pub fn crop_resize_nearest(t: &Tensor<f32>, y: usize, x: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = |o: usize, crop: usize, full: usize| (((o as f64 + 0.5) * crop as f64 / full as f64) as usize).min(crop - 1);
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (k, r, col) = (i / (h * w), (i / w) % h, i % w);
        d[(k * h + y + src(r, ch, h)) * w + x + src(col, cw, w)]
    })
}

/// Random flips, crop-and-resize and temporal exchange. Spatial transforms
/// are applied identically to both images and the mask.
pub fn augment<R: Rng + ?Sized>(pair: &BitemporalPair, cfg: &AugmentConfig, rng: &mut R) -> BitemporalPair {
    let mut out = pair.clone();
    let spatial = |out: &mut BitemporalPair, img: &dyn Fn(&Tensor<f32>) -> Tensor<f32>, mask: &dyn Fn(&Tensor<f32>) -> Tensor<f32>| {
        out.t1 = img(&out.t1);
        out.t2 = img(&out.t2);
        out.g = mask(&out.g);
    };
    if rng.random_bool(cfg.hflip_prob) {
        spatial(&mut out, &hflip, &hflip);
    }
    if rng.random_bool(cfg.vflip_prob) {
        spatial(&mut out, &vflip, &vflip);
    }
    if rng.random_bool(cfg.crop_prob) {
        let (h, w) = (out.height(), out.width());
        let s = rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let ch = ((s * h as f64).round() as usize).clamp(1, h);
        let cw = ((s * w as f64).round() as usize).clamp(1, w);
        let y = rng.random_range(0..=h - ch);
        let x = rng.random_range(0..=w - cw);
        spatial(
            &mut out,
            &|t| crop_resize_bilinear(t, y, x, ch, cw),
            &|t| crop_resize_nearest(t, y, x, ch, cw),
        );
    }
    if rng.random_bool(cfg.exchange_prob) {
        std::mem::swap(&mut out.t1, &mut out.t2);
    }
    out
}

/// Swaps the two acquisition dates; the mask is unchanged.
pub fn temporal_exchange(pair: &BitemporalPair) -> BitemporalPair {
    BitemporalPair {
        id: pair.id.clone(),
        t1: pair.t2.clone(),
        t2: pair.t1.clone(),
        g: pair.g.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub patch_size: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Inclusive range of shapes drawn in the first image.
    pub shape_count_range: [usize; 2],
    /// Inclusive range of shapes added or removed between the dates.
    pub change_count_range: [usize; 2],
    /// Standard deviation of per-pixel noise on the second image, in [0, 1] units.
    pub noise_level: f64,
    /// Maximum absolute global brightness offset of the second image.
    pub illumination_shift_range: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            num_train: 512,
            num_val: 64,
            num_test: 128,
            shape_count_range: [2, 6],
            change_count_range: [1, 3],
            noise_level: 0.03,
            illumination_shift_range: 0.15,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % MAX_STRIDE != 0 {
            return Err(Error::config("synth.patch_size", format!("{} is not a positive multiple of {MAX_STRIDE}", self.patch_size)));
        }
        for (name, n) in [
            ("synth.num_train", self.num_train),
            ("synth.num_val", self.num_val),
            ("synth.num_test", self.num_test),
        ] {
            if n == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.shape_count_range[0] > self.shape_count_range[1] {
            return Err(Error::config("synth.shape_count_range", "min exceeds max"));
        }
        if self.change_count_range[0] > self.change_count_range[1] {
            return Err(Error::config("synth.change_count_range", "min exceeds max"));
        }
        if !(self.noise_level >= 0.0) || !(self.illumination_shift_range >= 0.0) {
            return Err(Error::config("synth.noise_level", "noise and illumination ranges must be non-negative"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Val => self.num_val,
            Split::Test => self.num_test,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Outline {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    outline: Outline,
    color: [f64; 3],
}

impl Shape {
    fn random<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let ry = rng.random_range(0.06 * s..0.2 * s);
        let rx = rng.random_range(0.06 * s..0.2 * s);
        let outline = if rng.random_bool(0.5) {
            Outline::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        } else {
            Outline::Ellipse { cy, cx, ry, rx }
        };
        // saturated colours keep shapes distinct from the muted background
        let hue = rng.random_range(0..6);
        let hi = rng.random_range(0.75..0.95);
        let lo = rng.random_range(0.05..0.25);
        let color = match hue {
            0 => [hi, lo, lo],
            1 => [lo, hi, lo],
            2 => [lo, lo, hi],
            3 => [hi, hi, lo],
            4 => [lo, hi, hi],
            _ => [hi, lo, hi],
        };
        Self { outline, color }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self.outline {
            Outline::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Outline::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// One generated pair as 8-bit buffers: RGB interleaved images and a 0/1 mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSample {
    pub size: usize,
    pub t1: Vec<u8>,
    pub t2: Vec<u8>,
    pub mask: Vec<u8>,
}

/// Draws a scene, perturbs it and returns both renderings with the exact
/// footprint of added and removed shapes.
pub fn synth_sample<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> SynthSample {
    let n = cfg.patch_size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let grain: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.04..0.04)).collect();
    let background = |p: usize| -> [f64; 3] {
        let (y, x) = ((p / n) as f64, (p % n) as f64);
        let wave: f64 = waves.iter().map(|&(f, a, b, amp)| amp * (f * y + a).sin() * (f * x + b).cos()).sum();
        base.map(|c| c + wave + grain[p])
    };

    let count = rng.random_range(cfg.shape_count_range[0]..=cfg.shape_count_range[1]);
    let before: Vec<Shape> = (0..count).map(|_| Shape::random(rng, n)).collect();
    let changes = rng.random_range(cfg.change_count_range[0]..=cfg.change_count_range[1]);
    let mut after: Vec<Option<Shape>> = before.iter().copied().map(Some).collect();
    let mut added = Vec::new();
    for _ in 0..changes {
        let removable: Vec<usize> = (0..after.len()).filter(|&i| after[i].is_some()).collect();
        if !removable.is_empty() && rng.random_bool(0.5) {
            let i = removable[rng.random_range(0..removable.len())];
            after[i] = None;
        } else {
            added.push(Shape::random(rng, n));
        }
    }
    // ids: 0 background, 1.. original shapes, then added shapes
    let after: Vec<(usize, Shape)> = after
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i + 1, s)))
        .chain(added.into_iter().enumerate().map(|(j, s)| (count + 1 + j, s)))
        .collect();
    let before: Vec<(usize, Shape)> = before.into_iter().enumerate().map(|(i, s)| (i + 1, s)).collect();

    let top = |scene: &[(usize, Shape)], p: usize| -> Option<(usize, [f64; 3])> {
        let (y, x) = ((p / n) as f64 + 0.5, (p % n) as f64 + 0.5);
        scene.iter().rev().find(|(_, s)| s.contains(y, x)).map(|&(id, s)| (id, s.color))
    };
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * cfg.illumination_shift_range;
    let offset = rng.random_range(-1.0..=1.0) * cfg.illumination_shift_range * 0.5;
    let noise = rand_distr::Normal::new(0.0, cfg.noise_level.max(0.0)).expect("finite noise level");

    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut t1 = Vec::with_capacity(n * n * 3);
    let mut t2 = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for p in 0..n * n {
        let bg = background(p);
        let (id1, c1) = top(&before, p).unwrap_or((0, bg));
        let (id2, c2) = top(&after, p).unwrap_or((0, bg));
        mask.push(u8::from(id1 != id2));
        for ch in 0..3 {
            t1.push(quantize(c1[ch]));
            let jitter = if cfg.noise_level > 0.0 { rng.sample(noise) } else { 0.0 };
            t2.push(quantize(c2[ch] * gain + offset + jitter));
        }
    }
    SynthSample { size: n, t1, t2, mask }
}

fn item_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

/// Writes train/val/test splits under `out` and a manifest with `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    for split in Split::ALL {
        let dir = out.join(split.name());
        for sub in ["A", "B", "label"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for i in 0..cfg.count(split) {
            let s = synth_sample(cfg, &mut item_rng(cfg.seed, split, i));
            let name = format!("{i:05}.png");
            let n = s.size;
            write_rgb_png(&dir.join("A").join(&name), n, n, s.t1)?;
            write_rgb_png(&dir.join("B").join(&name), n, n, s.t2)?;
            write_gray_png(&dir.join("label").join(&name), n, n, s.mask.iter().map(|&m| m * 255).collect())?;
        }
    }
    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&manifest, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            patch_size: 32,
            num_train: 3,
            num_val: 1,
            num_test: 2,
            ..Default::default()
        }
    }

    fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BitemporalPair {
        let t1 = Tensor::uniform(&[3, h, w], -1.0, 1.0, rng);
        let t2 = Tensor::uniform(&[3, h, w], -1.0, 1.0, rng);
        let g = Tensor::from_fn(&[1, h, w], |_| f32::from(rng.random_bool(0.3)));
        BitemporalPair::new("x", t1, t2, g).unwrap()
    }

    #[test]
    fn generated_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small(), dir.path()).unwrap();
        let ds = load_dataset(dir.path(), Split::Train, None, Normalization::default()).unwrap();
        assert_eq!(ds.len(), 3);
        let p = ds.get(0).unwrap();
        assert_eq!(p.t1.shape(), &[3, 32, 32]);
        assert_eq!(p.g.shape(), &[1, 32, 32]);
        assert!(dir.path().join(MANIFEST_FILE).is_file());
    }

    #[test]
    fn missing_counterpart_is_named() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small(), dir.path()).unwrap();
        let gone = dir.path().join("test/B/00001.png");
        fs::remove_file(&gone).unwrap();
        match load_dataset(dir.path(), Split::Test, None, Normalization::default()) {
            Err(Error::MissingFile { path }) => assert_eq!(path, gone),
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn large_image_tiles_into_patches() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["A", "B", "label"] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        let n = 1024;
        let rgb: Vec<u8> = (0..n * n * 3).map(|i| (i % 251) as u8).collect();
        write_rgb_png(&dir.path().join("A/big.png"), n, n, rgb.clone()).unwrap();
        write_rgb_png(&dir.path().join("B/big.png"), n, n, rgb).unwrap();
        write_gray_png(&dir.path().join("label/big.png"), n, n, (0..n * n).map(|i| if i % n < 512 { 200 } else { 10 }).collect()).unwrap();
        let ds = Dataset::open_dir(dir.path(), Some(256), Normalization::default()).unwrap();
        assert_eq!(ds.len(), 16);
        let p = ds.get(5).unwrap();
        assert_eq!(p.id, "big_1_1");
        assert_eq!(p.t1.shape(), &[3, 256, 256]);
        assert!(p.g.data().iter().all(|&v| v == 1.0));
        assert!(ds.get(6).unwrap().g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["A", "B", "label"] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        write_rgb_png(&dir.path().join("A/a.png"), 32, 32, vec![0; 32 * 32 * 3]).unwrap();
        write_rgb_png(&dir.path().join("B/a.png"), 64, 32, vec![0; 64 * 32 * 3]).unwrap();
        write_gray_png(&dir.path().join("label/a.png"), 32, 32, vec![0; 32 * 32]).unwrap();
        assert!(matches!(Dataset::open_dir(dir.path(), None, Normalization::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = synth_sample(&cfg, &mut item_rng(3, Split::Val, 4));
        let b = synth_sample(&cfg, &mut item_rng(3, Split::Val, 4));
        assert_eq!(a, b);
        let c = synth_sample(&cfg, &mut item_rng(3, Split::Val, 5));
        assert_ne!(a, c);
    }

    #[test]
    fn no_change_and_no_perturbation_gives_identical_images() {
        let cfg = SynthConfig {
            change_count_range: [0, 0],
            noise_level: 0.0,
            illumination_shift_range: 0.0,
            ..small()
        };
        for i in 0..5 {
            let s = synth_sample(&cfg, &mut item_rng(1, Split::Train, i));
            assert!(s.mask.iter().all(|&m| m == 0));
            assert_eq!(s.t1, s.t2);
        }
    }

    #[test]
    fn changes_produce_a_footprint() {
        let cfg = SynthConfig {
            change_count_range: [2, 2],
            ..small()
        };
        let changed = (0..10)
            .filter(|&i| synth_sample(&cfg, &mut item_rng(2, Split::Train, i)).mask.contains(&1))
            .count();
        assert!(changed >= 8, "{changed}");
    }

    #[test]
    fn temporal_exchange_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_pair(&mut rng, 8, 8);
        let once = temporal_exchange(&p);
        assert_eq!(once.g, p.g);
        assert_eq!(temporal_exchange(&once), p);
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pair(&mut rng, 8, 8);
        assert_eq!(augment(&p, &AugmentConfig::disabled(), &mut rng), p);
    }

    #[test]
    fn flips_match_index_remap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pair(&mut rng, 5, 7);
        let (h, w) = (5, 7);
        let hf = hflip(&p.t1);
        let vf = vflip(&p.g);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(hf.data()[(c * h + y) * w + x], p.t1.data()[(c * h + y) * w + (w - 1 - x)]);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                assert_eq!(vf.data()[y * w + x], p.g.data()[(h - 1 - y) * w + x]);
            }
        }
    }

    #[test]
    fn full_window_crop_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pair(&mut rng, 6, 6);
        assert!(crop_resize_bilinear(&p.t1, 0, 0, 6, 6).max_abs_diff(&p.t1) < 1e-6);
        assert_eq!(crop_resize_nearest(&p.g, 0, 0, 6, 6), p.g);
    }

    #[test]
    fn augmented_mask_stays_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AugmentConfig {
            crop_prob: 1.0,
            ..Default::default()
        };
        for _ in 0..10 {
            let p = random_pair(&mut rng, 16, 16);
            let a = augment(&p, &cfg, &mut rng);
            assert!(a.g.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(a.t1.shape(), p.t1.shape());
        }
    }

    #[test]
    fn pad_then_crop_restores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pair(&mut rng, 5, 7);
        let padded = pad_replicate(&p.t1, 8, 9);
        assert_eq!(padded.shape(), &[3, 8, 9]);
        assert_eq!(padded.data()[8 * 9 - 1], p.t1.data()[5 * 7 - 1]);
        assert_eq!(crop_top_left(&padded, 5, 7), p.t1);
    }

    #[test]
    fn overlay_colours() {
        let rgb = confusion_overlay(&[1, 0, 1, 0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(rgb, [OVERLAY_TP, OVERLAY_TN, OVERLAY_FP, OVERLAY_FN].concat());
    }
}
