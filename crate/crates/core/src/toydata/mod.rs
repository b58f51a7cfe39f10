//! The two-class toy dataset: digits '2' and '8', a small fraction of each
//! class carrying a class-specific marker (disc for '2', square for '8'), and
//! an exact per-pixel partition into digit, marker and background regions.

mod glyphs;
mod idx;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::{IMAGE_SIDE, NUM_CLASSES};

pub use glyphs::{enclosed_regions, render_glyph, synthesize_glyphs};
pub use idx::{parse_idx, write_idx, IMAGE_MAGIC, LABEL_MAGIC};

pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Digits used for class indices 0 and 1.
pub const CLASS_DIGITS: [u8; NUM_CLASSES] = [2, 8];
/// Intensity above which a pixel counts as part of the digit.
pub const DIGIT_LEVEL: f64 = 0.1;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const DISC_RADIUS: i64 = 2;
pub const SQUARE_SIDE: i64 = 5;

const DATASET_MAGIC: &[u8; 4] = b"RIBD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Bg = 0,
    D = 1,
    Nd = 2,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::D, Region::Nd, Region::Bg];

    pub fn name(self) -> &'static str {
        match self {
            Region::Bg => "BG",
            Region::D => "D",
            Region::Nd => "ND",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Eval = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    /// Row-major `28 × 28` intensities, each an exact multiple of 1/255.
    pub pixels: Vec<f64>,
    /// Class index into [`CLASS_DIGITS`].
    pub class: usize,
    /// Row-major region codes (see [`Region`]).
    pub region: Vec<u8>,
    pub split: Split,
}

impl ToySample {
    pub fn target(&self) -> [f64; NUM_CLASSES] {
        let mut t = [0.0; NUM_CLASSES];
        t[self.class] = 1.0;
        t
    }

    pub fn is_marked(&self) -> bool {
        self.region.contains(&(Region::Nd as u8))
    }

    pub fn mask(&self, region: Region) -> Vec<bool> {
        self.region.iter().map(|&r| r == region as u8).collect()
    }

    /// Ground-truth foreground: digit and marker pixels.
    pub fn foreground(&self) -> Vec<bool> {
        self.region.iter().map(|&r| r != Region::Bg as u8).collect()
    }

    pub fn count(&self, region: Region) -> usize {
        self.region.iter().filter(|&&r| r == region as u8).count()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new([1, 1, IMAGE_SIDE, IMAGE_SIDE], self.pixels.clone()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToyDataset {
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Eval samples carrying a marker, in dataset order.
    pub fn marked_eval(&self) -> Vec<usize> {
        self.indices(Split::Eval)
            .into_iter()
            .filter(|&i| self.samples[i].is_marked())
            .collect()
    }

    /// Stacks the selected images into `[n, 1, 28, 28]`.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].pixels);
        }
        Tensor::new([indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).unwrap()
    }

    /// One-hot targets `[n, 2]`.
    pub fn targets(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * NUM_CLASSES);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].target());
        }
        Tensor::new([indices.len(), NUM_CLASSES], data).unwrap()
    }

    /// `(samples, marked)` per class, optionally restricted to one split.
    pub fn class_counts(&self, split: Option<Split>) -> [(usize, usize); NUM_CLASSES] {
        let mut out = [(0, 0); NUM_CLASSES];
        for s in &self.samples {
            if split.is_none_or(|sp| sp == s.split) {
                out[s.class].0 += 1;
                out[s.class].1 += s.is_marked() as usize;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: Source,
    pub n_per_class: usize,
    pub marker_fraction: f64,
    pub eval_fraction: f64,
    pub seed: u64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: Source::Synthetic,
            n_per_class: 5000,
            marker_fraction: 0.10,
            eval_fraction: 0.10,
            seed: 0,
            idx_images: None,
            idx_labels: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.marker_fraction) {
            return Err(Error::Validation(format!(
                "marker_fraction {} outside [0, 1]",
                self.marker_fraction
            )));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "eval_fraction {} outside (0, 1)",
                self.eval_fraction
            )));
        }
        if self.n_per_class < 2 {
            return Err(Error::Validation(
                "n_per_class must be at least 2 so both splits hold both classes".into(),
            ));
        }
        Ok(())
    }
}

/// Loads `n_per_class` glyphs of each class from the configured source,
/// labelled with their digit.
pub fn load_glyphs(cfg: &DatasetConfig) -> Result<Vec<(Vec<f64>, u8)>> {
    match cfg.source {
        Source::Synthetic => Ok(synthesize_glyphs(cfg.n_per_class, cfg.seed)),
        Source::Idx => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| {
                    Error::Usage(format!("dataset.source is idx but dataset.{key} is not set"))
                })
            };
            let img_path = need(&cfg.idx_images, "idx_images")?;
            let lab_path = need(&cfg.idx_labels, "idx_labels")?;
            let images = codec::read_file(&img_path)?;
            let labels = codec::read_file(&lab_path)?;
            let all = parse_idx(&images, &labels)?;
            let mut taken = [0usize; NUM_CLASSES];
            let mut out = Vec::with_capacity(2 * cfg.n_per_class);
            for (px, digit) in all {
                if let Some(c) = CLASS_DIGITS.iter().position(|&d| d == digit) {
                    if taken[c] < cfg.n_per_class {
                        taken[c] += 1;
                        out.push((px, digit));
                    }
                }
            }
            for (c, &n) in taken.iter().enumerate() {
                if n < cfg.n_per_class {
                    return Err(Error::Size(format!(
                        "{} holds {n} images of digit {}, need {}",
                        img_path.display(),
                        CLASS_DIGITS[c],
                        cfg.n_per_class
                    )));
                }
            }
            Ok(out)
        }
    }
}

fn marker_offsets(class: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    if class == 0 {
        for dy in -DISC_RADIUS..=DISC_RADIUS {
            for dx in -DISC_RADIUS..=DISC_RADIUS {
                if dx * dx + dy * dy <= DISC_RADIUS * DISC_RADIUS {
                    out.push((dx, dy));
                }
            }
        }
    } else {
        let h = SQUARE_SIDE / 2;
        for dy in -h..=h {
            for dx in -h..=h {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Pixel count of the rasterized marker for a class.
pub fn marker_size(class: usize) -> usize {
    marker_offsets(class).len()
}

fn place_marker(pixels: &mut [f64], region: &mut [u8], class: usize, index: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let offsets = marker_offsets(class);
    let reach = offsets.iter().map(|&(dx, _)| dx.abs()).max().unwrap();
    let side = IMAGE_SIDE as i64;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let cx = rng.random_range(reach..side - reach);
        let cy = rng.random_range(reach..side - reach);
        let cells: Vec<usize> = offsets
            .iter()
            .map(|&(dx, dy)| ((cy + dy) * side + cx + dx) as usize)
            .collect();
        if cells.iter().all(|&i| region[i] != Region::D as u8) {
            for i in cells {
                pixels[i] = 1.0;
                region[i] = Region::Nd as u8;
            }
            return Ok(());
        }
    }
    Err(Error::Placement {
        sample: index,
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

fn quantize(v: f64) -> f64 {
    idx::pixel_byte(v) as f64 / 255.0
}

/// Adds markers, derives region maps and assigns splits. Every output is a
/// pure function of `glyphs` and `cfg`.
pub fn build_toy_dataset(glyphs: &[(Vec<f64>, u8)], cfg: &DatasetConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(glyphs.len());
    for (px, digit) in glyphs {
        let class = CLASS_DIGITS.iter().position(|d| d == digit).ok_or_else(|| {
            Error::Validation(format!("digit {digit} is not one of {CLASS_DIGITS:?}"))
        })?;
        if px.len() != PIXELS {
            return Err(Error::dim("build_toy_dataset", "pixels", PIXELS, px.len()));
        }
        let pixels: Vec<f64> = px.iter().map(|&v| quantize(v)).collect();
        let region = pixels
            .iter()
            .map(|&v| if v > DIGIT_LEVEL { Region::D as u8 } else { Region::Bg as u8 })
            .collect();
        samples.push(ToySample {
            pixels,
            class,
            region,
            split: Split::Train,
        });
    }

    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_class[s.class].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    for members in &by_class {
        let n_marked = (cfg.marker_fraction * members.len() as f64).round() as usize;
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let mut marked = order[..n_marked].to_vec();
        marked.sort_unstable();
        for i in marked {
            let s = &mut samples[i];
            place_marker(&mut s.pixels, &mut s.region, s.class, i, &mut rng)?;
        }
    }

    // Stratified split: each (class, marked) stratum contributes its share.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    for members in &by_class {
        let mut eval_total = 0;
        for marked in [true, false] {
            let mut stratum: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| samples[i].is_marked() == marked)
                .collect();
            stratum.shuffle(&mut rng);
            let mut n_eval = (cfg.eval_fraction * stratum.len() as f64).round() as usize;
            if !marked && eval_total + n_eval == 0 && !stratum.is_empty() {
                n_eval = 1;
            }
            if !marked && eval_total + n_eval == members.len() {
                n_eval -= 1;
            }
            for &i in &stratum[..n_eval] {
                samples[i].split = Split::Eval;
            }
            eval_total += n_eval;
        }
    }
    Ok(ToyDataset { samples })
}

pub fn generate(cfg: &DatasetConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    build_toy_dataset(&load_glyphs(cfg)?, cfg)
}

pub fn encode_dataset(ds: &ToyDataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    w.u32(ds.len() as u32);
    w.u32(IMAGE_SIDE as u32);
    w.u32(IMAGE_SIDE as u32);
    for s in &ds.samples {
        w.u8(s.class as u8);
        let bytes: Vec<u8> = s.pixels.iter().map(|&v| idx::pixel_byte(v)).collect();
        w.bytes(&bytes);
        w.bytes(&s.region);
        w.u8(s.split as u8);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ToyDataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION, "RIBD dataset")?;
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h != IMAGE_SIDE || w != IMAGE_SIDE {
        return Err(Error::Format(format!(
            "RIBD images are {h}x{w}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let class = r.u8()? as usize;
        if class >= NUM_CLASSES {
            return Err(Error::Format(format!("RIBD sample {i}: class {class} out of range")));
        }
        let pixels = r.bytes(PIXELS)?.iter().map(|&b| b as f64 / 255.0).collect();
        let region = r.bytes(PIXELS)?.to_vec();
        if let Some(bad) = region.iter().find(|&&c| c > Region::Nd as u8) {
            return Err(Error::Format(format!("RIBD sample {i}: region code {bad}")));
        }
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Eval,
            t => return Err(Error::Format(format!("RIBD sample {i}: split tag {t}"))),
        };
        samples.push(ToySample {
            pixels,
            class,
            region,
            split,
        });
    }
    r.finish()?;
    Ok(ToyDataset { samples })
}

pub fn write_dataset(ds: &ToyDataset, path: &Path) -> Result<()> {
    codec::write_file(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<ToyDataset> {
    decode_dataset(&codec::read_file(path)?)
}
