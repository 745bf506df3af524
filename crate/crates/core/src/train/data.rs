//! Desk-scale image datasets: CIFAR-10 binary batches and procedural shapes.
//!
//! Pixels stay as bytes in memory; batches are standardized per channel
//! (statistics from the training split) when materialized.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const CIFAR_RECORD: usize = 1 + PIXELS;
const CIFAR_CLASSES: usize = 10;
/// Held-out share when a source has no official validation split.
pub const VAL_FRACTION: f64 = 0.1;
const SPLIT_SEED: u64 = 0x5b17;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    /// `N × 3 × 32 × 32` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    fn subset(&self, idx: &[usize]) -> Split {
        let mut out = Split::default();
        for &i in idx {
            out.pixels.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub descriptor: String,
    pub train: Split,
    pub val: Split,
    pub num_classes: usize,
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

/// Random crop after zero padding, and horizontal flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Pixels of padding before the random crop; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            crop_pad: 4,
            flip: true,
        }
    }
}

impl Augment {
    pub const NONE: Augment = Augment {
        crop_pad: 0,
        flip: false,
    };
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        IMAGE_SIZE
    }

    /// Standardized `[B, 3, 32, 32]` images for the given rows of `split`.
    pub fn batch(&self, split: &Split, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * PIXELS);
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for &i in idx {
            for (k, &p) in split.image(i).iter().enumerate() {
                let c = k / plane;
                data.push((p as f64 / 255.0 - self.mean[c]) / self.std[c]);
            }
        }
        Tensor::new(&[idx.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("batch shape")
    }

    pub fn labels(&self, split: &Split, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| split.labels[i]).collect()
    }

    fn standardize_from_train(&mut self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Data(format!("{}: empty training split", self.descriptor)));
        }
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        for img in self.train.pixels.chunks(PIXELS) {
            for c in 0..CHANNELS {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let x = p as f64 / 255.0;
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
        }
        let count = (self.train.len() * plane) as f64;
        for c in 0..CHANNELS {
            let mean = sum[c] / count;
            let var = (sq[c] / count - mean * mean).max(0.0);
            self.mean[c] = mean;
            // A flat channel carries no signal; avoid dividing by zero.
            self.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }
}

/// Pad, crop and flip a standardized batch. Padding is zero, i.e. the
/// channel mean.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, aug: Augment, rng: &mut R) -> Tensor {
    if aug == Augment::NONE {
        return batch.clone();
    }
    let s = batch.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = aug.crop_pad as i64;
    let mut out = vec![0.0; batch.numel()];
    let src = batch.data();
    for bi in 0..b {
        let (dy, dx) = if pad > 0 {
            (
                rng.random_range(-pad..=pad) as isize,
                rng.random_range(-pad..=pad) as isize,
            )
        } else {
            (0, 0)
        };
        let flip = aug.flip && rng.random_bool(0.5);
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s, out).expect("augment shape")
}

/// `synth:<seed>:<n>:<classes>` or `cifar10:<path>`.
pub fn load_dataset(descriptor: &str) -> Result<Dataset> {
    let (scheme, rest) = descriptor
        .split_once(':')
        .ok_or_else(|| Error::Data(format!("dataset descriptor {descriptor:?} has no scheme")))?;
    let mut ds = match scheme {
        "synth" => {
            let parts: Vec<&str> = rest.split(':').collect();
            let parse = |s: &str, what: &str| {
                s.parse::<u64>()
                    .map_err(|_| Error::Data(format!("{descriptor:?}: {what} {s:?} is not an integer")))
            };
            if parts.len() != 3 {
                return Err(Error::Data(format!(
                    "{descriptor:?}: expected synth:<seed>:<n>:<classes>"
                )));
            }
            let seed = parse(parts[0], "seed")?;
            let n = parse(parts[1], "n")? as usize;
            let classes = parse(parts[2], "classes")? as usize;
            synth(seed, n, classes)?
        }
        "cifar10" => cifar10(Path::new(rest))?,
        other => {
            return Err(Error::Data(format!(
                "unknown dataset scheme {other:?} (synth | cifar10)"
            )))
        }
    };
    ds.descriptor = descriptor.to_string();
    ds.standardize_from_train()?;
    Ok(ds)
}

fn split_off_val(all: Split, seed: u64) -> (Split, Split) {
    let n = all.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * VAL_FRACTION).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    (all.subset(train), all.subset(val))
}

// ---------- CIFAR-10 ----------

/// Parse one binary batch file: records of 1 label byte + 3072 pixel bytes.
pub fn read_cifar_batch(path: &Path) -> Result<Split> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_cifar_records(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_cifar_records(bytes: &[u8]) -> Result<Split> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "corrupt CIFAR-10 data: {} bytes is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut split = Split::default();
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "corrupt CIFAR-10 data: record {i} has label {label}"
            )));
        }
        split.labels.push(label);
        split.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(split)
}

/// A directory holding `data_batch_*.bin` (+ `test_batch.bin` as the
/// validation split), or a single batch file split 90/10.
fn cifar10(path: &Path) -> Result<Dataset> {
    let (train, val) = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Io(format!("{}: no data_batch_*.bin files", path.display())));
        }
        let mut train = Split::default();
        for f in &files {
            let s = read_cifar_batch(f)?;
            train.pixels.extend(s.pixels);
            train.labels.extend(s.labels);
        }
        let test = path.join("test_batch.bin");
        if test.exists() {
            (train, read_cifar_batch(&test)?)
        } else {
            split_off_val(train, SPLIT_SEED)
        }
    } else {
        split_off_val(read_cifar_batch(path)?, SPLIT_SEED)
    };
    Ok(Dataset {
        descriptor: String::new(),
        train,
        val,
        num_classes: CIFAR_CLASSES,
        mean: [0.0; CHANNELS],
        std: [1.0; CHANNELS],
    })
}

// ---------- procedural shapes ----------

pub const SYNTH_SHAPES: usize = 5;

/// `n` balanced images of one coloured shape on a noisy, low-saturation
/// background. The class fixes the shape (`class % 5`) and a hue band
/// (`class / 5`); position, size, exact hue, background and noise vary.
pub fn synth(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data(format!("synth needs at least 2 classes, got {classes}")));
    }
    if n < 2 * classes {
        return Err(Error::Data(format!(
            "synth needs n ≥ 2·classes, got n={n}, classes={classes}"
        )));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let bands = classes.div_ceil(SYNTH_SHAPES);
    let mut all = Split::default();
    for (i, &label) in labels.iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(i as u64 + 1);
        all.pixels
            .extend(render_shape(label % SYNTH_SHAPES, label / SYNTH_SHAPES, bands, &mut r));
        all.labels.push(label);
    }
    let (train, val) = split_off_val(all, seed ^ SPLIT_SEED);
    Ok(Dataset {
        descriptor: String::new(),
        train,
        val,
        num_classes: classes,
        mean: [0.0; CHANNELS],
        std: [1.0; CHANNELS],
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        1 => dx * dx + dy * dy <= r * r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        3 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r * 0.55).powi(2)
        }
    }
}

fn render_shape(shape: usize, band: usize, bands: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = IMAGE_SIZE as f64;
    let gray = rng.random_range(0.25..0.75);
    let bg: [f64; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.08..0.08));
    let hue = (band as f64 + rng.random_range(0.0..0.6)) / bands as f64;
    let fg = hsv_to_rgb(hue, rng.random_range(0.7..1.0), rng.random_range(0.6..1.0));
    let r = rng.random_range(6.0..11.0);
    let cx = rng.random_range(r..s - r);
    let cy = rng.random_range(r..s - r);
    let noise = Normal::new(0.0, 0.04).expect("noise std");
    let mut out = vec![0u8; PIXELS];
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let on = inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for c in 0..CHANNELS {
                let v = if on { fg[c] } else { bg[c] } + noise.sample(rng);
                out[c * plane + y * IMAGE_SIZE + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}
