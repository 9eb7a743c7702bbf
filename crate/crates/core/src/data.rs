//! Datasets: synthetic generators and an IDX-like binary reader.
//!
//! IDX-like layout (all integers big-endian):
//!
//! ```text
//! u8 0, u8 0, u8 0x0D, u8 ndim        ndim ∈ {2, 3, 4}
//! u32 dims[ndim]                      dims[0] = N
//! u8 pixels[N · Π dims[1..]]          row-major, scaled by 1/255
//! u8 labels[N]
//! ```
//!
//! `ndim = 2` is a vector task `N×D`, `3` is `N×H×W` (one channel), `4` is
//! `N×C×H×W`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Targets;
use crate::rng::{normal, substream, uniform_sym, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples, labels and the class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, C, H, W]`, or `[N, D]` for vector tasks.
    pub samples: Tensor,
    pub labels: Targets,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Targets, classes: usize, split: Split) -> Result<Dataset> {
        let n = samples.shape().first().copied().unwrap_or(0);
        if samples.ndim() < 2 || n != labels.len() {
            return Err(Error::Data {
                row: n.min(labels.len()),
                detail: format!("{} labels for samples of shape {:?}", labels.len(), samples.shape()),
            });
        }
        if let Some((row, &t)) = labels.0.iter().enumerate().find(|(_, &t)| t >= classes) {
            return Err(Error::Data { row, detail: format!("label {t} outside [0, {classes})") });
        }
        Ok(Dataset { samples, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, without the batch axis.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn sample_volume(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Copy the rows at `indices` into a fresh constant batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        let d = self.sample_volume();
        let src = self.samples.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
            labels.push(self.labels.0[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(&shape, data)?, Targets(labels)))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.0.iter().for_each(|&t| counts[t] += 1);
        counts
    }

    /// Per-channel mean and standard deviation over every sample and
    /// spatial position.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.sample_shape()[0];
        let spatial = self.sample_volume() / c;
        let n = self.len();
        let data = self.samples.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, v) in data.iter().enumerate() {
            mean[(i / spatial) % c] += v;
        }
        let count = (n * spatial) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, v) in data.iter().enumerate() {
            let ch = (i / spatial) % c;
            var[ch] += (v - mean[ch]).powi(2);
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(1e-12)).collect();
        (mean, std)
    }

    /// Standardize each channel with the given statistics (usually the
    /// training set's).
    pub fn standardize(&self, mean: &[f64], std: &[f64]) -> Result<Dataset> {
        let c = self.sample_shape()[0];
        if mean.len() != c || std.len() != c {
            return Err(Error::Config(format!("standardization needs {c} channel statistics")));
        }
        let spatial = self.sample_volume() / c;
        let data = self
            .samples
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / spatial) % c;
                (v - mean[ch]) / std[ch]
            })
            .collect();
        Dataset::new(Tensor::new(self.samples.shape(), data)?, self.labels.clone(), self.classes, self.split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Blobs,
    Rings,
    TinyImages,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "rings" => Ok(SynthKind::Rings),
            "tiny_images" => Ok(SynthKind::TinyImages),
            other => Err(Error::Config(format!(
                "unknown synthetic dataset '{other}' (expected blobs, rings or tiny_images)"
            ))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Rings => "rings",
            SynthKind::TinyImages => "tiny_images",
        })
    }
}

/// Side length of generated images.
pub const IMAGE_SIDE: usize = 8;

/// Test-set size paired with a training set of `n` samples.
pub fn test_size(n: usize, classes: usize) -> usize {
    (n / 4).max(classes)
}

/// Training set of `n` samples plus a test set of [`test_size`] samples,
/// both class-balanced within one sample. Vector kinds produce `[N, 2]`,
/// `tiny_images` produces `[N, channels, 8, 8]`.
pub fn gen_synthetic(
    kind: SynthKind,
    classes: usize,
    n: usize,
    seed: u64,
    noise: f64,
    channels: usize,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Config(format!("need at least one sample per class: N={n} < K={classes}")));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Config(format!("noise must be finite and nonnegative, got {noise}")));
    }
    if kind == SynthKind::TinyImages && channels == 0 {
        return Err(Error::Config("tiny_images needs at least one channel".into()));
    }
    let templates = match kind {
        SynthKind::TinyImages => image_templates(classes, channels, &mut substream(seed, "data-templates")),
        _ => Vec::new(),
    };
    let make = |count: usize, split: Split, purpose: &str| -> Result<Dataset> {
        let mut rng = substream(seed, purpose);
        let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::new();
        for &label in &labels {
            match kind {
                SynthKind::Blobs => blob_point(label, classes, noise, &mut rng, &mut data),
                SynthKind::Rings => ring_point(label, noise, &mut rng, &mut data),
                SynthKind::TinyImages => image_sample(&templates[label], channels, noise, &mut rng, &mut data),
            }
        }
        let shape = match kind {
            SynthKind::TinyImages => vec![count, channels, IMAGE_SIDE, IMAGE_SIDE],
            _ => vec![count, 2],
        };
        Dataset::new(Tensor::new(&shape, data)?, Targets(labels), classes, split)
    };
    Ok((make(n, Split::Train, "data-train")?, make(test_size(n, classes), Split::Test, "data-test")?))
}

/// Centroid of blob `k`: evenly spaced on a circle of radius 3.
pub fn blob_centroid(k: usize, classes: usize) -> [f64; 2] {
    let a = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
    [3.0 * a.cos(), 3.0 * a.sin()]
}

fn blob_point(label: usize, classes: usize, noise: f64, rng: &mut SeededRng, out: &mut Vec<f64>) {
    let c = blob_centroid(label, classes);
    out.push(c[0] + noise * normal(rng));
    out.push(c[1] + noise * normal(rng));
}

fn ring_point(label: usize, noise: f64, rng: &mut SeededRng, out: &mut Vec<f64>) {
    let angle = uniform_sym(rng, std::f64::consts::PI);
    let r = 1.0 + label as f64 + noise * normal(rng);
    out.push(r * angle.cos());
    out.push(r * angle.sin());
}

/// One smooth pattern per class: a shared background plus a few
/// class-specific Gaussian bumps, so classes overlap but stay separable.
fn image_templates(classes: usize, channels: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let side = IMAGE_SIDE as f64;
    let bump = |cx: f64, cy: f64, width: f64, amp: f64, img: &mut [f64]| {
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                img[y * IMAGE_SIDE + x] += amp * (-d2 / (2.0 * width * width)).exp();
            }
        }
    };
    let centre = (side - 1.0) / 2.0;
    let mut background = vec![vec![0.0; IMAGE_SIDE * IMAGE_SIDE]; channels];
    for plane in background.iter_mut() {
        for _ in 0..2 {
            let (cx, cy) = (centre + uniform_sym(rng, 3.0), centre + uniform_sym(rng, 3.0));
            bump(cx, cy, 2.0, 0.5, plane);
        }
    }
    (0..classes)
        .map(|_| {
            let mut img = Vec::with_capacity(channels * IMAGE_SIDE * IMAGE_SIDE);
            for plane in &background {
                let mut p = plane.clone();
                for _ in 0..3 {
                    let (cx, cy) = (centre + uniform_sym(rng, 3.0), centre + uniform_sym(rng, 3.0));
                    let amp = uniform_sym(rng, 1.0);
                    bump(cx, cy, 1.0 + 0.5 * uniform_sym(rng, 1.0).abs(), amp, &mut p);
                }
                img.extend(p);
            }
            img
        })
        .collect()
}

/// Template under a random circular shift of at most one pixel, random
/// contrast in [0.6, 1.4], and additive Gaussian noise.
fn image_sample(template: &[f64], channels: usize, noise: f64, rng: &mut SeededRng, out: &mut Vec<f64>) {
    let side = IMAGE_SIDE as i64;
    let dx = (uniform_sym(rng, 1.5).round() as i64).clamp(-1, 1);
    let dy = (uniform_sym(rng, 1.5).round() as i64).clamp(-1, 1);
    let contrast = 1.0 + uniform_sym(rng, 0.4);
    for c in 0..channels {
        let plane = &template[c * IMAGE_SIDE * IMAGE_SIDE..(c + 1) * IMAGE_SIDE * IMAGE_SIDE];
        for y in 0..side {
            for x in 0..side {
                let sy = (y - dy).rem_euclid(side) as usize;
                let sx = (x - dx).rem_euclid(side) as usize;
                out.push(contrast * plane[sy * IMAGE_SIDE + sx] + noise * normal(rng));
            }
        }
    }
}

/// Format code in the third header byte.
pub const IDX_TYPE_CODE: u8 = 0x0D;

/// Read an IDX-like file (see the module docs). The class count is the
/// largest label plus one, at least 2.
pub fn load_idx_like(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_idx_like(&bytes)
}

pub fn parse_idx_like(bytes: &[u8]) -> Result<Dataset> {
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(Error::Format {
                offset: bytes.len() as u64,
                detail: format!("file truncated while reading {what} ({} bytes needed at {offset})", len),
            })
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_TYPE_CODE {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3]),
        });
    }
    let ndim = bytes[3] as usize;
    if !(2..=4).contains(&ndim) {
        return Err(Error::Format { offset: 3, detail: format!("unsupported dimension count {ndim}") });
    }
    need(4, 4 * ndim, "dimensions")?;
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Format { offset: (4 + 4 * i) as u64, detail: "zero dimension".into() });
    }
    let n = dims[0];
    let volume: usize = dims[1..].iter().product();
    let pixels_at = 4 + 4 * ndim;
    let labels_at = pixels_at + n * volume;
    need(pixels_at, n * volume, "pixels")?;
    need(labels_at, n, "labels")?;
    if bytes.len() != labels_at + n {
        return Err(Error::Format {
            offset: (labels_at + n) as u64,
            detail: format!("{} trailing bytes", bytes.len() - labels_at - n),
        });
    }
    let data = bytes[pixels_at..labels_at].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = bytes[labels_at..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let shape = match ndim {
        2 => vec![n, dims[1]],
        3 => vec![n, 1, dims[1], dims[2]],
        _ => dims.clone(),
    };
    Dataset::new(Tensor::new(&shape, data)?, Targets(labels), classes, Split::Train)
}

/// Serialize samples in `[0, 1]` and labels to the IDX-like layout.
pub fn encode_idx_like(shape: &[usize], pixels: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    if !(2..=4).contains(&shape.len()) || pixels.len() != shape.iter().product::<usize>() || labels.len() != shape[0] {
        return Err(Error::Usage(format!(
            "cannot encode {} pixels and {} labels as {shape:?}",
            pixels.len(),
            labels.len()
        )));
    }
    let mut out = vec![0, 0, IDX_TYPE_CODE, shape.len() as u8];
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out.extend_from_slice(labels);
    Ok(out)
}
