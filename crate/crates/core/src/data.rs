//! Datasets: a seeded synthetic two-class image task and the CIFAR-10
//! binary format.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [n, ..] = images.dims4()?;
        if n != labels.len() {
            return Err(Error::ShapeMismatch(format!("{n} images, {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ShapeMismatch(format!("label {l} >= {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let sz = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * sz);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * sz..(i + 1) * sz]);
        }
        let t = Tensor::from_vec(&[idx.len(), c, h, w], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Examples of all parts in order; parts must agree on image shape and
    /// class count.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let (c, h, w) = first.image_shape();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != (c, h, w) || p.num_classes != first.num_classes {
                return Err(Error::ShapeMismatch("datasets differ in image shape or classes".into()));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(Tensor::from_vec(&[labels.len(), c, h, w], data)?, labels, first.num_classes)
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Two classes of oriented Gaussian blobs: class 0 elongated along one
/// axis, class 1 along the other, with random rotation jitter, position
/// jitter, low-frequency background stripes and pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    /// Max rotation away from the class axis, radians.
    pub angle_jitter: f64,
    /// Max blob-center offset from the image center, pixels.
    pub center_jitter: f64,
    /// Amplitude of the background stripes.
    pub structured_noise: f64,
    /// Std of the i.i.d. pixel noise.
    pub pixel_noise: f64,
    /// Mean background intensity.
    pub background: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 1024,
            n_test: 512,
            size: 16,
            sigma_major: 3.5,
            sigma_minor: 1.6,
            angle_jitter: 0.6,
            center_jitter: 3.0,
            structured_noise: 1.0,
            pixel_noise: 0.9,
            background: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.size < 4 {
            return Err(Error::InvalidConfig("synthetic dataset needs n_train, n_test >= 1 and size >= 4".into()));
        }
        let vals = [
            self.sigma_major,
            self.sigma_minor,
            self.angle_jitter,
            self.center_jitter,
            self.structured_noise,
            self.pixel_noise,
            self.background,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.sigma_minor == 0.0 {
            return Err(Error::InvalidConfig("synthetic dataset parameters must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn synth_image(spec: &SyntheticSpec, label: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = spec.size;
    let mid = (n as f64 - 1.0) / 2.0;
    let angle = label as f64 * std::f64::consts::FRAC_PI_2 + rng.random_range(-1.0..=1.0) * spec.angle_jitter;
    let (sin, cos) = angle.sin_cos();
    let cx = mid + rng.random_range(-1.0..=1.0) * spec.center_jitter;
    let cy = mid + rng.random_range(-1.0..=1.0) * spec.center_jitter;
    let stripes: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let freq = rng.random_range(0.15..0.6);
            let dir = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * dir.cos(), freq * dir.sin(), phase, rng.random_range(0.5..1.0))
        })
        .collect();
    let mut img = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let blob = (-(u * u) / (2.0 * spec.sigma_major.powi(2)) - (v * v) / (2.0 * spec.sigma_minor.powi(2))).exp();
            let bg: f64 = stripes
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                * spec.structured_noise
                / 2.0;
            let z: f64 = StandardNormal.sample(rng);
            let val = spec.background + 0.6 * blob + 0.3 * bg + 0.3 * spec.pixel_noise * z;
            img.push(val.clamp(0.0, 1.0));
        }
    }
    img
}

fn synth_split(spec: &SyntheticSpec, n: usize, seed: u64, split: &str) -> Result<Dataset> {
    let mut rng = seeds::rng(seed, split, &[]);
    let mut data = Vec::with_capacity(n * spec.size * spec.size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        data.extend(synth_image(spec, label, &mut rng));
        labels.push(label);
    }
    Dataset::new(Tensor::from_vec(&[n, 1, spec.size, spec.size], data)?, labels, 2)
}

/// `(train, test)` drawn from independent streams of `seed`.
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    Ok((
        synth_split(spec, spec.n_train, seed, "train")?,
        synth_split(spec, spec.n_test, seed, "test")?,
    ))
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (1024 R, 1024 G, 1024 B, row-major), scaled to `[0, 1]`.
pub fn parse_cifar(bytes: &[u8], limit: Option<usize>) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::TruncatedRecord {
            offset,
            size: bytes.len(),
        });
    }
    let mut n = bytes.len() / CIFAR_RECORD;
    if let Some(l) = limit {
        n = n.min(l);
    }
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], data)?, labels, 10)
}

pub fn load_cifar(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar(&bytes, limit)
}
