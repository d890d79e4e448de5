//! Uniform quantization with learnable scale factors (LSQ) at layer, array
//! or column granularity.
//!
//! A [`ScaleTensor`] pairs a vector of positive scales with a [`GroupMap`]
//! that assigns every element of the quantized tensor to exactly one scale.
//! All functions here are pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The grouping level at which one scale factor is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    Layer,
    Array,
    Column,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Layer, Granularity::Array, Granularity::Column];

    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Layer => "Layer",
            Granularity::Array => "Array",
            Granularity::Column => "Column",
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "layer" => Ok(Granularity::Layer),
            "array" => Ok(Granularity::Array),
            "column" => Ok(Granularity::Column),
            other => Err(Error::InvalidConfig(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Bit-width, signedness and granularity of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    bits: u32,
    signed: bool,
    granularity: Granularity,
}

impl QuantSpec {
    pub const MAX_BITS: u32 = 48;

    pub fn new(bits: u32, signed: bool, granularity: Granularity) -> Result<Self> {
        let min = if signed { 2 } else { 1 };
        if bits < min || bits > Self::MAX_BITS {
            return Err(Error::InvalidConfig(format!(
                "{} quantizer needs {}..={} bits, got {}",
                if signed { "signed" } else { "unsigned" },
                min,
                Self::MAX_BITS,
                bits
            )));
        }
        Ok(Self {
            bits,
            signed,
            granularity,
        })
    }

    pub fn signed(bits: u32, granularity: Granularity) -> Result<Self> {
        Self::new(bits, true, granularity)
    }

    pub fn unsigned(bits: u32, granularity: Granularity) -> Result<Self> {
        Self::new(bits, false, granularity)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Magnitude of the most negative code.
    pub fn q_neg(&self) -> i64 {
        if self.signed {
            1i64 << (self.bits - 1)
        } else {
            0
        }
    }

    /// Largest positive code.
    pub fn q_pos(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }
}

/// Total map from flattened element index to scale index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMap {
    group_of: Vec<usize>,
    n_groups: usize,
}

impl GroupMap {
    pub fn new(group_of: Vec<usize>, n_groups: usize) -> Result<Self> {
        if let Some(&index) = group_of.iter().find(|&&g| g >= n_groups) {
            return Err(Error::GroupOutOfRange { index, n_groups });
        }
        Ok(Self { group_of, n_groups })
    }

    /// Every element in one group.
    pub fn single(len: usize) -> Self {
        Self {
            group_of: vec![0; len],
            n_groups: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    #[inline]
    pub fn group(&self, element: usize) -> usize {
        self.group_of[element]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.group_of
    }

    /// Number of elements in each group.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_groups];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    fn check_nonempty(&self) -> Result<()> {
        match self.sizes().iter().position(|&n| n == 0) {
            Some(group) => Err(Error::EmptyScaleGroup { group }),
            None => Ok(()),
        }
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.group_of.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} has {} elements but the group map covers {}",
                what,
                len,
                self.group_of.len()
            )));
        }
        Ok(())
    }
}

/// Positive scale factors plus the element-to-scale assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTensor {
    values: Vec<f64>,
    groups: GroupMap,
}

impl ScaleTensor {
    pub fn new(values: Vec<f64>, groups: GroupMap) -> Result<Self> {
        if values.len() != groups.n_groups() {
            return Err(Error::ShapeMismatch(format!(
                "{} scale values for {} groups",
                values.len(),
                groups.n_groups()
            )));
        }
        if let Some((group, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::InvalidScale { group, value });
        }
        groups.check_nonempty()?;
        Ok(Self { values, groups })
    }

    /// A scale tensor where every group has the same value.
    pub fn uniform(value: f64, groups: GroupMap) -> Result<Self> {
        let n = groups.n_groups();
        Self::new(vec![value; n], groups)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn groups(&self) -> &GroupMap {
        &self.groups
    }

    #[inline]
    pub fn scale_of(&self, element: usize) -> f64 {
        self.values[self.groups.group(element)]
    }

    /// Replaces the values, keeping the group map. Values must stay positive.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        *self = Self::new(values, self.groups.clone())?;
        Ok(())
    }
}

/// LSQ initialization: `2 * mean(|x|) / sqrt(q_pos)` per group; all-zero
/// groups get scale 1.
pub fn init_scales(x: &[f64], spec: &QuantSpec, groups: &GroupMap) -> Result<ScaleTensor> {
    groups.check_len(x.len(), "input")?;
    groups.check_nonempty()?;
    let mut sum = vec![0.0f64; groups.n_groups()];
    let sizes = groups.sizes();
    for (i, &v) in x.iter().enumerate() {
        sum[groups.group(i)] += v.abs();
    }
    let root = (spec.q_pos() as f64).sqrt();
    let values = sum
        .iter()
        .zip(&sizes)
        .map(|(&s, &n)| {
            let v = 2.0 * (s / n as f64) / root;
            if v > 0.0 && v.is_finite() {
                v
            } else {
                1.0
            }
        })
        .collect();
    ScaleTensor::new(values, groups.clone())
}

/// Max-abs calibration: `max(|x|) / q_pos` per group, so the largest element
/// of each group maps to code magnitude `q_pos` without clipping. All-zero
/// groups get scale 1.
pub fn calibrate_max_abs(x: &[f64], spec: &QuantSpec, groups: &GroupMap) -> Result<ScaleTensor> {
    groups.check_len(x.len(), "input")?;
    groups.check_nonempty()?;
    let mut max = vec![0.0f64; groups.n_groups()];
    for (i, &v) in x.iter().enumerate() {
        let g = groups.group(i);
        max[g] = max[g].max(v.abs());
    }
    let q_pos = spec.q_pos() as f64;
    let values = max
        .iter()
        .map(|&m| if m > 0.0 { m / q_pos } else { 1.0 })
        .collect();
    ScaleTensor::new(values, groups.clone())
}

/// `clamp(round(z), -q_neg, q_pos)` with round-half-away-from-zero.
#[inline]
pub fn quantize_scaled(z: f64, spec: &QuantSpec) -> i64 {
    let r = z.round();
    let lo = -(spec.q_neg() as f64);
    let hi = spec.q_pos() as f64;
    r.clamp(lo, hi) as i64
}

#[inline]
pub fn quantize_value(x: f64, scale: f64, spec: &QuantSpec) -> i64 {
    quantize_scaled(x / scale, spec)
}

pub fn quantize(x: &[f64], s: &ScaleTensor, spec: &QuantSpec) -> Result<Vec<i64>> {
    s.groups.check_len(x.len(), "input")?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| quantize_value(v, s.scale_of(i), spec))
        .collect())
}

pub fn dequantize(q: &[i64], s: &ScaleTensor) -> Result<Vec<f64>> {
    s.groups.check_len(q.len(), "codes")?;
    Ok(q.iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * s.scale_of(i))
        .collect())
}

/// Per-element derivative of the fake-quantized value `q(x/s) * s` with
/// respect to `s` under the straight-through estimator.
#[inline]
pub fn lsq_local_grad(z: f64, spec: &QuantSpec) -> f64 {
    let lo = -(spec.q_neg() as f64);
    let hi = spec.q_pos() as f64;
    if z <= lo {
        lo
    } else if z >= hi {
        hi
    } else {
        z.round() - z
    }
}

/// Whether `z = x / s` falls inside the closed quantization range.
#[inline]
pub fn ste_pass(z: f64, spec: &QuantSpec) -> bool {
    z >= -(spec.q_neg() as f64) && z <= spec.q_pos() as f64
}

/// LSQ gradient of the loss with respect to each scale group, including the
/// gradient scale `1 / sqrt(N_g * q_pos)`.
pub fn scale_grad(x: &[f64], s: &ScaleTensor, spec: &QuantSpec, upstream: &[f64]) -> Result<Vec<f64>> {
    s.groups.check_len(x.len(), "input")?;
    s.groups.check_len(upstream.len(), "upstream gradient")?;
    let mut grad = vec![0.0f64; s.groups.n_groups()];
    for (i, (&v, &u)) in x.iter().zip(upstream).enumerate() {
        let g = s.groups.group(i);
        grad[g] += u * lsq_local_grad(v / s.values[g], spec);
    }
    let q_pos = spec.q_pos() as f64;
    for (g, n) in grad.iter_mut().zip(s.groups.sizes()) {
        *g /= (n as f64 * q_pos).sqrt();
    }
    Ok(grad)
}

/// Straight-through gradient for the quantizer input: passes `upstream`
/// where `-q_neg <= x/s <= q_pos`, zero elsewhere.
pub fn input_grad_ste(x: &[f64], s: &ScaleTensor, spec: &QuantSpec, upstream: &[f64]) -> Result<Vec<f64>> {
    s.groups.check_len(x.len(), "input")?;
    s.groups.check_len(upstream.len(), "upstream gradient")?;
    Ok(x.iter()
        .zip(upstream)
        .enumerate()
        .map(|(i, (&v, &u))| if ste_pass(v / s.scale_of(i), spec) { u } else { 0.0 })
        .collect())
}
