//! Digit-plane decomposition of signed weight codes across multi-bit cells.
//!
//! A `b`-bit two's-complement code is stored in `b / c` cells of `c` bits.
//! The low cells hold unsigned base-`2^c` digits and the top cell holds the
//! signed top digit, so `code = sum_k plane[k] * 2^(c*k)` holds exactly and
//! per-plane MACs recombine by shift-and-add without correction terms.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlanes {
    planes: Vec<Vec<i64>>,
    cell_bits: u32,
    bits: u32,
}

/// Number of cells needed for `bits`-bit codes with `cell_bits` per cell.
pub fn n_split(bits: u32, cell_bits: u32) -> Result<usize> {
    if cell_bits == 0 || bits == 0 || bits % cell_bits != 0 {
        return Err(Error::CellBitsMismatch {
            bits,
            cell: cell_bits,
        });
    }
    Ok((bits / cell_bits) as usize)
}

/// Digit `k` of `code` for an `n`-cell split with `cell_bits` per cell.
#[inline]
pub fn digit(code: i64, cell_bits: u32, k: usize, n: usize) -> i64 {
    let shift = cell_bits * k as u32;
    if k + 1 == n {
        code >> shift
    } else {
        (code >> shift) & ((1i64 << cell_bits) - 1)
    }
}

fn check_code(code: i64, bits: u32) -> Result<()> {
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    if code < lo || code > hi {
        return Err(Error::CodeOutOfRange { code, bits });
    }
    Ok(())
}

pub fn split(codes: &[i64], bits: u32, cell_bits: u32) -> Result<SplitPlanes> {
    let n = n_split(bits, cell_bits)?;
    for &c in codes {
        check_code(c, bits)?;
    }
    let planes = (0..n)
        .map(|k| codes.iter().map(|&c| digit(c, cell_bits, k, n)).collect())
        .collect();
    Ok(SplitPlanes {
        planes,
        cell_bits,
        bits,
    })
}

pub fn recombine(planes: &SplitPlanes) -> Vec<i64> {
    let len = planes.planes.first().map_or(0, Vec::len);
    let mut out = vec![0i64; len];
    for (k, plane) in planes.planes.iter().enumerate() {
        let shift = planes.cell_bits * k as u32;
        for (o, &d) in out.iter_mut().zip(plane) {
            *o += d << shift;
        }
    }
    out
}

/// `sum_k psums[k] * 2^(c*k)`.
pub fn shift_add(psums_per_split: &[Vec<f64>], cell_bits: u32) -> Result<Vec<f64>> {
    let len = psums_per_split.first().map_or(0, Vec::len);
    if psums_per_split.iter().any(|p| p.len() != len) {
        return Err(Error::ShapeMismatch("per-split partial sums differ in length".into()));
    }
    let mut out = vec![0.0; len];
    for (k, psum) in psums_per_split.iter().enumerate() {
        let weight = (1u64 << (cell_bits as u64 * k as u64)) as f64;
        for (o, &p) in out.iter_mut().zip(psum) {
            *o += p * weight;
        }
    }
    Ok(out)
}

impl SplitPlanes {
    /// Builds planes from explicit digits, checking the per-plane ranges.
    pub fn from_planes(planes: Vec<Vec<i64>>, bits: u32, cell_bits: u32) -> Result<Self> {
        let n = n_split(bits, cell_bits)?;
        if planes.len() != n {
            return Err(Error::ShapeMismatch(format!("{} planes for {} splits", planes.len(), n)));
        }
        let len = planes.first().map_or(0, Vec::len);
        let top_lo = -(1i64 << (cell_bits - 1));
        let top_hi = (1i64 << (cell_bits - 1)) - 1;
        let low_hi = (1i64 << cell_bits) - 1;
        for (k, plane) in planes.iter().enumerate() {
            if plane.len() != len {
                return Err(Error::ShapeMismatch("planes differ in length".into()));
            }
            let (lo, hi) = if k + 1 == n { (top_lo, top_hi) } else { (0, low_hi) };
            if let Some(&d) = plane.iter().find(|&&d| d < lo || d > hi) {
                return Err(Error::CodeOutOfRange { code: d, bits: cell_bits });
            }
        }
        Ok(Self {
            planes,
            cell_bits,
            bits,
        })
    }

    pub fn planes(&self) -> &[Vec<i64>] {
        &self.planes
    }

    pub fn cell_bits(&self) -> u32 {
        self.cell_bits
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn n_split(&self) -> usize {
        self.planes.len()
    }
}
