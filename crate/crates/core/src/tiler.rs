//! Kernel-preserving tiling of a convolution layer onto fixed `R x C` arrays.
//!
//! Each stretched kernel (`K*K` rows of one input channel) lives wholly
//! inside one array, so every array holds an ordinary 4-D convolution weight
//! over a contiguous range of input channels and output channels. All arrays
//! then run as one grouped convolution.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Tensor};

/// Word lines (`rows`) and bit lines (`cols`) of one array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayShape {
    pub rows: usize,
    pub cols: usize,
}

impl ArrayShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!("array shape {rows}x{cols} must be at least 1x1")));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilingPlan {
    c_in: usize,
    c_out: usize,
    k: usize,
    array: ArrayShape,
    channels_per_array: usize,
    oc_per_array: usize,
    n_array_rows: usize,
    n_array_cols: usize,
    /// Prefix sums of mapped output channels, indexed by array id.
    col_offsets: Vec<usize>,
}

pub fn plan_tiling(c_in: usize, c_out: usize, k: usize, shape: ArrayShape) -> Result<TilingPlan> {
    if c_in == 0 || c_out == 0 || k == 0 {
        return Err(Error::InvalidConfig(format!(
            "layer dims must be positive: C_in={c_in}, C_out={c_out}, K={k}"
        )));
    }
    let kk = k * k;
    if kk > shape.rows {
        return Err(Error::KernelTooLarge {
            k,
            needed: kk,
            rows: shape.rows,
        });
    }
    let channels_per_array = (shape.rows / kk).min(c_in);
    let oc_per_array = shape.cols.min(c_out);
    let n_array_rows = c_in.div_ceil(channels_per_array);
    let n_array_cols = c_out.div_ceil(oc_per_array);
    let mut plan = TilingPlan {
        c_in,
        c_out,
        k,
        array: shape,
        channels_per_array,
        oc_per_array,
        n_array_rows,
        n_array_cols,
        col_offsets: Vec::new(),
    };
    let mut offsets = Vec::with_capacity(plan.n_array() + 1);
    offsets.push(0);
    for a in 0..plan.n_array() {
        offsets.push(offsets[a] + plan.mapped_oc(a));
    }
    plan.col_offsets = offsets;
    Ok(plan)
}

impl TilingPlan {
    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn array_shape(&self) -> ArrayShape {
        self.array
    }

    pub fn channels_per_array(&self) -> usize {
        self.channels_per_array
    }

    /// Output-channel capacity of one array (`n_oc`).
    pub fn oc_per_array(&self) -> usize {
        self.oc_per_array
    }

    pub fn n_array_rows(&self) -> usize {
        self.n_array_rows
    }

    pub fn n_array_cols(&self) -> usize {
        self.n_array_cols
    }

    pub fn n_array(&self) -> usize {
        self.n_array_rows * self.n_array_cols
    }

    /// Arrays are numbered row-tile major: `a = row_tile * n_array_cols + col_tile`.
    pub fn array_id(&self, row_tile: usize, col_tile: usize) -> usize {
        row_tile * self.n_array_cols + col_tile
    }

    pub fn tile_of(&self, a: usize) -> (usize, usize) {
        (a / self.n_array_cols, a % self.n_array_cols)
    }

    /// Input channels mapped onto array `a`.
    pub fn in_range(&self, a: usize) -> Range<usize> {
        let (r, _) = self.tile_of(a);
        let start = r * self.channels_per_array;
        start..(start + self.channels_per_array).min(self.c_in)
    }

    /// Output channels mapped onto array `a`.
    pub fn out_range(&self, a: usize) -> Range<usize> {
        let (_, t) = self.tile_of(a);
        let start = t * self.oc_per_array;
        start..(start + self.oc_per_array).min(self.c_out)
    }

    pub fn mapped_oc(&self, a: usize) -> usize {
        self.out_range(a).len()
    }

    /// Word lines used in array `a`; the remaining rows stay idle.
    pub fn rows_used(&self, a: usize) -> usize {
        self.in_range(a).len() * self.k * self.k
    }

    /// Array holding input channel `c` and output channel `o`, with `o`'s
    /// local index in that array.
    pub fn locate(&self, c: usize, o: usize) -> (usize, usize) {
        let r = c / self.channels_per_array;
        let t = o / self.oc_per_array;
        (self.array_id(r, t), o - t * self.oc_per_array)
    }

    /// Mapped (non-padded) output channels over all arrays.
    pub fn mapped_columns(&self) -> usize {
        *self.col_offsets.last().unwrap_or(&0)
    }

    /// Total distinct column ids for a given bit-split count.
    pub fn n_columns(&self, n_split: usize) -> usize {
        self.mapped_columns() * n_split
    }

    /// Checks that every array holds whole `K*K` kernels within its rows.
    pub fn check_kernel_integrity(&self) -> Result<()> {
        let kk = self.k * self.k;
        let mut seen = vec![0usize; self.c_in];
        for a in 0..self.n_array() {
            if self.rows_used(a) > self.array.rows || self.rows_used(a) % kk != 0 {
                return Err(Error::InvalidConfig(format!("array {a} splits a kernel")));
            }
            if self.mapped_oc(a) > self.array.cols {
                return Err(Error::InvalidConfig(format!("array {a} exceeds its columns")));
            }
            if self.tile_of(a).1 == 0 {
                for c in self.in_range(a) {
                    seen[c] += 1;
                }
            }
        }
        if seen.iter().any(|&n| n != 1) {
            return Err(Error::InvalidConfig("input channels not covered exactly once".into()));
        }
        Ok(())
    }
}

/// Stable column id for (array, local output channel, bit-split).
pub fn column_index(plan: &TilingPlan, a: usize, o: usize, k: usize, n_split: usize) -> Result<usize> {
    if a >= plan.n_array() {
        return Err(Error::IndexOutOfRange(format!("array {a} of {}", plan.n_array())));
    }
    if o >= plan.mapped_oc(a) {
        return Err(Error::IndexOutOfRange(format!(
            "output channel {o} of {} in array {a}",
            plan.mapped_oc(a)
        )));
    }
    if k >= n_split {
        return Err(Error::IndexOutOfRange(format!("split {k} of {n_split}")));
    }
    Ok(column_id_unchecked(plan, a, o, k, n_split))
}

#[inline]
pub(crate) fn column_id_unchecked(plan: &TilingPlan, a: usize, o: usize, k: usize, n_split: usize) -> usize {
    (plan.col_offsets[a] + o) * n_split + k
}

/// Inverse of [`column_index`]: `(array, local output channel, split)`.
pub fn column_coords(plan: &TilingPlan, id: usize, n_split: usize) -> Result<(usize, usize, usize)> {
    if id >= plan.n_columns(n_split) {
        return Err(Error::IndexOutOfRange(format!("column {id}")));
    }
    let k = id % n_split;
    let mapped = id / n_split;
    let a = plan.col_offsets.partition_point(|&off| off <= mapped) - 1;
    Ok((a, mapped - plan.col_offsets[a], k))
}

/// Per-array weight blocks stacked as `[n_array, oc_per_array, channels_per_array, K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayBlocks {
    data: Vec<f64>,
    n_array: usize,
    oc: usize,
    ch: usize,
    k: usize,
}

impl ArrayBlocks {
    pub fn zeros(plan: &TilingPlan) -> Self {
        let (oc, ch, k) = (plan.oc_per_array, plan.channels_per_array, plan.k);
        Self {
            data: vec![0.0; plan.n_array() * oc * ch * k * k],
            n_array: plan.n_array(),
            oc,
            ch,
            k,
        }
    }

    pub fn block_len(&self) -> usize {
        self.oc * self.ch * self.k * self.k
    }

    /// Array `a`'s weight as a flat `[oc_per_array, channels_per_array, K, K]`.
    pub fn block(&self, a: usize) -> &[f64] {
        let n = self.block_len();
        &self.data[a * n..(a + 1) * n]
    }

    pub fn block_tensor(&self, a: usize) -> Tensor {
        Tensor::from_vec(&[self.oc, self.ch, self.k, self.k], self.block(a).to_vec())
            .expect("block shape")
    }

    pub fn n_array(&self) -> usize {
        self.n_array
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_weight_len(w: &[f64], plan: &TilingPlan) -> Result<()> {
    let expected = plan.c_out * plan.c_in * plan.k * plan.k;
    if w.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "weight has {} elements, plan expects [{}, {}, {}, {}]",
            w.len(),
            plan.c_out,
            plan.c_in,
            plan.k,
            plan.k
        )));
    }
    Ok(())
}

/// Slices a `[C_out, C_in, K, K]` weight into zero-padded per-array blocks.
pub fn map_weights(w: &[f64], plan: &TilingPlan) -> Result<ArrayBlocks> {
    check_weight_len(w, plan)?;
    let mut blocks = ArrayBlocks::zeros(plan);
    let kk = plan.k * plan.k;
    let bl = blocks.block_len();
    for a in 0..plan.n_array() {
        let (ins, outs) = (plan.in_range(a), plan.out_range(a));
        for (ol, o) in outs.clone().enumerate() {
            let src = o * plan.c_in * kk + ins.start * kk;
            let dst = a * bl + ol * plan.channels_per_array * kk;
            let n = ins.len() * kk;
            blocks.data[dst..dst + n].copy_from_slice(&w[src..src + n]);
        }
    }
    Ok(blocks)
}

/// Inverse of [`map_weights`]: writes the mapped part of each block back into
/// a `[C_out, C_in, K, K]` weight.
pub fn unmap_weights(blocks: &ArrayBlocks, plan: &TilingPlan) -> Vec<f64> {
    let kk = plan.k * plan.k;
    let mut w = vec![0.0; plan.c_out * plan.c_in * kk];
    let bl = blocks.block_len();
    for a in 0..plan.n_array() {
        let (ins, outs) = (plan.in_range(a), plan.out_range(a));
        for (ol, o) in outs.enumerate() {
            let dst = o * plan.c_in * kk + ins.start * kk;
            let src = a * bl + ol * plan.channels_per_array * kk;
            let n = ins.len() * kk;
            w[dst..dst + n].copy_from_slice(&blocks.data[src..src + n]);
        }
    }
    w
}

/// Patch matrix of one `[C, H, W]` sample: rows are `c*K*K + kh*K + kw`,
/// columns are output positions.
pub fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    let ho = conv_out_dim(h, k, stride, pad)?;
    let wo = conv_out_dim(w, k, stride, pad)?;
    let p = ho * wo;
    let mut cols = vec![0.0; c * k * k * p];
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[oh * wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((cols, ho, wo))
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to the image.
pub fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) -> Result<()> {
    let ho = conv_out_dim(h, k, stride, pad)?;
    let wo = conv_out_dim(w, k, stride, pad)?;
    let p = ho * wo;
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            out[(ci * h + ih as usize) * w + iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Conventional im2col convolution: patch matrix times stretched-kernel
/// weight matrix. `w` is `[C_out, C_in, K, K]`, `x` is NCHW.
pub fn im2col_reference(w: &Tensor, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd] = x.dims4()?;
    let [co, ci, k, k2] = w.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let ho = conv_out_dim(h, k, stride, pad)?;
    let wo = conv_out_dim(wd, k, stride, pad)?;
    let p = ho * wo;
    let rows = c * k * k;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let sample = c * h * wd;
    for b in 0..n {
        let (cols, _, _) = im2col(&x.data()[b * sample..(b + 1) * sample], (c, h, wd), k, stride, pad)?;
        let dst = &mut out.data_mut()[b * co * p..(b + 1) * co * p];
        for o in 0..co {
            let wrow = &w.data()[o * rows..(o + 1) * rows];
            let acc = &mut dst[o * p..(o + 1) * p];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (a, &cv) in acc.iter_mut().zip(&cols[r * p..(r + 1) * p]) {
                    *a += wv * cv;
                }
            }
        }
    }
    Ok(out)
}

/// All arrays as one grouped convolution over a precomputed patch matrix.
/// Returns `[n_array * oc_per_array, positions]` for one sample; padded
/// output slots stay zero.
pub fn grouped_conv_cols(blocks: &ArrayBlocks, plan: &TilingPlan, cols: &[f64], p: usize) -> Vec<f64> {
    let kk = plan.k * plan.k;
    let bl = blocks.block_len();
    let ch_rows = plan.channels_per_array * kk;
    let mut out = vec![0.0; plan.n_array() * plan.oc_per_array * p];
    for a in 0..plan.n_array() {
        let r0 = plan.in_range(a).start * kk;
        let used = plan.rows_used(a);
        for ol in 0..plan.mapped_oc(a) {
            let wrow = &blocks.data[a * bl + ol * ch_rows..a * bl + ol * ch_rows + used];
            let acc = &mut out[(a * plan.oc_per_array + ol) * p..(a * plan.oc_per_array + ol + 1) * p];
            for (j, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let row = &cols[(r0 + j) * p..(r0 + j + 1) * p];
                for (acc_v, &cv) in acc.iter_mut().zip(row) {
                    *acc_v += wv * cv;
                }
            }
        }
    }
    out
}

/// Backward of [`grouped_conv_cols`] for one sample: accumulates block
/// gradients into `d_blocks` and patch-matrix gradients into `d_cols`.
pub fn grouped_conv_cols_backward(
    blocks: &ArrayBlocks,
    plan: &TilingPlan,
    cols: &[f64],
    p: usize,
    d_out: &[f64],
    d_blocks: &mut ArrayBlocks,
    d_cols: Option<&mut [f64]>,
) {
    let kk = plan.k * plan.k;
    let bl = blocks.block_len();
    let ch_rows = plan.channels_per_array * kk;
    let mut d_cols = d_cols;
    for a in 0..plan.n_array() {
        let r0 = plan.in_range(a).start * kk;
        let used = plan.rows_used(a);
        for ol in 0..plan.mapped_oc(a) {
            let g = &d_out[(a * plan.oc_per_array + ol) * p..(a * plan.oc_per_array + ol + 1) * p];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let base = a * bl + ol * ch_rows;
            for j in 0..used {
                let row = &cols[(r0 + j) * p..(r0 + j + 1) * p];
                d_blocks.data[base + j] += g.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
            }
            if let Some(dc) = d_cols.as_deref_mut() {
                for j in 0..used {
                    let wv = blocks.data[base + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, &gv) in dc[(r0 + j) * p..(r0 + j + 1) * p].iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
}

/// Grouped convolution of an NCHW input with per-array blocks:
/// `[N, n_array * oc_per_array, Ho, Wo]` partial sums.
pub fn grouped_conv(x: &Tensor, blocks: &ArrayBlocks, plan: &TilingPlan, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if c != plan.c_in {
        return Err(Error::ShapeMismatch(format!("input has {c} channels, plan expects {}", plan.c_in)));
    }
    let ho = conv_out_dim(h, plan.k, stride, pad)?;
    let wo = conv_out_dim(w, plan.k, stride, pad)?;
    let groups_out = plan.n_array() * plan.oc_per_array;
    let mut out = Vec::with_capacity(n * groups_out * ho * wo);
    let sample = c * h * w;
    for b in 0..n {
        let (cols, _, _) = im2col(&x.data()[b * sample..(b + 1) * sample], (c, h, w), plan.k, stride, pad)?;
        out.extend(grouped_conv_cols(blocks, plan, &cols, ho * wo));
    }
    Tensor::from_vec(&[n, groups_out, ho, wo], out)
}
