//! One convolution layer on bit-scalable CIM arrays.
//!
//! Pipeline per forward pass:
//!
//! 1. activations are quantized once, layer-wise;
//! 2. the weight is duplicated once per bit-split and each duplicate is
//!    quantized at the configured granularity; split `k` keeps digit `k` of
//!    its duplicate's code;
//! 3. each split plane is tiled onto the arrays and all arrays run as one
//!    grouped convolution, producing integer partial sums per column;
//! 4. partial sums are quantized per column, array or layer group;
//! 5. codes are dequantized with one fused factor `s_w * s_a * s_p` per
//!    group, accumulated across row tiles and shift-added across splits.
//!
//! Contributions whose fused factors are the same scale group are summed in
//! the integer domain before the single multiplication, which is how the
//! hardware shares a dequantizer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bitsplit::{digit, n_split};
use crate::error::{Error, Result};
use crate::quantizer::{
    calibrate_max_abs, init_scales, input_grad_ste, quantize_value, scale_grad, Granularity, GroupMap,
    QuantSpec, ScaleTensor,
};
use crate::tensor::{conv_out_dim, Tensor};
use crate::tiler::{
    col2im, column_id_unchecked, grouped_conv_cols, grouped_conv_cols_backward, im2col, map_weights,
    plan_tiling, unmap_weights, ArrayBlocks, ArrayShape, TilingPlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CimLayerConfig {
    pub w_bits: u32,
    pub a_bits: u32,
    pub p_bits: u32,
    pub cell_bits: u32,
    pub array: ArrayShape,
    pub w_gran: Granularity,
    pub p_gran: Granularity,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    /// Signed activations; post-ReLU layers use unsigned.
    #[serde(default)]
    pub a_signed: bool,
}

fn one() -> usize {
    1
}

impl Default for CimLayerConfig {
    fn default() -> Self {
        Self {
            w_bits: 4,
            a_bits: 4,
            p_bits: 4,
            cell_bits: 2,
            array: ArrayShape { rows: 64, cols: 64 },
            w_gran: Granularity::Column,
            p_gran: Granularity::Column,
            stride: 1,
            pad: 1,
            a_signed: false,
        }
    }
}

impl CimLayerConfig {
    pub fn validate(&self) -> Result<()> {
        n_split(self.w_bits, self.cell_bits)?;
        if self.w_bits < 2 || self.p_bits < 2 || self.a_bits < 1 {
            return Err(Error::InvalidConfig(format!(
                "bit-widths must be w>=2, p>=2, a>=1 (got w={}, a={}, p={})",
                self.w_bits, self.a_bits, self.p_bits
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        ArrayShape::new(self.array.rows, self.array.cols)?;
        self.w_spec()?;
        self.a_spec()?;
        self.p_spec()?;
        Ok(())
    }

    pub fn w_spec(&self) -> Result<QuantSpec> {
        QuantSpec::signed(self.w_bits, self.w_gran)
    }

    pub fn a_spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.a_bits, self.a_signed, Granularity::Layer)
    }

    pub fn p_spec(&self) -> Result<QuantSpec> {
        QuantSpec::signed(self.p_bits, self.p_gran)
    }

    pub fn n_split(&self) -> Result<usize> {
        n_split(self.w_bits, self.cell_bits)
    }
}

/// Scale factors of one layer. `s_w` is indexed by weight group, `s_p` by
/// partial-sum group.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvScales {
    pub s_w: Vec<f64>,
    pub s_a: f64,
    pub s_p: Vec<f64>,
}

/// Per-column record of integer partial sums and the scales applied to them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnTrace {
    pub column: usize,
    pub array: usize,
    pub out_channel: usize,
    pub split: usize,
    pub samples: u64,
    pub min: i64,
    pub max: i64,
    pub clips: u64,
    pub weight_scale: f64,
    pub psum_scale: Option<f64>,
    /// Partial-sum value -> count. Empty unless histograms were requested.
    pub histogram: BTreeMap<i64, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CimTrace {
    pub columns: Vec<ColumnTrace>,
    /// Distinct fused dequantization factors applied by the layer.
    pub dequant_mults: usize,
    pub psum_quant: bool,
}

impl CimTrace {
    pub fn total_clips(&self) -> u64 {
        self.columns.iter().map(|c| c.clips).sum()
    }

    pub fn total_samples(&self) -> u64 {
        self.columns.iter().map(|c| c.samples).sum()
    }

    /// Folds another pass over the same layer into this trace.
    pub fn merge(&mut self, other: &CimTrace) {
        if self.columns.is_empty() {
            *self = other.clone();
            return;
        }
        for (c, o) in self.columns.iter_mut().zip(&other.columns) {
            if o.samples == 0 {
                continue;
            }
            if c.samples == 0 {
                c.min = o.min;
                c.max = o.max;
            } else {
                c.min = c.min.min(o.min);
                c.max = c.max.max(o.max);
            }
            c.samples += o.samples;
            c.clips += o.clips;
            c.weight_scale = o.weight_scale;
            c.psum_scale = o.psum_scale;
            for (&v, &n) in &o.histogram {
                *c.histogram.entry(v).or_insert(0) += n;
            }
        }
        self.dequant_mults = self.dequant_mults.max(other.dequant_mults);
        self.psum_quant |= other.psum_quant;
    }
}

/// How a forward pass treats the quantizers.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Quantize partial sums (the ADC stage).
    pub psum_quant: bool,
    /// Skip every quantizer: real weights on one plane, real activations.
    pub bypass: bool,
    /// Multiplicative factors on the stored cell values, `[n_split][weight]`.
    pub cell_factors: Option<Vec<Vec<f64>>>,
    pub histograms: bool,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Tensor,
    cols: Vec<Vec<f64>>,
    planes: Vec<ArrayBlocks>,
    /// `[N, n_columns, P]`
    psums: Vec<f64>,
    p: usize,
    out_shape: [usize; 4],
    psum_quant: bool,
    bypass: bool,
}

impl ForwardCache {
    pub fn psums(&self) -> &[f64] {
        &self.psums
    }

    pub fn positions(&self) -> usize {
        self.p
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Vec<f64>,
    pub ds_w: Vec<f64>,
    pub ds_a: f64,
    pub ds_p: Vec<f64>,
}

struct DequantGroup {
    factor: f64,
    /// `(column id, 2^(c*k))`
    members: Vec<(usize, f64)>,
}

/// A convolution layer's geometry on the arrays: tiling plan, bit-split
/// count and scale group maps.
#[derive(Debug, Clone)]
pub struct CimConv {
    cfg: CimLayerConfig,
    c_in: usize,
    c_out: usize,
    k: usize,
    plan: TilingPlan,
    n_split: usize,
    w_spec: QuantSpec,
    a_spec: QuantSpec,
    p_spec: QuantSpec,
    /// Over the duplicated weight `[n_split, C_out, C_in, K, K]`.
    w_groups: GroupMap,
    /// Partial-sum group of each column id.
    p_group_of_col: Vec<usize>,
    p_n_groups: usize,
    /// `(array, local output channel, split)` of each column id.
    col_coords: Vec<(usize, usize, usize)>,
}

impl CimConv {
    pub fn new(cfg: CimLayerConfig, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        cfg.validate()?;
        let plan = plan_tiling(c_in, c_out, k, cfg.array)?;
        let ns = cfg.n_split()?;
        let n_cols = plan.n_columns(ns);
        let mut col_coords = vec![(0, 0, 0); n_cols];
        for a in 0..plan.n_array() {
            for ol in 0..plan.mapped_oc(a) {
                for s in 0..ns {
                    col_coords[column_id_unchecked(&plan, a, ol, s, ns)] = (a, ol, s);
                }
            }
        }
        let group_by = |gran: Granularity, a: usize, col: usize| match gran {
            Granularity::Layer => 0,
            Granularity::Array => a,
            Granularity::Column => col,
        };
        let n_groups = |gran: Granularity| match gran {
            Granularity::Layer => 1,
            Granularity::Array => plan.n_array(),
            Granularity::Column => n_cols,
        };
        let p_group_of_col = col_coords
            .iter()
            .enumerate()
            .map(|(col, &(a, _, _))| group_by(cfg.p_gran, a, col))
            .collect();

        let kk = k * k;
        let per_split = c_out * c_in * kk;
        let mut w_group_of = vec![0usize; ns * per_split];
        for s in 0..ns {
            for o in 0..c_out {
                for c in 0..c_in {
                    let (a, ol) = plan.locate(c, o);
                    let col = column_id_unchecked(&plan, a, ol, s, ns);
                    let g = group_by(cfg.w_gran, a, col);
                    let base = s * per_split + (o * c_in + c) * kk;
                    w_group_of[base..base + kk].fill(g);
                }
            }
        }
        let w_groups = GroupMap::new(w_group_of, n_groups(cfg.w_gran))?;
        let p_n_groups = n_groups(cfg.p_gran);
        Ok(Self {
            w_spec: cfg.w_spec()?,
            a_spec: cfg.a_spec()?,
            p_spec: cfg.p_spec()?,
            cfg,
            c_in,
            c_out,
            k,
            plan,
            n_split: ns,
            w_groups,
            p_group_of_col,
            p_n_groups,
            col_coords,
        })
    }

    pub fn config(&self) -> &CimLayerConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &TilingPlan {
        &self.plan
    }

    pub fn n_split(&self) -> usize {
        self.n_split
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    pub fn n_columns(&self) -> usize {
        self.col_coords.len()
    }

    pub fn w_spec(&self) -> &QuantSpec {
        &self.w_spec
    }

    pub fn a_spec(&self) -> &QuantSpec {
        &self.a_spec
    }

    pub fn p_spec(&self) -> &QuantSpec {
        &self.p_spec
    }

    pub fn weight_groups(&self) -> &GroupMap {
        &self.w_groups
    }

    pub fn n_weight_groups(&self) -> usize {
        self.w_groups.n_groups()
    }

    pub fn n_psum_groups(&self) -> usize {
        self.p_n_groups
    }

    pub fn psum_group_of_column(&self, col: usize) -> usize {
        self.p_group_of_col[col]
    }

    pub fn column_coords(&self, col: usize) -> (usize, usize, usize) {
        self.col_coords[col]
    }

    /// Global output channel of a column.
    pub fn column_out_channel(&self, col: usize) -> usize {
        let (a, ol, _) = self.col_coords[col];
        self.plan.out_range(a).start + ol
    }

    /// Weight group feeding column `col`.
    pub fn weight_group_of_column(&self, col: usize) -> usize {
        let (a, _, _) = self.col_coords[col];
        match self.cfg.w_gran {
            Granularity::Layer => 0,
            Granularity::Array => a,
            Granularity::Column => col,
        }
    }

    /// The weight duplicated once per bit-split.
    pub fn duplicate_weight(&self, w: &[f64]) -> Vec<f64> {
        let mut dup = Vec::with_capacity(w.len() * self.n_split);
        for _ in 0..self.n_split {
            dup.extend_from_slice(w);
        }
        dup
    }

    /// Group map over a `[N, n_columns, P]` partial-sum tensor.
    pub fn psum_group_map(&self, n: usize, p: usize) -> GroupMap {
        let mut g = Vec::with_capacity(n * self.n_columns() * p);
        for _ in 0..n {
            for col in 0..self.n_columns() {
                g.extend(std::iter::repeat_n(self.p_group_of_col[col], p));
            }
        }
        GroupMap::new(g, self.p_n_groups).expect("psum groups in range")
    }

    fn check_inputs(&self, x: &Tensor, w: &[f64], scales: &ConvScales) -> Result<()> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.c_in {
            return Err(Error::ShapeMismatch(format!("input has {c} channels, layer expects {}", self.c_in)));
        }
        if w.len() != self.weight_len() {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} elements, layer expects {}",
                w.len(),
                self.weight_len()
            )));
        }
        if scales.s_w.len() != self.n_weight_groups() || scales.s_p.len() != self.p_n_groups {
            return Err(Error::ShapeMismatch(format!(
                "scales ({} weight, {} psum) do not match groups ({} weight, {} psum)",
                scales.s_w.len(),
                scales.s_p.len(),
                self.n_weight_groups(),
                self.p_n_groups
            )));
        }
        let all = scales.s_w.iter().chain(&scales.s_p).chain(std::iter::once(&scales.s_a));
        if let Some(&value) = all.clone().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidScale { group: 0, value });
        }
        Ok(())
    }

    /// Quantized digit planes, one per split, already tiled into array blocks.
    fn weight_planes(&self, w: &[f64], s_w: &[f64], bypass: bool, factors: Option<&Vec<Vec<f64>>>) -> Result<Vec<ArrayBlocks>> {
        if bypass {
            return Ok(vec![map_weights(w, &self.plan)?]);
        }
        let per_split = self.weight_len();
        let cell = self.cfg.cell_bits;
        (0..self.n_split)
            .map(|s| {
                let mut plane: Vec<f64> = w
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let scale = s_w[self.w_groups.group(s * per_split + i)];
                        let code = quantize_value(v, scale, &self.w_spec);
                        digit(code, cell, s, self.n_split) as f64
                    })
                    .collect();
                if let Some(f) = factors {
                    for (v, &m) in plane.iter_mut().zip(&f[s]) {
                        *v *= m;
                    }
                }
                map_weights(&plane, &self.plan)
            })
            .collect()
    }

    /// Dequantization groups per output channel, in fixed order: ascending
    /// split, then ascending row tile.
    fn dequant_groups(&self, scales: &ConvScales, psum_quant: bool, bypass: bool) -> (Vec<Vec<DequantGroup>>, usize) {
        let mut per_oc: Vec<Vec<DequantGroup>> = (0..self.c_out).map(|_| Vec::new()).collect();
        let mut keys: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.c_out];
        let mut units = BTreeSet::new();
        let ns = if bypass { 1 } else { self.n_split };
        for s in 0..ns {
            for r in 0..self.plan.n_array_rows() {
                for t in 0..self.plan.n_array_cols() {
                    let a = self.plan.array_id(r, t);
                    for ol in 0..self.plan.mapped_oc(a) {
                        let col = column_id_unchecked(&self.plan, a, ol, s, self.n_split);
                        let o = self.plan.out_range(a).start + ol;
                        let (key, factor) = if bypass {
                            ((usize::MAX, 0), 1.0)
                        } else {
                            let gw = self.weight_group_of_column(col);
                            let fw = scales.s_w[gw] * scales.s_a;
                            if psum_quant {
                                let gp = self.p_group_of_col[col];
                                ((gp, gw), fused_factor(fw, scales.s_p[gp]))
                            } else {
                                ((usize::MAX, gw), fw)
                            }
                        };
                        let shift = (1u64 << (self.cfg.cell_bits as u64 * s as u64)) as f64;
                        match keys[o].iter().position(|k| *k == key) {
                            Some(i) => per_oc[o][i].members.push((col, shift)),
                            None => {
                                keys[o].push(key);
                                per_oc[o].push(DequantGroup {
                                    factor,
                                    members: vec![(col, shift)],
                                });
                            }
                        }
                        let gran = if psum_quant { self.cfg.p_gran } else { self.cfg.w_gran };
                        units.insert(match gran {
                            Granularity::Layer => 0,
                            Granularity::Array => a * self.plan.oc_per_array() + ol,
                            Granularity::Column => col,
                        });
                    }
                }
            }
        }
        (per_oc, units.len())
    }

    pub fn forward(
        &self,
        x: &Tensor,
        w: &[f64],
        scales: &ConvScales,
        opts: &ForwardOptions,
    ) -> Result<(Tensor, CimTrace, ForwardCache)> {
        self.check_inputs(x, w, scales)?;
        let [n, c, h, wd] = x.dims4()?;
        let (stride, pad) = (self.cfg.stride, self.cfg.pad);
        let ho = conv_out_dim(h, self.k, stride, pad)?;
        let wo = conv_out_dim(wd, self.k, stride, pad)?;
        let p = ho * wo;
        if let Some(f) = &opts.cell_factors {
            if f.len() != self.n_split || f.iter().any(|v| v.len() != self.weight_len()) {
                return Err(Error::ShapeMismatch("cell factors do not match the weight planes".into()));
            }
        }

        let acts: Vec<f64> = if opts.bypass {
            x.data().to_vec()
        } else {
            x.data()
                .iter()
                .map(|&v| quantize_value(v, scales.s_a, &self.a_spec) as f64)
                .collect()
        };
        let planes = self.weight_planes(w, &scales.s_w, opts.bypass, opts.cell_factors.as_ref())?;

        let n_cols = self.n_columns();
        let slots = self.plan.n_array() * self.plan.oc_per_array();
        let sample = c * h * wd;
        let mut cols_cache = Vec::with_capacity(n);
        let mut psums = vec![0.0; n * n_cols * p];
        for b in 0..n {
            let (cols, _, _) = im2col(&acts[b * sample..(b + 1) * sample], (c, h, wd), self.k, stride, pad)?;
            for (s, blocks) in planes.iter().enumerate() {
                let out = grouped_conv_cols(blocks, &self.plan, &cols, p);
                debug_assert_eq!(out.len(), slots * p);
                for a in 0..self.plan.n_array() {
                    for ol in 0..self.plan.mapped_oc(a) {
                        let col = column_id_unchecked(&self.plan, a, ol, s, self.n_split);
                        let src = (a * self.plan.oc_per_array() + ol) * p;
                        let dst = (b * n_cols + col) * p;
                        psums[dst..dst + p].copy_from_slice(&out[src..src + p]);
                    }
                }
            }
            cols_cache.push(cols);
        }

        let psum_quant = opts.psum_quant && !opts.bypass;
        let (codes, clips) = if psum_quant {
            let s_p = ScaleTensor::new(scales.s_p.clone(), self.psum_group_map(n, p))?;
            let (q, _) = quantize_psums(&psums, &s_p, &self.p_spec)?;
            let mut clips = vec![0u64; n_cols];
            for b in 0..n {
                for col in 0..n_cols {
                    let base = (b * n_cols + col) * p;
                    let gp = self.p_group_of_col[col];
                    clips[col] += psums[base..base + p]
                        .iter()
                        .filter(|&&v| is_clipped(v, scales.s_p[gp], &self.p_spec))
                        .count() as u64;
                }
            }
            (q.into_iter().map(|v| v as f64).collect(), clips)
        } else {
            (psums.clone(), vec![0u64; n_cols])
        };

        let (groups, units) = self.dequant_groups(scales, psum_quant, opts.bypass);
        let mut out = Tensor::zeros(&[n, self.c_out, ho, wo]);
        let mut acc = vec![0.0; p];
        for b in 0..n {
            for (o, oc_groups) in groups.iter().enumerate() {
                let dst = &mut out.data_mut()[(b * self.c_out + o) * p..(b * self.c_out + o + 1) * p];
                for g in oc_groups {
                    acc.fill(0.0);
                    for &(col, shift) in &g.members {
                        let src = &codes[(b * n_cols + col) * p..(b * n_cols + col + 1) * p];
                        for (a, &v) in acc.iter_mut().zip(src) {
                            *a += shift * v;
                        }
                    }
                    for (d, &a) in dst.iter_mut().zip(&acc) {
                        *d += dequantize_fused_value(a, g.factor);
                    }
                }
            }
        }

        let trace = self.build_trace(&psums, &clips, n, p, scales, psum_quant, opts, units);
        let cache = ForwardCache {
            x: x.clone(),
            cols: cols_cache,
            planes,
            psums,
            p,
            out_shape: [n, self.c_out, ho, wo],
            psum_quant,
            bypass: opts.bypass,
        };
        Ok((out, trace, cache))
    }

    #[allow(clippy::too_many_arguments)]
    fn build_trace(
        &self,
        psums: &[f64],
        clips: &[u64],
        n: usize,
        p: usize,
        scales: &ConvScales,
        psum_quant: bool,
        opts: &ForwardOptions,
        units: usize,
    ) -> CimTrace {
        let n_cols = self.n_columns();
        let ns = if opts.bypass { 1 } else { self.n_split };
        let columns = (0..n_cols)
            .filter(|&col| self.col_coords[col].2 < ns)
            .map(|col| {
                let (a, _, s) = self.col_coords[col];
                let mut min = i64::MAX;
                let mut max = i64::MIN;
                let mut histogram = BTreeMap::new();
                for b in 0..n {
                    for &v in &psums[(b * n_cols + col) * p..(b * n_cols + col + 1) * p] {
                        let v = v.round() as i64;
                        min = min.min(v);
                        max = max.max(v);
                        if opts.histograms {
                            *histogram.entry(v).or_insert(0u64) += 1;
                        }
                    }
                }
                let samples = (n * p) as u64;
                if samples == 0 {
                    min = 0;
                    max = 0;
                }
                ColumnTrace {
                    column: col,
                    array: a,
                    out_channel: self.column_out_channel(col),
                    split: s,
                    samples,
                    min,
                    max,
                    clips: clips[col],
                    weight_scale: if opts.bypass { 1.0 } else { scales.s_w[self.weight_group_of_column(col)] },
                    psum_scale: psum_quant.then(|| scales.s_p[self.p_group_of_col[col]]),
                    histogram,
                }
            })
            .collect();
        CimTrace {
            columns,
            dequant_mults: units,
            psum_quant,
        }
    }

    pub fn backward(&self, cache: &ForwardCache, w: &[f64], scales: &ConvScales, d_out: &Tensor) -> Result<ConvGrads> {
        if d_out.shape() != cache.out_shape {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                d_out.shape(),
                cache.out_shape
            )));
        }
        let [n, c, h, wd] = cache.x.dims4()?;
        let p = cache.p;
        let n_cols = self.n_columns();
        let ns = if cache.bypass { 1 } else { self.n_split };

        // Upstream gradient of each partial sum's dequantized value.
        let mut up = vec![0.0; n * n_cols * p];
        for col in 0..n_cols {
            let (_, _, s) = self.col_coords[col];
            if s >= ns {
                continue;
            }
            let o = self.column_out_channel(col);
            let factor = if cache.bypass {
                1.0
            } else {
                let shift = (1u64 << (self.cfg.cell_bits as u64 * s as u64)) as f64;
                shift * scales.s_w[self.weight_group_of_column(col)] * scales.s_a
            };
            for b in 0..n {
                let g = &d_out.data()[(b * self.c_out + o) * p..(b * self.c_out + o + 1) * p];
                let dst = &mut up[(b * n_cols + col) * p..(b * n_cols + col + 1) * p];
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d = v * factor;
                }
            }
        }
        let (d_psum, ds_p) = if cache.psum_quant {
            let s_p = ScaleTensor::new(scales.s_p.clone(), self.psum_group_map(n, p))?;
            (
                input_grad_ste(&cache.psums, &s_p, &self.p_spec, &up)?,
                scale_grad(&cache.psums, &s_p, &self.p_spec, &up)?,
            )
        } else {
            (up, vec![0.0; self.p_n_groups])
        };

        let slots = self.plan.n_array() * self.plan.oc_per_array();
        let mut d_blocks: Vec<ArrayBlocks> = (0..ns).map(|_| ArrayBlocks::zeros(&self.plan)).collect();
        let mut d_acts = vec![0.0; n * c * h * wd];
        let mut grouped = vec![0.0; slots * p];
        let sample = c * h * wd;
        for b in 0..n {
            let mut d_cols = vec![0.0; cache.cols[b].len()];
            for s in 0..ns {
                grouped.fill(0.0);
                for a in 0..self.plan.n_array() {
                    for ol in 0..self.plan.mapped_oc(a) {
                        let col = column_id_unchecked(&self.plan, a, ol, s, self.n_split);
                        let src = (b * n_cols + col) * p;
                        let dst = (a * self.plan.oc_per_array() + ol) * p;
                        grouped[dst..dst + p].copy_from_slice(&d_psum[src..src + p]);
                    }
                }
                grouped_conv_cols_backward(
                    &cache.planes[s],
                    &self.plan,
                    &cache.cols[b],
                    p,
                    &grouped,
                    &mut d_blocks[s],
                    Some(&mut d_cols),
                );
            }
            col2im(
                &d_cols,
                (c, h, wd),
                self.k,
                self.cfg.stride,
                self.cfg.pad,
                &mut d_acts[b * sample..(b + 1) * sample],
            )?;
        }

        if cache.bypass {
            return Ok(ConvGrads {
                dx: Tensor::from_vec(cache.x.shape(), d_acts)?,
                dw: unmap_weights(&d_blocks[0], &self.plan),
                ds_w: vec![0.0; self.n_weight_groups()],
                ds_a: 0.0,
                ds_p,
            });
        }

        // Activation fake-quantizer: x_hat = code * s_a.
        let d_xhat: Vec<f64> = d_acts.iter().map(|v| v / scales.s_a).collect();
        let s_a = ScaleTensor::uniform(scales.s_a, GroupMap::single(d_xhat.len()))?;
        let dx = input_grad_ste(cache.x.data(), &s_a, &self.a_spec, &d_xhat)?;
        let ds_a = scale_grad(cache.x.data(), &s_a, &self.a_spec, &d_xhat)?[0];

        // Each split's dequantized weight counts as 1/n_split of the
        // fake-quantized duplicate it was cut from.
        let per_split = self.weight_len();
        let mut up_w = vec![0.0; ns * per_split];
        for (s, blocks) in d_blocks.iter().enumerate() {
            let d_plane = unmap_weights(blocks, &self.plan);
            let shift = (1u64 << (self.cfg.cell_bits as u64 * s as u64)) as f64;
            for (i, &g) in d_plane.iter().enumerate() {
                let scale = scales.s_w[self.w_groups.group(s * per_split + i)];
                up_w[s * per_split + i] = g / (shift * scale) / ns as f64;
            }
        }
        let dup = self.duplicate_weight(w);
        let s_w = ScaleTensor::new(scales.s_w.clone(), self.w_groups.clone())?;
        let d_dup = input_grad_ste(&dup, &s_w, &self.w_spec, &up_w)?;
        let ds_w = scale_grad(&dup, &s_w, &self.w_spec, &up_w)?;
        let mut dw = vec![0.0; per_split];
        for s in 0..ns {
            for (d, &v) in dw.iter_mut().zip(&d_dup[s * per_split..(s + 1) * per_split]) {
                *d += v;
            }
        }
        Ok(ConvGrads {
            dx: Tensor::from_vec(cache.x.shape(), dx)?,
            dw,
            ds_w,
            ds_a,
            ds_p,
        })
    }

    /// Scales initialized the LSQ way from a weight and a batch of inputs.
    /// Partial-sum scales come from the partial sums this batch produces.
    pub fn init_scales_lsq(&self, x: &Tensor, w: &[f64]) -> Result<ConvScales> {
        let s_w = init_scales(&self.duplicate_weight(w), &self.w_spec, &self.w_groups)?;
        let s_a = init_scales(x.data(), &self.a_spec, &GroupMap::single(x.len()))?;
        let mut scales = ConvScales {
            s_w: s_w.values().to_vec(),
            s_a: s_a.values()[0],
            s_p: vec![1.0; self.p_n_groups],
        };
        scales.s_p = self.init_psum_scales(x, w, &scales)?;
        Ok(scales)
    }

    /// Max-abs calibration of weight and activation scales; partial-sum
    /// scales use the LSQ rule on the resulting partial sums.
    pub fn calibrate_max_abs(&self, x: &Tensor, w: &[f64]) -> Result<ConvScales> {
        let s_w = calibrate_max_abs(&self.duplicate_weight(w), &self.w_spec, &self.w_groups)?;
        let s_a = calibrate_max_abs(x.data(), &self.a_spec, &GroupMap::single(x.len()))?;
        let mut scales = ConvScales {
            s_w: s_w.values().to_vec(),
            s_a: s_a.values()[0],
            s_p: vec![1.0; self.p_n_groups],
        };
        scales.s_p = self.init_psum_scales(x, w, &scales)?;
        Ok(scales)
    }

    /// LSQ initialization of partial-sum scales from observed partial sums.
    pub fn init_psum_scales(&self, x: &Tensor, w: &[f64], scales: &ConvScales) -> Result<Vec<f64>> {
        let (_, _, cache) = self.forward(x, w, scales, &ForwardOptions::default())?;
        let [n, ..] = x.dims4()?;
        let groups = self.psum_group_map(n, cache.p);
        Ok(init_scales(&cache.psums, &self.p_spec, &groups)?.values().to_vec())
    }

    /// Quantized weight codes of each split's duplicate, `[n_split][weight]`.
    pub fn weight_codes(&self, w: &[f64], s_w: &[f64]) -> Vec<Vec<i64>> {
        let per_split = self.weight_len();
        (0..self.n_split)
            .map(|s| {
                w.iter()
                    .enumerate()
                    .map(|(i, &v)| quantize_value(v, s_w[self.w_groups.group(s * per_split + i)], &self.w_spec))
                    .collect()
            })
            .collect()
    }
}

#[inline]
fn is_clipped(psum: f64, scale: f64, spec: &QuantSpec) -> bool {
    let r = (psum / scale).round();
    r < -(spec.q_neg() as f64) || r > spec.q_pos() as f64
}

/// Quantizes partial sums with their group scales; also returns the number
/// of clipped elements per group.
pub fn quantize_psums(psums: &[f64], s_p: &ScaleTensor, spec: &QuantSpec) -> Result<(Vec<i64>, Vec<u64>)> {
    if psums.len() != s_p.groups().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} partial sums, group map covers {}",
            psums.len(),
            s_p.groups().len()
        )));
    }
    let mut clips = vec![0u64; s_p.groups().n_groups()];
    let codes = psums
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = s_p.groups().group(i);
            let scale = s_p.values()[g];
            if is_clipped(v, scale, spec) {
                clips[g] += 1;
            }
            quantize_value(v, scale, spec)
        })
        .collect();
    Ok((codes, clips))
}

/// The single stored factor for a column: `s_w * s_p`.
#[inline]
pub fn fused_factor(s_w: f64, s_p: f64) -> f64 {
    s_w * s_p
}

#[inline]
pub fn dequantize_fused_value(q: f64, factor: f64) -> f64 {
    q * factor
}

/// `q * (s_w * s_p)` with the product formed once.
pub fn dequantize_fused(q: &[f64], s_w: f64, s_p: f64) -> Vec<f64> {
    let factor = fused_factor(s_w, s_p);
    q.iter().map(|&v| dequantize_fused_value(v, factor)).collect()
}

fn weight_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    let [co, ci, k, k2] = w.dims4()?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!("non-square kernel {k}x{k2}")));
    }
    Ok((co, ci, k))
}

/// Full CIM forward pass of one layer with partial-sum quantization on.
pub fn forward(x: &Tensor, w: &Tensor, cfg: &CimLayerConfig, scales: &ConvScales) -> Result<(Tensor, CimTrace)> {
    let (co, ci, k) = weight_dims(w)?;
    let layer = CimConv::new(*cfg, ci, co, k)?;
    let opts = ForwardOptions {
        psum_quant: true,
        histograms: true,
        ..Default::default()
    };
    let (out, trace, _) = layer.forward(x, w.data(), scales, &opts)?;
    Ok((out, trace))
}

/// The same pipeline with one layer-wide weight scale (layer-wise weights,
/// partial sums at `cfg.p_gran`).
pub fn layerwise_weight_path(
    x: &Tensor,
    w: &Tensor,
    cfg: &CimLayerConfig,
    s_w: f64,
    s_a: f64,
    s_p: &[f64],
) -> Result<(Tensor, CimTrace)> {
    let cfg = CimLayerConfig {
        w_gran: Granularity::Layer,
        ..*cfg
    };
    let scales = ConvScales {
        s_w: vec![s_w],
        s_a,
        s_p: s_p.to_vec(),
    };
    forward(x, w, &cfg, &scales)
}

/// Real-valued convolution by nested loops.
pub fn reference_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd] = x.dims4()?;
    let (co, ci, k) = weight_dims(w)?;
    if ci != c {
        return Err(Error::ShapeMismatch(format!("weight expects {ci} channels, input has {c}")));
    }
    let ho = conv_out_dim(h, k, stride, pad)?;
    let wo = conv_out_dim(wd, k, stride, pad)?;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let (xd, wdt) = (x.data(), w.data());
    for b in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut sum = 0.0;
                    for i in 0..c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh) as isize - pad as isize;
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                sum += xd[((b * c + i) * h + ih as usize) * wd + iw as usize]
                                    * wdt[((o * c + i) * k + kh) * k + kw];
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * ho + oh) * wo + ow] = sum;
                }
            }
        }
    }
    Ok(out)
}
