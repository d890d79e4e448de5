//! Quantization-aware training of a small CNN whose convolutions run
//! through the CIM pipeline.
//!
//! The model is a stack of `conv -> [batch norm] -> ReLU -> avgpool2`
//! blocks followed by a dense classifier. Convolutions carry a digital bias
//! added after dequantization; batch norm and the classifier stay in
//! floating point.
//!
//! Parameters live in `f64` but are rounded to `f32` after every update,
//! so an `f32` checkpoint resumes bit-exactly.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cim_conv::{CimConv, CimLayerConfig, CimTrace, ConvScales, ForwardCache, ForwardOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::quantizer::{init_scales, GroupMap};
use crate::seeds;
use crate::tensor::Tensor;

pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub conv_channels: Vec<usize>,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

/// How the last feature map reaches the dense classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Readout {
    /// Global average over positions of the last conv layer.
    GlobalAvg,
    /// Every conv layer is pooled; the last pooled map is flattened.
    #[default]
    Flatten,
}

fn three() -> usize {
    3
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16],
            kernel: 3,
            readout: Readout::default(),
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// Weight and partial-sum quantization from the first step.
    OneStage,
    /// Partial-sum quantization only from the first stage-2 step.
    TwoStage,
}

/// Both modes run `stage1_epochs` at `lr` then `stage2_epochs` at
/// `stage2_lr`; they differ only in when partial-sum quantization starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub mode: ScheduleMode,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning-rate multiplier for scale factors.
    #[serde(default = "one_f64")]
    pub scale_lr_mult: f64,
}

fn one_f64() -> f64 {
    1.0
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::OneStage,
            stage1_epochs: 8,
            stage2_epochs: 4,
            lr: 0.1,
            stage2_lr: 0.02,
            batch_size: 32,
            momentum: 0.9,
            scale_lr_mult: 1.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("schedule: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.stage2_lr > 0.0 && self.stage2_lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(self.scale_lr_mult >= 0.0 && self.scale_lr_mult.is_finite()) {
            return bad("scale_lr_mult must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.mode == ScheduleMode::TwoStage && self.stage2_epochs == 0 {
            return bad("two-stage training needs stage2_epochs >= 1");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// First epoch (0-based) with partial-sum quantization on.
    pub fn psum_quant_enabled_from(&self) -> usize {
        match self.mode {
            ScheduleMode::OneStage => 0,
            ScheduleMode::TwoStage => self.stage1_epochs,
        }
    }

    pub fn stage_of(&self, epoch: usize) -> usize {
        if epoch < self.stage1_epochs {
            1
        } else {
            2
        }
    }

    pub fn lr_of(&self, epoch: usize) -> f64 {
        if epoch < self.stage1_epochs {
            self.lr
        } else {
            self.stage2_lr
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    /// Folds one batch's `(mean, unbiased var)` into the running statistics.
    fn update(&mut self, mean: &[f64], var: &[f64]) {
        for c in 0..self.gamma.len() {
            self.running_mean[c] = round_f32((1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c]);
            self.running_var[c] = round_f32((1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub geom: CimConv,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub scales: ConvScales,
    pub bn: Option<BatchNorm>,
}

/// Batch statistics in training, running statistics in evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    layers: Vec<ConvLayer>,
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
    num_classes: usize,
    input: (usize, usize, usize),
    readout: Readout,
    feat_dim: usize,
    /// All quantizers off when false.
    pub quantized: bool,
    pub psum_quant: bool,
    pub scales_ready: bool,
    pub psum_ready: bool,
}

struct LayerCache {
    conv: ForwardCache,
    /// Pre-activation `[N, C, H, W]`.
    pre: Tensor,
    /// Normalized conv output and per-channel `1/std` when batch norm ran
    /// on batch statistics.
    bn: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-channel `(mean, unbiased var)` of one layer's batch.
type BatchStats = (Vec<f64>, Vec<f64>);

struct Forward {
    caches: Vec<LayerCache>,
    features: Vec<f64>,
    logits: Vec<f64>,
    traces: Vec<CimTrace>,
    stats: Vec<Option<BatchStats>>,
}

/// Loss, gradient (in [`ToyModel::flat_params`] order) and diagnostics of
/// one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub correct: usize,
    pub clips: u64,
    /// Batch-norm statistics per layer, for the running averages.
    pub bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn avgpool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims4().expect("4-d");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for nc in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let base = nc * h * w;
                let s = x.data()[base + 2 * i * w + 2 * j]
                    + x.data()[base + 2 * i * w + 2 * j + 1]
                    + x.data()[base + (2 * i + 1) * w + 2 * j]
                    + x.data()[base + (2 * i + 1) * w + 2 * j + 1];
                out.data_mut()[(nc * ho + i) * wo + j] = s / 4.0;
            }
        }
    }
    out
}

fn avgpool2_backward(dy: &Tensor, shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(&shape);
    for nc in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let g = dy.data()[(nc * ho + i) * wo + j] / 4.0;
                let base = nc * h * w;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx.data_mut()[base + (2 * i + di) * w + 2 * j + dj] += g;
                }
            }
        }
    }
    dx
}

impl ToyModel {
    /// Kaiming-normal convolution weights, zero biases, scales at 1 until
    /// calibrated on the first training batch.
    pub fn new(spec: &ModelSpec, cfg: &CimLayerConfig, input: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let cfgs = vec![*cfg; spec.conv_channels.len()];
        Self::with_layer_configs(spec, &cfgs, input, num_classes, seed)
    }

    /// Like [`ToyModel::new`] with one CIM configuration per conv layer.
    pub fn with_layer_configs(
        spec: &ModelSpec,
        cfgs: &[CimLayerConfig],
        input: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if spec.conv_channels.is_empty() || spec.conv_channels.contains(&0) {
            return Err(Error::InvalidConfig("model needs at least one conv layer with >= 1 channel".into()));
        }
        if cfgs.len() != spec.conv_channels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} layer configs for {} conv layers",
                cfgs.len(),
                spec.conv_channels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig("model needs >= 2 classes".into()));
        }
        let mut rng = seeds::rng(seed, "init", &[]);
        let mut normal = |std: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            round_f32(std * z)
        };
        let k = spec.kernel;
        let mut c_in = input.0;
        let (mut h, mut w) = (input.1, input.2);
        let mut layers = Vec::new();
        for (i, (&c_out, cfg)) in spec.conv_channels.iter().zip(cfgs).enumerate() {
            let geom = CimConv::new(*cfg, c_in, c_out, k)?;
            h = crate::tensor::conv_out_dim(h, k, cfg.stride, cfg.pad)?;
            w = crate::tensor::conv_out_dim(w, k, cfg.stride, cfg.pad)?;
            if i + 1 < spec.conv_channels.len() || spec.readout == Readout::Flatten {
                if h < 2 || w < 2 {
                    return Err(Error::InvalidConfig("feature map too small for pooling".into()));
                }
                h /= 2;
                w /= 2;
            }
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            let wv = (0..geom.weight_len()).map(|_| normal(std)).collect();
            let scales = ConvScales {
                s_w: vec![1.0; geom.n_weight_groups()],
                s_a: 1.0,
                s_p: vec![1.0; geom.n_psum_groups()],
            };
            layers.push(ConvLayer {
                geom,
                w: wv,
                b: vec![0.0; c_out],
                scales,
                bn: spec.batch_norm.then(|| BatchNorm::new(c_out)),
            });
            c_in = c_out;
        }
        let feat_dim = match spec.readout {
            Readout::GlobalAvg => c_in,
            Readout::Flatten => c_in * h * w,
        };
        let std = (1.0 / feat_dim as f64).sqrt();
        let dense_w = (0..num_classes * feat_dim).map(|_| normal(std)).collect();
        Ok(Self {
            layers,
            dense_w,
            dense_b: vec![0.0; num_classes],
            num_classes,
            input,
            readout: spec.readout,
            feat_dim,
            quantized: true,
            psum_quant: false,
            scales_ready: false,
            psum_ready: false,
        })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    /// Input width of the dense classifier.
    pub fn features(&self) -> usize {
        self.feat_dim
    }

    fn pooled(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.readout == Readout::Flatten
    }

    /// `(name, values)` of every parameter, weights and scales alike.
    pub fn named_params(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}.w"), l.w.clone()));
            out.push((format!("conv{i}.b"), l.b.clone()));
            out.push((format!("conv{i}.s_w"), l.scales.s_w.clone()));
            out.push((format!("conv{i}.s_a"), vec![l.scales.s_a]));
            out.push((format!("conv{i}.s_p"), l.scales.s_p.clone()));
            if let Some(bn) = &l.bn {
                out.push((format!("conv{i}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("conv{i}.bn.beta"), bn.beta.clone()));
            }
        }
        out.push(("dense.w".into(), self.dense_w.clone()));
        out.push(("dense.b".into(), self.dense_b.clone()));
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.named_params().into_iter().flat_map(|(_, v)| v).collect()
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", p.len(), self.n_params())));
        }
        let mut it = p.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        for l in &mut self.layers {
            l.w = take(l.w.len());
            l.b = take(l.b.len());
            l.scales.s_w = take(l.scales.s_w.len());
            l.scales.s_a = take(1)[0];
            l.scales.s_p = take(l.scales.s_p.len());
            if let Some(bn) = &mut l.bn {
                bn.gamma = take(bn.gamma.len());
                bn.beta = take(bn.beta.len());
            }
        }
        self.dense_w = take(self.dense_w.len());
        self.dense_b = take(self.dense_b.len());
        Ok(())
    }

    pub fn set_named_params(&mut self, named: &[(String, Vec<f64>)]) -> Result<()> {
        let own = self.named_params();
        if own.len() != named.len() || own.iter().zip(named).any(|(a, b)| a.0 != b.0 || a.1.len() != b.1.len()) {
            return Err(Error::Checkpoint("parameter names or sizes do not match the model".into()));
        }
        let flat: Vec<f64> = named.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        self.set_flat_params(&flat)
    }

    /// Non-trained state: batch-norm running statistics.
    pub fn named_buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(bn) = &l.bn {
                out.push((format!("conv{i}.bn.running_mean"), bn.running_mean.clone()));
                out.push((format!("conv{i}.bn.running_var"), bn.running_var.clone()));
            }
        }
        out
    }

    pub fn set_named_buffers(&mut self, named: &[(String, Vec<f64>)]) -> Result<()> {
        let own = self.named_buffers();
        if own.len() != named.len() || own.iter().zip(named).any(|(a, b)| a.0 != b.0 || a.1.len() != b.1.len()) {
            return Err(Error::Checkpoint("buffer names or sizes do not match the model".into()));
        }
        let mut it = named.iter();
        for l in &mut self.layers {
            if let Some(bn) = &mut l.bn {
                bn.running_mean = it.next().expect("checked").1.clone();
                bn.running_var = it.next().expect("checked").1.clone();
            }
        }
        Ok(())
    }

    /// Folds batch statistics from a training step into the running ones.
    pub fn update_running_stats(&mut self, stats: &[Option<(Vec<f64>, Vec<f64>)>]) {
        for (l, st) in self.layers.iter_mut().zip(stats) {
            if let (Some(bn), Some((m, v))) = (&mut l.bn, st) {
                bn.update(m, v);
            }
        }
    }

    /// Positions in the flat parameter vector that hold scale factors.
    fn scale_mask(&self) -> Vec<bool> {
        self.named_params()
            .into_iter()
            .flat_map(|(n, v)| {
                let is_scale = n.contains(".s_");
                std::iter::repeat_n(is_scale, v.len())
            })
            .collect()
    }

    fn options(&self, factors: Option<&Vec<Vec<f64>>>, histograms: bool) -> ForwardOptions {
        ForwardOptions {
            psum_quant: self.psum_quant,
            bypass: !self.quantized,
            cell_factors: factors.cloned(),
            histograms,
        }
    }

    /// LSQ initialization of weight and activation scales from a batch,
    /// plus partial-sum scales when partial-sum quantization is on.
    pub fn calibrate(&mut self, x: &Tensor) -> Result<()> {
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            let l = &mut self.layers[i];
            let dup = l.geom.duplicate_weight(&l.w);
            l.scales.s_w = clamp_scales(init_scales(&dup, l.geom.w_spec(), l.geom.weight_groups())?.values());
            l.scales.s_a = clamp_scales(init_scales(h.data(), l.geom.a_spec(), &GroupMap::single(h.len()))?.values())[0];
            if self.psum_quant {
                l.scales.s_p = clamp_scales(&l.geom.init_psum_scales(&h, &l.w, &l.scales)?);
            }
            h = self.layer_forward(i, &h, None, false, Mode::Train)?.0;
        }
        self.scales_ready = true;
        self.psum_ready |= self.psum_quant;
        Ok(())
    }

    /// Partial-sum scales from a batch, keeping the other scales.
    pub fn init_psum(&mut self, x: &Tensor) -> Result<()> {
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            let l = &mut self.layers[i];
            l.scales.s_p = clamp_scales(&l.geom.init_psum_scales(&h, &l.w, &l.scales)?);
            h = self.layer_forward(i, &h, None, false, Mode::Train)?.0;
        }
        self.psum_ready = true;
        Ok(())
    }

    /// Output of layer `i` after bias, batch norm, ReLU and pooling.
    fn layer_forward(
        &self,
        i: usize,
        x: &Tensor,
        factors: Option<&Vec<Vec<f64>>>,
        histograms: bool,
        mode: Mode,
    ) -> Result<(Tensor, LayerCache, CimTrace, Option<BatchStats>)> {
        let l = &self.layers[i];
        let (mut z, trace, conv) = l.geom.forward(x, &l.w, &l.scales, &self.options(factors, histograms))?;
        let [n, c, h, w] = z.dims4()?;
        let hw = h * w;
        for (j, v) in z.data_mut().iter_mut().enumerate() {
            *v += l.b[(j / hw) % c];
        }
        let mut bn_cache = None;
        let mut stats = None;
        if let Some(bn) = &l.bn {
            let (mean, var) = match mode {
                Mode::Train => {
                    let m = (n * hw) as f64;
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for (j, &v) in z.data().iter().enumerate() {
                        mean[(j / hw) % c] += v;
                    }
                    mean.iter_mut().for_each(|v| *v /= m);
                    for (j, &v) in z.data().iter().enumerate() {
                        let ch = (j / hw) % c;
                        var[ch] += (v - mean[ch]).powi(2);
                    }
                    var.iter_mut().for_each(|v| *v /= m);
                    let unbiased = var.iter().map(|v| v * m / (m - 1.0).max(1.0)).collect();
                    stats = Some((mean.clone(), unbiased));
                    (mean, var)
                }
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; z.len()];
            for (j, v) in z.data_mut().iter_mut().enumerate() {
                let ch = (j / hw) % c;
                xhat[j] = (*v - mean[ch]) * inv_std[ch];
                *v = bn.gamma[ch] * xhat[j] + bn.beta[ch];
            }
            if mode == Mode::Train {
                bn_cache = Some((xhat, inv_std));
            }
        }
        let r = z.map(|v| v.max(0.0));
        let y = if self.pooled(i) { avgpool2(&r) } else { r };
        Ok((y, LayerCache { conv, pre: z, bn: bn_cache }, trace, stats))
    }

    fn forward(&self, x: &Tensor, factors: Option<&[Vec<Vec<f64>>]>, histograms: bool, mode: Mode) -> Result<Forward> {
        if let Some(f) = factors {
            if f.len() != self.layers.len() {
                return Err(Error::ShapeMismatch("one set of cell factors per layer expected".into()));
            }
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (y, cache, trace, st) = self.layer_forward(i, &h, factors.map(|f| &f[i]), histograms, mode)?;
            caches.push(cache);
            traces.push(trace);
            stats.push(st);
            h = y;
        }
        let [n, _, hh, ww] = h.dims4()?;
        let c = self.feat_dim;
        let features: Vec<f64> = match self.readout {
            Readout::GlobalAvg => h.data().chunks(hh * ww).map(|ch| ch.iter().sum::<f64>() / (hh * ww) as f64).collect(),
            Readout::Flatten => h.into_data(),
        };
        let mut logits = vec![0.0; n * self.num_classes];
        for b in 0..n {
            for k in 0..self.num_classes {
                let wrow = &self.dense_w[k * c..(k + 1) * c];
                let f = &features[b * c..(b + 1) * c];
                logits[b * self.num_classes + k] = self.dense_b[k] + wrow.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(Forward {
            caches,
            features,
            logits,
            traces,
            stats,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if (c, h, w) != self.input {
            return Err(Error::ShapeMismatch(format!("input {:?} vs model {:?}", (c, h, w), self.input)));
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient for one batch.
    pub fn forward_backward(&self, x: &Tensor, labels: &[usize]) -> Result<BatchResult> {
        self.check_input(x)?;
        let [n, ..] = x.dims4()?;
        if n == 0 || labels.len() != n {
            return Err(Error::EmptyDataset);
        }
        let fw = self.forward(x, None, false, Mode::Train)?;
        let nc = self.num_classes;
        let c = self.features();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut d_logits = vec![0.0; n * nc];
        for b in 0..n {
            let row = &fw.logits[b * nc..(b + 1) * nc];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[b]];
            if argmax(row) == labels[b] {
                correct += 1;
            }
            for k in 0..nc {
                d_logits[b * nc + k] = ((row[k] - lse).exp() - (k == labels[b]) as u8 as f64) / n as f64;
            }
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { loss, step: 0 });
        }

        let mut d_dense_w = vec![0.0; nc * c];
        let mut d_dense_b = vec![0.0; nc];
        let mut d_feat = vec![0.0; n * c];
        for b in 0..n {
            for k in 0..nc {
                let g = d_logits[b * nc + k];
                d_dense_b[k] += g;
                for j in 0..c {
                    d_dense_w[k * c + j] += g * fw.features[b * c + j];
                    d_feat[b * c + j] += g * self.dense_w[k * c + j];
                }
            }
        }

        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        let mut d_y: Option<Tensor> = None;
        let mut d_feat = d_feat;
        for i in (0..self.layers.len()).rev() {
            let cache = &fw.caches[i];
            let shape: [usize; 4] = cache.pre.dims4()?;
            let hw = shape[2] * shape[3];
            if i == last {
                d_y = Some(match self.readout {
                    Readout::GlobalAvg => {
                        let mut t = Tensor::zeros(&shape);
                        for (j, v) in t.data_mut().iter_mut().enumerate() {
                            *v = d_feat[j / hw] / hw as f64;
                        }
                        t
                    }
                    Readout::Flatten => {
                        let pooled = [shape[0], shape[1], shape[2] / 2, shape[3] / 2];
                        Tensor::from_vec(&pooled, std::mem::take(&mut d_feat))?
                    }
                });
            }
            let d_y_i = d_y.take().expect("downstream gradient");
            let d_r = if self.pooled(i) { avgpool2_backward(&d_y_i, shape) } else { d_y_i };
            let mut d_z = d_r;
            for (g, &z) in d_z.data_mut().iter_mut().zip(cache.pre.data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            let l = &self.layers[i];
            let c = shape[1];
            let mut d_bn = None;
            if let (Some(bn), Some((xhat, inv_std))) = (&l.bn, &cache.bn) {
                let m = (shape[0] * hw) as f64;
                let mut d_gamma = vec![0.0; c];
                let mut d_beta = vec![0.0; c];
                for (j, &g) in d_z.data().iter().enumerate() {
                    let ch = (j / hw) % c;
                    d_gamma[ch] += g * xhat[j];
                    d_beta[ch] += g;
                }
                for (j, g) in d_z.data_mut().iter_mut().enumerate() {
                    let ch = (j / hw) % c;
                    *g = bn.gamma[ch] * inv_std[ch] / m * (m * *g - d_beta[ch] - xhat[j] * d_gamma[ch]);
                }
                d_bn = Some((d_gamma, d_beta));
            }
            let mut d_b = vec![0.0; c];
            for (j, &g) in d_z.data().iter().enumerate() {
                d_b[(j / hw) % c] += g;
            }
            let g = l.geom.backward(&cache.conv, &l.w, &l.scales, &d_z)?;
            d_y = Some(g.dx.clone());
            layer_grads.push((g, d_b, d_bn));
        }
        layer_grads.reverse();

        let mut grads = Vec::with_capacity(self.n_params());
        for (g, d_b, d_bn) in layer_grads {
            grads.extend(g.dw);
            grads.extend(d_b);
            grads.extend(g.ds_w);
            grads.push(g.ds_a);
            grads.extend(g.ds_p);
            if let Some((d_gamma, d_beta)) = d_bn {
                grads.extend(d_gamma);
                grads.extend(d_beta);
            }
        }
        grads.extend(d_dense_w);
        grads.extend(d_dense_b);
        let clips = fw.traces.iter().map(CimTrace::total_clips).sum();
        Ok(BatchResult {
            loss,
            grads,
            correct,
            clips,
            bn_stats: fw.stats,
        })
    }

    /// Logits `[N, classes]` and per-layer traces.
    pub fn predict(&self, x: &Tensor, factors: Option<&[Vec<Vec<f64>>]>, histograms: bool) -> Result<(Vec<f64>, Vec<CimTrace>)> {
        self.check_input(x)?;
        let fw = self.forward(x, factors, histograms, Mode::Eval)?;
        Ok((fw.logits, fw.traces))
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        self.evaluate_with(data, None)
    }

    pub fn evaluate_with(&self, data: &Dataset, factors: Option<&[Vec<Vec<f64>>]>) -> Result<f64> {
        Ok(self.evaluate_traced(data, factors, false)?.0)
    }

    /// Accuracy plus traces merged over the whole dataset.
    pub fn evaluate_traced(&self, data: &Dataset, factors: Option<&[Vec<Vec<f64>>]>, histograms: bool) -> Result<(f64, Vec<CimTrace>)> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        const EVAL_BATCH: usize = 256;
        let mut correct = 0;
        let mut traces: Vec<CimTrace> = Vec::new();
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, y) = data.batch(chunk);
            let (logits, tr) = self.predict(&x, factors, histograms)?;
            correct += logits
                .chunks(self.num_classes)
                .zip(&y)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            if traces.is_empty() {
                traces = tr;
            } else {
                for (a, b) in traces.iter_mut().zip(&tr) {
                    a.merge(b);
                }
            }
        }
        Ok((correct as f64 / data.len() as f64, traces))
    }
}

fn clamp_scales(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&s| round_f32(s.max(MIN_SCALE))).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub loss: f64,
    pub acc: f64,
    pub steps: u64,
    pub psum_quant: bool,
    pub clips: u64,
}

/// Everything needed to continue training exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ToyModel,
    pub momentum: Vec<f64>,
    pub epochs_done: usize,
    pub steps: u64,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model: ToyModel) -> Self {
        let n = model.n_params();
        Self {
            model,
            momentum: vec![0.0; n],
            epochs_done: 0,
            steps: 0,
            log: Vec::new(),
        }
    }
}

/// Trains to the end of the schedule. `on_epoch` runs after every epoch.
pub fn train_from(
    state: &mut TrainState,
    train: &Dataset,
    test: &Dataset,
    schedule: &TrainSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mask = state.model.scale_mask();
    while state.epochs_done < schedule.total_epochs() {
        let epoch = state.epochs_done;
        let lr = schedule.lr_of(epoch);
        state.model.psum_quant = epoch >= schedule.psum_quant_enabled_from();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::rng(seed, "training", &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut clips = 0;
        for chunk in order.chunks(schedule.batch_size) {
            let (x, y) = train.batch(chunk);
            if state.model.quantized && !state.model.scales_ready {
                state.model.calibrate(&x)?;
            }
            if state.model.quantized && state.model.psum_quant && !state.model.psum_ready {
                state.model.init_psum(&x)?;
            }
            let r = state.model.forward_backward(&x, &y).map_err(|e| match e {
                Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss {
                    loss,
                    step: state.steps,
                },
                e => e,
            })?;
            loss_sum += r.loss * chunk.len() as f64;
            clips += r.clips;
            let mut p = state.model.flat_params();
            for i in 0..p.len() {
                let v = round_f32(schedule.momentum * state.momentum[i] + r.grads[i]);
                state.momentum[i] = v;
                if mask[i] {
                    p[i] = round_f32(p[i] - lr * schedule.scale_lr_mult * v).max(MIN_SCALE);
                } else {
                    p[i] = round_f32(p[i] - lr * v);
                }
            }
            state.model.set_flat_params(&p)?;
            state.model.update_running_stats(&r.bn_stats);
            state.steps += 1;
        }
        let acc = state.model.evaluate(test)?;
        state.epochs_done += 1;
        state.log.push(EpochLog {
            epoch: state.epochs_done,
            stage: schedule.stage_of(epoch),
            loss: loss_sum / train.len() as f64,
            acc,
            steps: state.steps,
            psum_quant: state.model.psum_quant,
            clips,
        });
        on_epoch(state)?;
    }
    Ok(())
}

pub fn train(model: ToyModel, train_set: &Dataset, test: &Dataset, schedule: &TrainSchedule, seed: u64) -> Result<TrainState> {
    let mut state = TrainState::new(model);
    train_from(&mut state, train_set, test, schedule, seed, |_| Ok(()))?;
    Ok(state)
}
