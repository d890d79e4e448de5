//! Closed-form counts of dequantization multiplications and stored scale
//! factors per layer.
//!
//! Weight and partial-sum scales of a column are pre-multiplied into one
//! fused factor, so the number of multiplications is set by the
//! partial-sum granularity alone:
//!
//! | psum granularity | multiplications              |
//! |------------------|------------------------------|
//! | Layer            | 1                            |
//! | Array            | `n_array * n_oc`             |
//! | Column           | `n_split * n_array * n_oc`   |
//!
//! `n_array * n_oc` counts mapped output channels summed over arrays, so
//! partially filled edge arrays contribute only their mapped channels.

use serde::Serialize;

use crate::cim_conv::CimLayerConfig;
use crate::error::{Error, Result};
use crate::quantizer::Granularity;
use crate::tiler::{plan_tiling, TilingPlan};

fn groups(gran: Granularity, plan: &TilingPlan, n_split: usize) -> usize {
    match gran {
        Granularity::Layer => 1,
        Granularity::Array => plan.n_array(),
        Granularity::Column => plan.n_columns(n_split),
    }
}

pub fn dequant_mults(_w_gran: Granularity, p_gran: Granularity, plan: &TilingPlan, n_split: usize) -> usize {
    match p_gran {
        Granularity::Layer => 1,
        Granularity::Array => plan.mapped_columns(),
        Granularity::Column => plan.n_columns(n_split),
    }
}

/// `(stored_w, stored_p, stored_fused)`.
pub fn scale_storage(w_gran: Granularity, p_gran: Granularity, plan: &TilingPlan, n_split: usize) -> (usize, usize, usize) {
    (
        groups(w_gran, plan, n_split),
        groups(p_gran, plan, n_split),
        dequant_mults(w_gran, p_gran, plan, n_split),
    )
}

/// A convolution layer as seen by the cost model.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub cfg: CimLayerConfig,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerOverhead {
    pub layer: String,
    pub w_gran: Granularity,
    pub p_gran: Granularity,
    pub n_array: usize,
    pub n_oc: usize,
    pub n_split: usize,
    pub dequant_mults: usize,
    pub stored_scales_w: usize,
    pub stored_scales_p: usize,
    pub stored_fused: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverheadReport {
    pub layers: Vec<LayerOverhead>,
    pub total_dequant_mults: usize,
    pub total_stored_w: usize,
    pub total_stored_p: usize,
    pub total_stored_fused: usize,
}

pub fn layer_overhead(desc: &LayerDesc) -> Result<LayerOverhead> {
    desc.cfg.validate()?;
    let plan = plan_tiling(desc.c_in, desc.c_out, desc.k, desc.cfg.array)?;
    let ns = desc.cfg.n_split()?;
    let (w, p, f) = scale_storage(desc.cfg.w_gran, desc.cfg.p_gran, &plan, ns);
    Ok(LayerOverhead {
        layer: desc.name.clone(),
        w_gran: desc.cfg.w_gran,
        p_gran: desc.cfg.p_gran,
        n_array: plan.n_array(),
        n_oc: plan.oc_per_array(),
        n_split: ns,
        dequant_mults: f,
        stored_scales_w: w,
        stored_scales_p: p,
        stored_fused: f,
    })
}

pub fn report(layers: &[LayerDesc]) -> Result<OverheadReport> {
    if layers.is_empty() {
        return Err(Error::InvalidConfig("cost report needs at least one layer".into()));
    }
    let layers = layers.iter().map(layer_overhead).collect::<Result<Vec<_>>>()?;
    Ok(OverheadReport {
        total_dequant_mults: layers.iter().map(|l| l.dequant_mults).sum(),
        total_stored_w: layers.iter().map(|l| l.stored_scales_w).sum(),
        total_stored_p: layers.iter().map(|l| l.stored_scales_p).sum(),
        total_stored_fused: layers.iter().map(|l| l.stored_fused).sum(),
        layers,
    })
}
