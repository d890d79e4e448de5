//! Log-normal multiplicative device variation, `w_var = w * exp(theta)`
//! with `theta ~ N(0, sigma^2)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seeds;
use crate::trainer::ToyModel;

/// Whether one draw perturbs a whole weight (all its cells alike) or each
/// cell of a bit-split weight independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VariationLevel {
    #[default]
    Weight,
    Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationSpec {
    pub sigma: f64,
    pub level: VariationLevel,
    pub seed: u64,
    pub trials: usize,
}

impl VariationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// `len` i.i.d. draws from `N(0, sigma^2)`, deterministic per seed.
pub fn sample_theta(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = seeds::rng(seed, "theta", &[]);
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

pub fn apply_variation(w: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if w.len() != theta.len() {
        return Err(Error::ShapeMismatch(format!("{} weights, {} theta draws", w.len(), theta.len())));
    }
    Ok(w.iter().zip(theta).map(|(&v, &t)| v * t.exp()).collect())
}

/// Multiplicative factors on each split plane of one layer, `[n_split][len]`.
///
/// Draws for a given `(seed, trial, layer)` are the same standard normals
/// at every sigma, so sweeps over sigma use common random numbers.
pub fn cell_factors(spec: &VariationSpec, trial: usize, layer: usize, n_split: usize, len: usize) -> Vec<Vec<f64>> {
    let seed = seeds::derive(spec.seed, "variation", &[trial as u64, layer as u64]);
    match spec.level {
        VariationLevel::Weight => {
            let f: Vec<f64> = sample_theta(len, spec.sigma, seed).iter().map(|t| t.exp()).collect();
            vec![f; n_split]
        }
        VariationLevel::Cell => {
            let all = sample_theta(len * n_split, spec.sigma, seed);
            all.chunks(len.max(1)).take(n_split).map(|c| c.iter().map(|t| t.exp()).collect()).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub accuracies: Vec<f64>,
}

/// Accuracy of `model` on `data` under `spec.trials` sampled devices per
/// sigma. The standard deviation is the population std over trials.
pub fn variation_sweep(model: &ToyModel, data: &Dataset, sigmas: &[f64], spec: &VariationSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    sigmas
        .iter()
        .map(|&sigma| {
            let s = VariationSpec { sigma, ..*spec };
            s.validate()?;
            let accuracies = (0..s.trials)
                .map(|t| {
                    let factors: Vec<_> = model
                        .layers()
                        .iter()
                        .enumerate()
                        .map(|(i, l)| cell_factors(&s, t, i, l.geom.n_split(), l.geom.weight_len()))
                        .collect();
                    model.evaluate_with(data, Some(&factors))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean_acc, std_acc) = mean_std(&accuracies);
            Ok(SweepRow {
                sigma,
                mean_acc,
                std_acc,
                accuracies,
            })
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
