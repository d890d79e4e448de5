//! Experiment configuration: one JSON document merged over the defaults,
//! then adjusted by `key=value` overrides on dotted paths.

use std::path::{Path, PathBuf};

use cimq_core::cim_conv::CimLayerConfig;
use cimq_core::cost_model::LayerDesc;
use cimq_core::data::SyntheticSpec;
use cimq_core::trainer::{ModelSpec, ToyModel, TrainSchedule};
use cimq_core::variation::{VariationLevel, VariationSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream (data, init, training, variation).
    pub seed: u64,
    pub model: ModelSpec,
    /// CIM settings for every conv layer unless `layers` is non-empty.
    pub layer: CimLayerConfig,
    /// Per-layer CIM settings; each entry is merged over `layer`.
    pub layers: Vec<CimLayerConfig>,
    pub schedule: TrainSchedule,
    pub variation: VariationConfig,
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
    /// Trained model used by `infer`, `histogram` and the sigma sweep. The
    /// model is trained from scratch when absent.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationConfig {
    pub sigma: f64,
    pub level: VariationLevel,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Cifar10(CifarSource),
}

/// CIFAR-10 binary files; `limit_*` keep only the first records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSource {
    pub train: Vec<PathBuf>,
    pub test: PathBuf,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub p_bits: Vec<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::default(),
            layer: CimLayerConfig::default(),
            layers: Vec::new(),
            schedule: TrainSchedule::default(),
            variation: VariationConfig {
                sigma: 0.0,
                level: VariationLevel::Weight,
                trials: 5,
            },
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            output_dir: PathBuf::from("out"),
            sweep: SweepConfig {
                sigmas: vec![0.0, 0.1, 0.2, 0.3, 0.4],
                p_bits: vec![2, 3, 4, 5, 6, 8],
            },
            checkpoint: None,
        }
    }
}

/// Objects merge key by key; anything else is replaced. Objects whose
/// `kind` tags differ are replaced whole.
fn merge(base: &mut Value, over: Value) {
    if let (Value::Object(b), Value::Object(o)) = (&mut *base, &over) {
        let same_kind = match (b.get("kind"), o.get("kind")) {
            (Some(x), Some(y)) => x == y,
            _ => true,
        };
        if same_kind {
            let Value::Object(o) = over else { unreachable!() };
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
            return;
        }
    }
    *base = over;
}

/// Sets `path` (dot separated, numeric segments index arrays) to `value`.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let bad = || CliError::Invalid(format!("override path `{path}` does not exist"));
    let segs: Vec<&str> = path.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(bad());
    }
    let mut cur = root;
    for (i, seg) in segs.iter().enumerate() {
        let last = i + 1 == segs.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| bad())?;
                let slot = items.get_mut(idx).ok_or_else(bad)?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad()),
        };
    }
    Ok(())
}

/// `key=value`; the value is parsed as JSON and falls back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl ExperimentConfig {
    /// Builds a config from a JSON document and overrides, then validates it.
    pub fn from_json(doc: Value, overrides: &[(String, Value)]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        merge(&mut v, doc);
        for (k, val) in overrides {
            set_path(&mut v, k, val.clone())?;
        }
        if let Some(Value::Array(items)) = v.get("layers").cloned() {
            let base = v["layer"].clone();
            let expanded: Vec<Value> = items
                .into_iter()
                .map(|item| {
                    let mut b = base.clone();
                    merge(&mut b, item);
                    b
                })
                .collect();
            v["layers"] = Value::Array(expanded);
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| CliError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigFile {
            path: path.to_path_buf(),
            source,
        })?;
        let doc: Value = serde_json::from_str(&text).map_err(|source| CliError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(doc, overrides)
    }

    pub fn layer_configs(&self) -> Vec<CimLayerConfig> {
        if self.layers.is_empty() {
            vec![self.layer; self.model.conv_channels.len()]
        } else {
            self.layers.clone()
        }
    }

    /// `(channels, height, width)` of the input images.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match &self.dataset {
            DatasetSource::Synthetic(s) => (1, s.size, s.size),
            DatasetSource::Cifar10(_) => (3, 32, 32),
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetSource::Synthetic(_) => 2,
            DatasetSource::Cifar10(_) => 10,
        }
    }

    pub fn variation_spec(&self) -> VariationSpec {
        VariationSpec {
            sigma: self.variation.sigma,
            level: self.variation.level,
            seed: self.seed,
            trials: self.variation.trials,
        }
    }

    /// Freshly initialized model for this config.
    pub fn build_model(&self) -> Result<ToyModel> {
        Ok(ToyModel::with_layer_configs(
            &self.model,
            &self.layer_configs(),
            self.input_shape(),
            self.num_classes(),
            self.seed,
        )?)
    }

    /// Conv layer geometry for the cost model.
    pub fn layer_descs(&self) -> Vec<LayerDesc> {
        let mut c_in = self.input_shape().0;
        self.model
            .conv_channels
            .iter()
            .zip(self.layer_configs())
            .enumerate()
            .map(|(i, (&c_out, cfg))| {
                let d = LayerDesc {
                    name: format!("conv{i}"),
                    cfg,
                    c_in,
                    c_out,
                    k: self.model.kernel,
                };
                c_in = c_out;
                d
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.model.conv_channels.len();
        if !self.layers.is_empty() && self.layers.len() != n {
            return Err(CliError::Invalid(format!("{} entries in `layers` for {n} conv layers", self.layers.len())));
        }
        for cfg in self.layer_configs() {
            cfg.validate()?;
        }
        self.schedule.validate()?;
        self.variation_spec().validate()?;
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.validate()?,
            DatasetSource::Cifar10(c) => {
                if c.train.is_empty() {
                    return Err(CliError::Invalid("cifar10 needs at least one training file".into()));
                }
                if c.limit_train == Some(0) || c.limit_test == Some(0) {
                    return Err(CliError::Invalid("cifar10 limits must be >= 1".into()));
                }
            }
        }
        if self.sweep.sigmas.is_empty() || self.sweep.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(CliError::Invalid("sweep.sigmas must be a non-empty list of values >= 0".into()));
        }
        if self.sweep.p_bits.is_empty() || self.sweep.p_bits.iter().any(|&b| !(2..=16).contains(&b)) {
            return Err(CliError::Invalid("sweep.p_bits must be a non-empty list within 2..=16".into()));
        }
        self.build_model()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The output directory only says
    /// where results go, so it is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }
}
