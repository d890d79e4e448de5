//! Command implementations. Every command writes CSV files with header rows
//! into the output directory and appends metrics to `records.jsonl`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cimq_core::cim_conv::CimTrace;
use cimq_core::cost_model::{self, OverheadReport};
use cimq_core::data::{load_cifar, synthetic, Dataset};
use cimq_core::quantizer::Granularity;
use cimq_core::trainer::{train_from, ToyModel, TrainState};
use cimq_core::variation::{variation_sweep, SweepRow};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{io_err, CliError, Result};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const TRACE: &str = "trace.csv";
pub const TRACE_SUMMARY: &str = "trace_summary.csv";
pub const COST_REPORT: &str = "cost_report.csv";
pub const RECORDS: &str = "records.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Granularity,
    Sigma,
    PBits,
}

impl SweepAxis {
    pub fn file_name(self) -> &'static str {
        match self {
            SweepAxis::Granularity => "sweep_granularity.csv",
            SweepAxis::Sigma => "sweep_sigma.csv",
            SweepAxis::PBits => "sweep_p_bits.csv",
        }
    }
}

/// One metric of one run, appended as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

pub fn histogram_file(layer: usize) -> String {
    format!("histogram_layer{layer}.csv")
}

pub fn epoch_checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(dir)
}

fn append_records(cfg: &ExperimentConfig, metrics: &[(&str, f64)]) -> Result<()> {
    let path = out_dir(cfg)?.join(RECORDS);
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let hash = cfg.hash();
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
    for &(metric, value) in metrics {
        let rec = ResultRecord {
            config_hash: hash.clone(),
            metric: metric.into(),
            value,
            seed: cfg.seed,
            timestamp,
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => Ok(synthetic(spec, cfg.seed)?),
        DatasetSource::Cifar10(c) => {
            let read = |p: &Path, limit| load_cifar(p, limit).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())));
            let parts = c.train.iter().map(|p| read(p, None)).collect::<Result<Vec<_>>>()?;
            let mut train = Dataset::concat(&parts)?;
            if let Some(l) = c.limit_train {
                train = train.take(l);
            }
            Ok((train, read(&c.test, c.limit_test)?))
        }
    }
}

/// Trains per the config's schedule without writing outputs.
fn train_quietly(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<ToyModel> {
    let mut state = TrainState::new(cfg.build_model()?);
    train_from(&mut state, train, test, &cfg.schedule, cfg.seed, |_| Ok(()))?;
    Ok(state.model)
}

/// The checkpointed model if the config names one, else a freshly trained one.
fn obtain_model(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<ToyModel> {
    match &cfg.checkpoint {
        Some(dir) => Ok(checkpoint::load(dir, cfg.build_model()?)?.0.model),
        None => train_quietly(cfg, train, test),
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Accuracy on the test set plus per-column and per-layer trace summaries.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<f64> {
    let (train, test) = load_data(cfg)?;
    let model = obtain_model(cfg, &train, &test)?;
    let (acc, traces) = model.evaluate_traced(&test, None, false)?;
    let report = cost_model::report(&cfg.layer_descs())?;
    let out = out_dir(cfg)?;
    write_csv(
        &out.join(METRICS),
        &["metric", "value"],
        &[
            vec!["accuracy".into(), acc.to_string()],
            vec!["n_test".into(), test.len().to_string()],
        ],
    )?;
    let mut rows = Vec::new();
    for (l, tr) in traces.iter().enumerate() {
        for c in &tr.columns {
            rows.push(vec![
                l.to_string(),
                c.column.to_string(),
                c.array.to_string(),
                c.out_channel.to_string(),
                c.split.to_string(),
                c.samples.to_string(),
                c.min.to_string(),
                c.max.to_string(),
                c.clips.to_string(),
                c.weight_scale.to_string(),
                opt_f64(c.psum_scale),
            ]);
        }
    }
    write_csv(
        &out.join(TRACE),
        &["layer", "column_id", "array", "out_channel", "split", "samples", "min", "max", "clips", "weight_scale", "psum_scale"],
        &rows,
    )?;
    let summary: Vec<Vec<String>> = traces
        .iter()
        .zip(&report.layers)
        .enumerate()
        .map(|(l, (tr, pred))| {
            vec![
                l.to_string(),
                tr.columns.len().to_string(),
                (pred.n_split * model.layers()[l].geom.plan().mapped_columns()).to_string(),
                tr.dequant_mults.to_string(),
                pred.dequant_mults.to_string(),
                tr.psum_quant.to_string(),
                tr.total_samples().to_string(),
                tr.total_clips().to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join(TRACE_SUMMARY),
        &[
            "layer",
            "n_columns",
            "predicted_columns",
            "dequant_mults",
            "predicted_dequant_mults",
            "psum_quant",
            "samples",
            "clips",
        ],
        &summary,
    )?;
    append_records(cfg, &[("accuracy", acc)])?;
    Ok(acc)
}

fn write_train_log(out: &Path, state: &TrainState) -> Result<()> {
    let rows: Vec<Vec<String>> = state
        .log
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.stage.to_string(), e.loss.to_string(), e.acc.to_string(), e.steps.to_string()])
        .collect();
    write_csv(&out.join(TRAIN_LOG), &["epoch", "stage", "loss", "acc", "steps"], &rows)
}

/// Trains per the schedule, checkpointing after every epoch. With `resume`,
/// training continues from that checkpoint and the log includes the
/// epochs it already holds.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainState> {
    let (train, test) = load_data(cfg)?;
    let mut state = match resume {
        Some(dir) => checkpoint::load(dir, cfg.build_model()?)?.0,
        None => TrainState::new(cfg.build_model()?),
    };
    let out = out_dir(cfg)?.to_path_buf();
    let hash = cfg.hash();
    train_from(&mut state, &train, &test, &cfg.schedule, cfg.seed, |s| {
        checkpoint::save(&epoch_checkpoint_dir(&out, s.epochs_done), s, &hash)
            .map_err(|e| cimq_core::Error::Checkpoint(e.to_string()))
    })?;
    write_train_log(&out, &state)?;
    if let Some(last) = state.log.last() {
        append_records(cfg, &[("accuracy", last.acc), ("loss", last.loss), ("steps", last.steps as f64)])?;
    }
    Ok(state)
}

fn with_granularity(cfg: &ExperimentConfig, w: Granularity, p: Granularity) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.layers = c
        .layer_configs()
        .into_iter()
        .map(|mut l| {
            l.w_gran = w;
            l.p_gran = p;
            l
        })
        .collect();
    c.layer.w_gran = w;
    c.layer.p_gran = p;
    c
}

fn with_p_bits(cfg: &ExperimentConfig, bits: u32) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.layers = c
        .layer_configs()
        .into_iter()
        .map(|mut l| {
            l.p_bits = bits;
            l
        })
        .collect();
    c.layer.p_bits = bits;
    c
}

fn overhead(cfg: &ExperimentConfig) -> Result<OverheadReport> {
    Ok(cost_model::report(&cfg.layer_descs())?)
}

/// Trains one model per axis point (granularity, p_bits) or perturbs one
/// trained model per sigma, and writes one CSV row per point.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<PathBuf> {
    let (train, test) = load_data(cfg)?;
    let out = out_dir(cfg)?.join(axis.file_name());
    let mut records = Vec::new();
    match axis {
        SweepAxis::Granularity => {
            let mut rows = Vec::new();
            for w in Granularity::ALL {
                for p in Granularity::ALL {
                    let c = with_granularity(cfg, w, p);
                    let acc = train_quietly(&c, &train, &test)?.evaluate(&test)?;
                    let r = overhead(&c)?;
                    rows.push(vec![
                        w.to_string(),
                        p.to_string(),
                        acc.to_string(),
                        r.total_dequant_mults.to_string(),
                        r.total_stored_fused.to_string(),
                    ]);
                    records.push((format!("accuracy/{w}/{p}"), acc));
                }
            }
            write_csv(&out, &["w_gran", "p_gran", "accuracy", "dequant_mults", "stored_fused"], &rows)?;
        }
        SweepAxis::PBits => {
            let mut rows = Vec::new();
            for &bits in &cfg.sweep.p_bits {
                let c = with_p_bits(cfg, bits);
                c.validate()?;
                let acc = train_quietly(&c, &train, &test)?.evaluate(&test)?;
                let r = overhead(&c)?;
                rows.push(vec![
                    bits.to_string(),
                    acc.to_string(),
                    r.total_dequant_mults.to_string(),
                    r.total_stored_fused.to_string(),
                ]);
                records.push((format!("accuracy/p_bits={bits}"), acc));
            }
            write_csv(&out, &["p_bits", "accuracy", "dequant_mults", "stored_fused"], &rows)?;
        }
        SweepAxis::Sigma => {
            let model = obtain_model(cfg, &train, &test)?;
            let sweep: Vec<SweepRow> = variation_sweep(&model, &test, &cfg.sweep.sigmas, &cfg.variation_spec())?;
            let rows: Vec<Vec<String>> = sweep
                .iter()
                .map(|r| vec![r.sigma.to_string(), r.mean_acc.to_string(), r.std_acc.to_string(), r.accuracies.len().to_string()])
                .collect();
            write_csv(&out, &["sigma", "mean_acc", "std_acc", "trials"], &rows)?;
            records.extend(sweep.iter().map(|r| (format!("mean_acc/sigma={}", r.sigma), r.mean_acc)));
        }
    }
    let refs: Vec<(&str, f64)> = records.iter().map(|(m, v)| (m.as_str(), *v)).collect();
    append_records(cfg, &refs)?;
    Ok(out)
}

/// `(column_id, bin, count)` rows for one layer; bins are integer
/// partial-sum values before partial-sum quantization.
pub fn histogram_rows(trace: &CimTrace) -> Vec<(usize, i64, u64)> {
    trace
        .columns
        .iter()
        .flat_map(|c| c.histogram.iter().map(move |(&bin, &count)| (c.column, bin, count)))
        .collect()
}

pub fn cmd_histogram(cfg: &ExperimentConfig, layer: usize) -> Result<PathBuf> {
    let n = cfg.model.conv_channels.len();
    if layer >= n {
        return Err(CliError::Invalid(format!("layer {layer} out of range for {n} conv layers")));
    }
    let (train, test) = load_data(cfg)?;
    let model = obtain_model(cfg, &train, &test)?;
    let (_, traces) = model.evaluate_traced(&test, None, true)?;
    let rows: Vec<Vec<String>> = histogram_rows(&traces[layer])
        .into_iter()
        .map(|(c, b, n)| vec![c.to_string(), b.to_string(), n.to_string()])
        .collect();
    let path = out_dir(cfg)?.join(histogram_file(layer));
    write_csv(&path, &["column_id", "bin", "count"], &rows)?;
    Ok(path)
}

pub fn cmd_cost_report(cfg: &ExperimentConfig) -> Result<OverheadReport> {
    let r = overhead(cfg)?;
    let mut rows: Vec<Vec<String>> = r
        .layers
        .iter()
        .map(|l| {
            vec![
                l.layer.clone(),
                l.w_gran.to_string(),
                l.p_gran.to_string(),
                l.n_array.to_string(),
                l.n_oc.to_string(),
                l.n_split.to_string(),
                l.dequant_mults.to_string(),
                l.stored_fused.to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "total".into(),
        String::new(),
        String::new(),
        r.layers.iter().map(|l| l.n_array).sum::<usize>().to_string(),
        String::new(),
        String::new(),
        r.total_dequant_mults.to_string(),
        r.total_stored_fused.to_string(),
    ]);
    write_csv(
        &out_dir(cfg)?.join(COST_REPORT),
        &["layer", "w_gran", "p_gran", "n_array", "n_oc", "n_split", "dequant_mults", "stored_fused"],
        &rows,
    )?;
    append_records(cfg, &[("dequant_mults", r.total_dequant_mults as f64)])?;
    Ok(r)
}
