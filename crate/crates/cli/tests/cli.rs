use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cimq_cli::checkpoint;
use cimq_cli::commands::{self, ResultRecord, SweepAxis};
use cimq_cli::config::parse_override;
use cimq_cli::ExperimentConfig;
use cimq_core::cost_model;
use cimq_core::data::CIFAR_RECORD;
use serde_json::json;

fn small_config(dir: &Path) -> PathBuf {
    let doc = json!({
        "seed": 5,
        "dataset": {"kind": "synthetic", "n_train": 64, "n_test": 32, "size": 8},
        "layer": {"array": {"rows": 16, "cols": 16}},
        "schedule": {"stage1_epochs": 2, "stage2_epochs": 1, "batch_size": 16},
        "variation": {"trials": 2},
        "sweep": {"sigmas": [0.0, 0.2], "p_bits": [3, 4]},
        "output_dir": dir.join("out"),
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn cimq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cimq")).args(args).output().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

#[test]
fn missing_config_exits_nonzero_with_message() {
    let out = cimq(&["infer", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/config.json"));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for ov in ["schedule.mode=\"TwoStage\"", "layer.cell_bits=3", "bogus=1"] {
        let extra = if ov.starts_with("schedule") { vec!["--override", "schedule.stage2_epochs=0"] } else { vec![] };
        let mut args = vec!["train", "--config", cfg, "--override", ov];
        args.extend(extra);
        let out = cimq(&args);
        assert_eq!(out.status.code(), Some(2), "{ov}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(cimq(&["histogram", "--config", cfg, "--layer", "9"]).status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = cimq(&["train", "--config", cfg_s, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log_a = fs::read(out_a.join(commands::TRAIN_LOG)).unwrap();
    assert_eq!(log_a, fs::read(out_b.join(commands::TRAIN_LOG)).unwrap());
    assert_eq!(header(&out_a.join(commands::TRAIN_LOG)), ["epoch", "stage", "loss", "acc", "steps"]);
    assert_eq!(read_csv(&out_a.join(commands::TRAIN_LOG)).len(), 3);

    let ck = commands::epoch_checkpoint_dir(&out_a, 1);
    let out_r = dir.path().join("r");
    let o = cimq(&[
        "train",
        "--config",
        cfg_s,
        "--out",
        out_r.to_str().unwrap(),
        "--resume",
        ck.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out_r.join(commands::TRAIN_LOG)).unwrap(), log_a);
    for e in 2..=3 {
        let a = checkpoint::read_manifest(&commands::epoch_checkpoint_dir(&out_a, e)).unwrap();
        let r = checkpoint::read_manifest(&commands::epoch_checkpoint_dir(&out_r, e)).unwrap();
        assert_eq!(a, r);
        let blob = |d: &Path| fs::read(d.join(checkpoint::BLOB)).unwrap();
        assert_eq!(blob(&commands::epoch_checkpoint_dir(&out_a, e)), blob(&commands::epoch_checkpoint_dir(&out_r, e)));
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&small_config(dir.path()), &[]).unwrap();
    let state = commands::cmd_train(&cfg, None).unwrap();
    let ck = dir.path().join("ck");
    checkpoint::save(&ck, &state, &cfg.hash()).unwrap();
    let (back, manifest) = checkpoint::load(&ck, cfg.build_model().unwrap()).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(back.model.named_params(), state.model.named_params());
    assert_eq!(back.model.named_buffers(), state.model.named_buffers());
    assert_eq!(back.momentum, state.momentum);
    assert_eq!((back.epochs_done, back.steps), (state.epochs_done, state.steps));
    assert_eq!(back.log, state.log);
    assert!(back.model.psum_quant && back.model.psum_ready && back.model.scales_ready);

    let other = ExperimentConfig::from_json(json!({"model": {"conv_channels": [4]}}), &[]).unwrap();
    assert!(checkpoint::load(&ck, other.build_model().unwrap()).is_err());
}

#[test]
fn infer_outputs_match_cost_model_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let cfg_s = cfg_path.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cimq(&["infer", "--config", cfg_s, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [commands::METRICS, commands::TRACE, commands::TRACE_SUMMARY] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary = read_csv(&a.join(commands::TRACE_SUMMARY));
    assert_eq!(summary.len(), 2);
    for row in &summary {
        assert_eq!(row[1], row[2], "trace columns vs cost model");
        assert_eq!(row[3], row[4], "dequant count vs cost model");
    }
    let trace = read_csv(&a.join(commands::TRACE));
    let layer0 = trace.iter().filter(|r| r[0] == "0").count();
    assert_eq!(layer0.to_string(), summary[0][1]);

    let records: Vec<ResultRecord> = fs::read_to_string(a.join(commands::RECORDS))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let cfg = ExperimentConfig::load(&cfg_path, &[parse_override(&format!("output_dir={:?}", a)).unwrap()]).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].config_hash, cfg.hash());
    assert_eq!(records[0].seed, 5);
}

#[test]
fn granularity_sweep_has_nine_rows_with_cost_model_overheads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&small_config(dir.path()), &[]).unwrap();
    let path = commands::cmd_sweep(&cfg, SweepAxis::Granularity).unwrap();
    let rows = read_csv(&path);
    assert_eq!(rows.len(), 9);
    for r in &rows {
        let mut c = cfg.clone();
        c.layer.w_gran = r[0].parse().unwrap();
        c.layer.p_gran = r[1].parse().unwrap();
        let rep = cost_model::report(&c.layer_descs()).unwrap();
        assert_eq!(r[3], rep.total_dequant_mults.to_string());
        assert_eq!(r[4], rep.total_stored_fused.to_string());
        let acc: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn sigma_sweep_at_zero_matches_inference() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&small_config(dir.path()), &[]).unwrap();
    commands::cmd_train(&cfg, None).unwrap();
    cfg.checkpoint = Some(commands::epoch_checkpoint_dir(&cfg.output_dir, 3));
    let acc = commands::cmd_infer(&cfg).unwrap();
    let rows = read_csv(&commands::cmd_sweep(&cfg, SweepAxis::Sigma).unwrap());
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "0");
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), acc);
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 0.0);

    let rows = read_csv(&commands::cmd_sweep(&cfg, SweepAxis::PBits).unwrap());
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["3", "4"]);
}

#[test]
fn histogram_bins_sum_to_trace_samples() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&small_config(dir.path()), &[]).unwrap();
    commands::cmd_train(&cfg, None).unwrap();
    cfg.checkpoint = Some(commands::epoch_checkpoint_dir(&cfg.output_dir, 3));
    commands::cmd_infer(&cfg).unwrap();
    let path = commands::cmd_histogram(&cfg, 1).unwrap();
    assert_eq!(header(&path), ["column_id", "bin", "count"]);
    let mut per_col = std::collections::BTreeMap::<String, u64>::new();
    for r in read_csv(&path) {
        *per_col.entry(r[0].clone()).or_default() += r[2].parse::<u64>().unwrap();
    }
    let trace = read_csv(&cfg.output_dir.join(commands::TRACE));
    let layer1: Vec<_> = trace.iter().filter(|r| r[0] == "1").collect();
    assert_eq!(per_col.len(), layer1.len());
    for r in layer1 {
        assert_eq!(per_col[&r[1]].to_string(), r[5]);
    }
}

#[test]
fn cost_report_rows_and_total() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let out = dir.path().join("c");
    let o = cimq(&["cost-report", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let p = out.join(commands::COST_REPORT);
    assert_eq!(
        header(&p),
        ["layer", "w_gran", "p_gran", "n_array", "n_oc", "n_split", "dequant_mults", "stored_fused"]
    );
    let rows = read_csv(&p);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], "total");
    let sum: usize = rows[..2].iter().map(|r| r[6].parse::<usize>().unwrap()).sum();
    assert_eq!(rows[2][6], sum.to_string());
}

#[test]
fn cifar_files_load_and_truncation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![0u8; 5 * CIFAR_RECORD];
    for (i, rec) in bytes.chunks_mut(CIFAR_RECORD).enumerate() {
        rec[0] = (i % 10) as u8;
        rec[1 + i] = 200;
    }
    let train = dir.path().join("data_batch_1.bin");
    let test = dir.path().join("test_batch.bin");
    fs::write(&train, &bytes).unwrap();
    fs::write(&test, &bytes[..3 * CIFAR_RECORD]).unwrap();
    let doc = json!({"dataset": {"kind": "cifar10", "train": [train, train], "test": test, "limit_train": 7, "limit_test": null}});
    let cfg = ExperimentConfig::from_json(doc, &[]).unwrap();
    let (tr, te) = commands::load_data(&cfg).unwrap();
    assert_eq!((tr.len(), te.len()), (7, 3));
    assert_eq!(tr.image_shape(), (3, 32, 32));
    assert_eq!(tr.labels()[5], 0);

    fs::write(&test, &bytes[..2 * CIFAR_RECORD + 100]).unwrap();
    let err = commands::load_data(&cfg).unwrap_err().to_string();
    assert!(err.contains(&(2 * CIFAR_RECORD).to_string()), "{err}");
}
