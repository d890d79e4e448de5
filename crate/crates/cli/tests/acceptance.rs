//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cimq_cli::commands;
use cimq_cli::ExperimentConfig;
use cimq_core::bitsplit::{self, digit};
use cimq_core::cim_conv::{reference_forward, CimConv, CimLayerConfig, ConvScales, ForwardOptions};
use cimq_core::cost_model;
use cimq_core::quantizer::{quantize_value, Granularity};
use cimq_core::seeds;
use cimq_core::tiler::ArrayShape;
use cimq_core::trainer::{train_from, EpochLog, ScheduleMode, ToyModel, TrainState};
use cimq_core::variation::{variation_sweep, SweepRow};
use cimq_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use Granularity::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, o: &Outcome, t: Duration) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    // Written straight to stderr so the line shows even when output is captured.
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} [{verdict}] {name}: {} ({:.1}s)",
        o.detail,
        t.as_secs_f64()
    );
}

fn random_layer(rng: &mut ChaCha8Rng) -> (CimLayerConfig, usize, usize, usize) {
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let rows = rng.random_range(8..=64usize).max(k * k);
    let cols = rng.random_range(8..=64usize);
    let (w_bits, cell_bits) = [(2, 1), (2, 2), (4, 1), (4, 2), (4, 4), (8, 1), (8, 2), (8, 4)][rng.random_range(0..8)];
    let cfg = CimLayerConfig {
        w_bits,
        a_bits: rng.random_range(2..=8),
        p_bits: rng.random_range(2..=8),
        cell_bits,
        array: ArrayShape { rows, cols },
        w_gran: Granularity::ALL[rng.random_range(0..3)],
        p_gran: Granularity::ALL[rng.random_range(0..3)],
        stride: rng.random_range(1..=2),
        pad: rng.random_range(0..=1),
        a_signed: rng.random_bool(0.3),
    };
    (cfg, rng.random_range(1..=32), rng.random_range(1..=32), k)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut failures = 0;
    let mut cases = 0;
    for bits in [2u32, 4, 8] {
        for cell in [1u32, 2, 4] {
            if bits % cell != 0 {
                continue;
            }
            let codes: Vec<i64> = (-(1i64 << (bits - 1))..(1i64 << (bits - 1))).collect();
            let planes = bitsplit::split(&codes, bits, cell).unwrap();
            failures += bitsplit::recombine(&planes).iter().zip(&codes).filter(|(a, b)| a != b).count();
            cases += codes.len();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        pass: failures == 0 && secs < 1.0,
        detail: format!("{cases} codes, {failures} failures, {secs:.4}s"),
    }
}

/// Dequantized operands through a nested-loop convolution. Weights are the
/// shift-added digit planes of each split's own quantized duplicate.
fn oracle(layer: &CimConv, x: &Tensor, w: &[f64], scales: &ConvScales) -> Tensor {
    let cfg = layer.config();
    let per = layer.weight_len();
    let ns = layer.n_split();
    let xq = x.map(|v| quantize_value(v, scales.s_a, layer.a_spec()) as f64 * scales.s_a);
    let mut weff = vec![0.0; per];
    for s in 0..ns {
        for (i, (e, &v)) in weff.iter_mut().zip(w).enumerate() {
            let sc = scales.s_w[layer.weight_groups().group(s * per + i)];
            let code = quantize_value(v, sc, layer.w_spec());
            *e += (digit(code, cfg.cell_bits, s, ns) << (cfg.cell_bits as usize * s)) as f64 * sc;
        }
    }
    let k = layer.kernel();
    let wt = Tensor::from_vec(&[layer.c_out(), layer.c_in(), k, k], weff).unwrap();
    reference_forward(&xq, &wt, cfg.stride, cfg.pad).unwrap()
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = seeds::rng(2, "acceptance", &[]);
    let mut mismatches = 0;
    let mut layers = 0;
    while layers < 100 {
        let (cfg, c_in, c_out, k) = random_layer(&mut rng);
        let layer = CimConv::new(cfg, c_in, c_out, k).unwrap();
        let (h, wd) = (rng.random_range(k.max(2)..=7), rng.random_range(k.max(2)..=7));
        let x_lo = if cfg.a_signed { -1.0 } else { 0.0 };
        let x = Tensor::from_vec(&[2, c_in, h, wd], uniform(&mut rng, 2 * c_in * h * wd, x_lo, 1.0)).unwrap();
        let w = uniform(&mut rng, layer.weight_len(), -1.0, 1.0);
        // Power-of-two scales keep every product and sum exact in any order,
        // so the comparison is bit-exact even with many scale groups.
        let pow2 = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| 2f64.powi(-rng.random_range(lo..=hi));
        let scales = ConvScales {
            s_w: (0..layer.n_weight_groups()).map(|_| pow2(&mut rng, 1, 6)).collect(),
            s_a: pow2(&mut rng, 1, 6),
            s_p: vec![1.0; layer.n_psum_groups()],
        };
        let opts = ForwardOptions::default();
        let (out, _, _) = layer.forward(&x, &w, &scales, &opts).unwrap();
        if out != oracle(&layer, &x, &w, &scales) {
            mismatches += 1;
        }
        // One arbitrary layer-wise weight scale: a single fused factor times
        // an exact integer convolution.
        let lcfg = CimLayerConfig { w_gran: Layer, ..cfg };
        let ll = CimConv::new(lcfg, c_in, c_out, k).unwrap();
        let (s_w, s_a) = (rng.random_range(0.01..0.5), rng.random_range(0.01..0.5));
        let sc = ConvScales {
            s_w: vec![s_w],
            s_a,
            s_p: vec![1.0; ll.n_psum_groups()],
        };
        let (out, _, _) = ll.forward(&x, &w, &sc, &opts).unwrap();
        let qx = x.map(|v| quantize_value(v, s_a, ll.a_spec()) as f64);
        let qw: Vec<f64> = w.iter().map(|&v| quantize_value(v, s_w, ll.w_spec()) as f64).collect();
        let qw = Tensor::from_vec(&[c_out, c_in, k, k], qw).unwrap();
        let expect = reference_forward(&qx, &qw, cfg.stride, cfg.pad).unwrap().map(|v| v * (s_w * s_a));
        if out != expect {
            mismatches += 1;
        }
        layers += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        pass: mismatches == 0 && secs < 60.0,
        detail: format!("{layers} random layers, {mismatches} mismatches, {secs:.2}s"),
    }
}

fn criterion_3() -> Outcome {
    let mut rng = seeds::rng(3, "acceptance", &[]);
    let mut bad = Vec::new();
    let mut full_tilings = 0;
    for case in 0..20 {
        let (mut cfg, c_in, c_out, k) = random_layer(&mut rng);
        cfg.p_gran = Granularity::ALL[case % 3];
        let x = Tensor::from_vec(&[1, c_in, 4, 4], uniform(&mut rng, c_in * 16, 0.0, 1.0)).unwrap();
        let mut live = Vec::new();
        let mut model = Vec::new();
        for w_gran in Granularity::ALL {
            let c = CimLayerConfig { w_gran, ..cfg };
            let layer = CimConv::new(c, c_in, c_out, k).unwrap();
            let w = uniform(&mut rng, layer.weight_len(), -1.0, 1.0);
            let scales = layer.init_scales_lsq(&x, &w).unwrap();
            let opts = ForwardOptions {
                psum_quant: true,
                ..Default::default()
            };
            let (_, trace, _) = layer.forward(&x, &w, &scales, &opts).unwrap();
            live.push(trace.dequant_mults);
            let plan = layer.plan();
            let ns = layer.n_split();
            model.push(cost_model::dequant_mults(w_gran, c.p_gran, plan, ns));
            let full = (0..plan.n_array()).all(|a| plan.mapped_oc(a) == plan.oc_per_array());
            if full {
                full_tilings += 1;
                let literal = match c.p_gran {
                    Layer => 1,
                    Array => plan.n_array() * plan.oc_per_array(),
                    Column => ns * plan.n_array() * plan.oc_per_array(),
                };
                if literal != trace.dequant_mults {
                    bad.push(format!("case {case}: literal {literal} vs live {}", trace.dequant_mults));
                }
            }
        }
        if live != model || live.iter().any(|&v| v != live[0]) {
            bad.push(format!("case {case}: live {live:?} model {model:?}"));
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!("20 configs x 3 weight granularities ({full_tilings} fully tiled); {}", if bad.is_empty() { "all counts match".into() } else { bad.join("; ") }),
    }
}

fn criterion_4() -> Outcome {
    // The finite-difference oracles live in the core crate's gradient tests;
    // they are re-run here through the same public functions.
    let mut rng = seeds::rng(4, "acceptance", &[]);
    use cimq_core::quantizer::{scale_grad, GroupMap, QuantSpec, ScaleTensor};
    let mut worst = 0.0f64;
    let mut points = 0;
    while points < 10_000 {
        let bits = rng.random_range(2..=8u32);
        let spec = QuantSpec::signed(bits, Column).unwrap();
        let s0 = rng.random_range(0.05..2.0);
        let x = rng.random_range(-(spec.q_pos() as f64 + 3.0) * s0..(spec.q_pos() as f64 + 3.0) * s0);
        let z = x / s0;
        let frac = z - z.floor();
        let (lo, hi) = (-(spec.q_neg() as f64), spec.q_pos() as f64);
        if (frac - 0.5).abs() < 1e-3 || (z - lo).abs() < 1e-3 || (z - hi).abs() < 1e-3 {
            continue;
        }
        let u = rng.random_range(-1.0..1.0);
        let st = ScaleTensor::new(vec![s0], GroupMap::single(1)).unwrap();
        let g = scale_grad(&[x], &st, &spec, &[u]).unwrap()[0];
        // Straight-through surrogate: rounding residual and clip branch
        // frozen at s0.
        let f = |s: f64| -> f64 {
            if z <= lo {
                u * s * lo
            } else if z >= hi {
                u * s * hi
            } else {
                u * s * (x / s + (z.round() - z))
            }
        };
        let h = 1e-6 * s0;
        // Gradient scale 1/sqrt(N * q_pos) with N = 1.
        let fd = (f(s0 + h) - f(s0 - h)) / (2.0 * h) / (spec.q_pos() as f64).sqrt();
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
        points += 1;
    }
    let net = network_fd_worst();
    Outcome {
        pass: worst <= 1e-4 && net <= 1e-3,
        detail: format!("scale_grad worst rel err {worst:.2e} over {points} points; network weight grads worst rel err {net:.2e}"),
    }
}

fn network_fd_worst() -> f64 {
    let cfg = ExperimentConfig::from_json(
        json!({
            "dataset": {"kind": "synthetic", "n_train": 8, "n_test": 2, "size": 8},
            "model": {"conv_channels": [3, 4]},
            "layer": {"array": {"rows": 16, "cols": 16}},
        }),
        &[],
    )
    .unwrap();
    let mut m = cfg.build_model().unwrap();
    m.quantized = false;
    let (train, _) = commands::load_data(&cfg).unwrap();
    let (x, y) = train.batch(&(0..8).collect::<Vec<_>>());
    let r = m.forward_backward(&x, &y).unwrap();
    let p0 = m.flat_params();
    let mut worst = 0.0f64;
    let mut offset = 0;
    for (name, v) in m.named_params() {
        if name.ends_with(".w") {
            for i in offset..offset + v.len() {
                let h = 1e-5 * p0[i].abs().max(1.0);
                let mut p = p0.clone();
                p[i] += h;
                m.set_flat_params(&p).unwrap();
                let lp = m.forward_backward(&x, &y).unwrap().loss;
                p[i] = p0[i] - h;
                m.set_flat_params(&p).unwrap();
                let lm = m.forward_backward(&x, &y).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max((fd - r.grads[i]).abs() / fd.abs().max(r.grads[i].abs()).max(1e-6));
            }
        }
        offset += v.len();
    }
    worst
}

fn criterion_5() -> Outcome {
    let mut dead_or_short = 0;
    let mut columns = 0;
    let mut wider_or_equal = 0;
    let mut top = [0usize; 2];
    for seed in 0..20u64 {
        let mut rng = seeds::rng(seed, "acceptance-range", &[]);
        let (c_in, c_out) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let cfg = CimLayerConfig {
            array: ArrayShape::square(32).unwrap(),
            ..Default::default()
        };
        let cc = CimConv::new(cfg, c_in, c_out, 3).unwrap();
        let lc = CimConv::new(CimLayerConfig { w_gran: Layer, ..cfg }, c_in, c_out, 3).unwrap();
        let w = uniform(&mut rng, cc.weight_len(), -1.0, 1.0);
        let x = Tensor::from_vec(&[2, c_in, 8, 8], uniform(&mut rng, 2 * c_in * 64, 0.0, 1.0)).unwrap();
        let s_cc = cc.calibrate_max_abs(&x, &w).unwrap();
        let s_lc = lc.calibrate_max_abs(&x, &w).unwrap();

        let codes = cc.weight_codes(&w, &s_cc.s_w);
        let per = cc.weight_len();
        let groups = cc.weight_groups();
        let mut max_code = vec![0i64; cc.n_weight_groups()];
        let mut max_w = vec![0.0f64; cc.n_weight_groups()];
        for (s, plane) in codes.iter().enumerate() {
            for (i, &c) in plane.iter().enumerate() {
                let g = groups.group(s * per + i);
                max_code[g] = max_code[g].max(c.abs());
                max_w[g] = max_w[g].max(w[i].abs());
            }
        }
        let q_pos = cc.w_spec().q_pos();
        dead_or_short += max_code.iter().zip(&max_w).filter(|(&c, &m)| m > 0.0 && c != q_pos).count();

        let opts = ForwardOptions::default();
        let (_, t_cc, _) = cc.forward(&x, &w, &s_cc, &opts).unwrap();
        let (_, t_lc, _) = lc.forward(&x, &w, &s_lc, &opts).unwrap();
        for (a, b) in t_cc.columns.iter().zip(&t_lc.columns) {
            assert_eq!(a.column, b.column);
            columns += 1;
            let wider = a.max - a.min >= b.max - b.min;
            wider_or_equal += wider as usize;
            if a.split + 1 == cc.n_split() {
                top[0] += 1;
                top[1] += wider as usize;
            }
        }
    }
    let frac = wider_or_equal as f64 / columns as f64;
    Outcome {
        pass: dead_or_short == 0 && frac >= 0.95,
        detail: format!(
            "{dead_or_short} non-dead columns short of q_pos; column-wise range >= layer-wise for {wider_or_equal}/{columns} columns ({:.1}%; top-digit columns {}/{})",
            100.0 * frac,
            top[1],
            top[0]
        ),
    }
}

fn scheme_config(w: Granularity, p: Granularity, seed: u64, mode: ScheduleMode) -> ExperimentConfig {
    ExperimentConfig::from_json(
        json!({
            "seed": seed,
            "layer": {"w_bits": 4, "cell_bits": 2, "p_bits": 4, "w_gran": w, "p_gran": p},
            "schedule": {"mode": mode},
        }),
        &[],
    )
    .unwrap()
}

fn train_scheme(w: Granularity, p: Granularity, seed: u64, mode: ScheduleMode) -> (ToyModel, Vec<EpochLog>) {
    let cfg = scheme_config(w, p, seed, mode);
    let (train, test) = commands::load_data(&cfg).unwrap();
    let mut state = TrainState::new(cfg.build_model().unwrap());
    train_from(&mut state, &train, &test, &cfg.schedule, cfg.seed, |_| Ok(())).unwrap();
    (state.model, state.log)
}

struct ToyRuns {
    /// `[scheme][seed]` for Column/Column, Layer/Column, Layer/Layer.
    models: Vec<Vec<ToyModel>>,
    logs: Vec<Vec<Vec<EpochLog>>>,
    secs: f64,
}

const SCHEMES: [(Granularity, Granularity); 3] = [(Column, Column), (Layer, Column), (Layer, Layer)];
const SEEDS: u64 = 5;

fn toy_runs() -> ToyRuns {
    let t = Instant::now();
    let mut models = Vec::new();
    let mut logs = Vec::new();
    for (w, p) in SCHEMES {
        let (m, l): (Vec<_>, Vec<_>) = (0..SEEDS).map(|s| train_scheme(w, p, s, ScheduleMode::OneStage)).unzip();
        models.push(m);
        logs.push(l);
    }
    ToyRuns {
        models,
        logs,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn final_acc(log: &[EpochLog]) -> f64 {
    log.last().unwrap().acc
}

fn criterion_6(runs: &ToyRuns) -> Outcome {
    let means: Vec<f64> = runs
        .logs
        .iter()
        .map(|ls| ls.iter().map(|l| final_acc(l)).sum::<f64>() / ls.len() as f64)
        .collect();
    let (cc, lc, ll) = (means[0], means[1], means[2]);
    let pass = cc >= lc && lc >= ll && (cc - ll) * 100.0 >= 1.0 && runs.secs < 600.0;
    let per_seed: Vec<String> = runs
        .logs
        .iter()
        .zip(SCHEMES)
        .map(|(ls, (w, p))| format!("{w}/{p} {:?}", ls.iter().map(|l| format!("{:.3}", final_acc(l))).collect::<Vec<_>>()))
        .collect();
    Outcome {
        pass,
        detail: format!(
            "mean acc CC {:.2}% LC {:.2}% LL {:.2}%, CC-LL {:.2} points, training {:.0}s; per seed {}",
            cc * 100.0,
            lc * 100.0,
            ll * 100.0,
            (cc - ll) * 100.0,
            runs.secs,
            per_seed.join(", ")
        ),
    }
}

/// Steps at the first epoch end whose accuracy reaches `target`.
fn steps_to_reach(log: &[EpochLog], target: f64) -> Option<u64> {
    log.iter().find(|e| e.acc >= target).map(|e| e.steps)
}

fn criterion_7(runs: &ToyRuns) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..SEEDS {
        let (_, two) = train_scheme(Column, Column, seed, ScheduleMode::TwoStage);
        let quantized: Vec<EpochLog> = two.iter().filter(|e| e.psum_quant).cloned().collect();
        let best = quantized.iter().map(|e| e.acc).fold(f64::MIN, f64::max);
        let two_steps = steps_to_reach(&quantized, best).unwrap();
        let one_steps = steps_to_reach(&runs.logs[0][seed as usize], best);
        let win = one_steps.is_some_and(|s| s < two_steps);
        wins += win as usize;
        notes.push(format!(
            "seed {seed}: two-stage best {best:.3} at {two_steps} steps, one-stage {}",
            one_steps.map_or("never".into(), |s| format!("at {s} steps"))
        ));
    }
    Outcome {
        pass: wins >= 4,
        detail: format!("one-stage faster in {wins}/5 seeds; {}", notes.join("; ")),
    }
}

fn criterion_8(runs: &ToyRuns) -> Outcome {
    let sigmas = [0.0, 0.1, 0.2, 0.3, 0.4];
    let mut problems = Vec::new();
    let mut rows_by_scheme: Vec<Vec<SweepRow>> = Vec::new();
    for (si, &(w, p)) in SCHEMES.iter().enumerate().filter(|(i, _)| *i != 1) {
        let cfg = scheme_config(w, p, 0, ScheduleMode::OneStage);
        let (_, test) = commands::load_data(&cfg).unwrap();
        let model = &runs.models[si][0];
        let spec = cimq_core::variation::VariationSpec {
            trials: 5,
            ..cfg.variation_spec()
        };
        let rows = variation_sweep(model, &test, &sigmas, &spec).unwrap();
        let clean = model.evaluate(&test).unwrap();
        if rows[0].accuracies.iter().any(|&a| a != clean) {
            problems.push(format!("{w}/{p}: sigma=0 differs from noise-free {clean}"));
        }
        for pair in rows.windows(2) {
            let slack = pair[0].std_acc.max(pair[1].std_acc);
            if pair[1].mean_acc > pair[0].mean_acc + slack {
                problems.push(format!("{w}/{p}: mean rises from sigma {} to {}", pair[0].sigma, pair[1].sigma));
            }
        }
        rows_by_scheme.push(rows);
    }
    let (cc, ll) = (&rows_by_scheme[0], &rows_by_scheme[1]);
    for (a, b) in cc.iter().zip(ll) {
        if a.mean_acc < b.mean_acc {
            problems.push(format!("sigma {}: CC {:.3} < LL {:.3}", a.sigma, a.mean_acc, b.mean_acc));
        }
    }
    let fmt = |rows: &[SweepRow]| {
        rows.iter()
            .map(|r| format!("{}:{:.3}+-{:.3}", r.sigma, r.mean_acc, r.std_acc))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Outcome {
        pass: problems.is_empty(),
        detail: format!(
            "CC [{}] LL [{}]{}",
            fmt(cc),
            fmt(ll),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    }
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cimq")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let doc = json!({
        "seed": 11,
        "dataset": {"kind": "synthetic", "n_train": 64, "n_test": 32, "size": 8},
        "layer": {"array": {"rows": 16, "cols": 16}},
        "schedule": {"stage1_epochs": 2, "stage2_epochs": 1, "batch_size": 16},
        "variation": {"trials": 2},
        "sweep": {"sigmas": [0.0, 0.3], "p_bits": [3, 5]},
    });
    fs::write(&cfg, doc.to_string()).unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = out.to_str().unwrap();
        run_cli(&["train", "--config", cfg, "--out", o]);
        run_cli(&["infer", "--config", cfg, "--out", o]);
        for axis in ["granularity", "sigma", "p-bits"] {
            run_cli(&["sweep", "--config", cfg, "--out", o, "--axis", axis]);
        }
        run_cli(&["histogram", "--config", cfg, "--out", o, "--layer", "0"]);
        run_cli(&["cost-report", "--config", cfg, "--out", o]);
        dirs.push(out);
    }
    let (a, b) = (csv_files(&dirs[0]), csv_files(&dirs[1]));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    Outcome {
        pass: a.len() == 9 && a.len() == b.len() && differing.is_empty(),
        detail: format!("{} CSV files compared ({}), differing: {:?}", a.len(), names.join(" "), differing),
    }
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(n, name, &o, t.elapsed());
        if !o.pass {
            failed.push(n);
        }
    };
    check(1, "bit-split round trip", &mut criterion_1);
    check(2, "pipeline equals im2col oracle", &mut criterion_2);
    check(3, "dequantization counts", &mut criterion_3);
    check(4, "gradient checks", &mut criterion_4);
    check(5, "partial-sum dynamic range", &mut criterion_5);
    let runs = toy_runs();
    check(6, "toy accuracy trend", &mut || criterion_6(&runs));
    check(7, "one-stage vs two-stage", &mut || criterion_7(&runs));
    check(8, "variation robustness", &mut || criterion_8(&runs));
    check(9, "determinism", &mut criterion_9);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
