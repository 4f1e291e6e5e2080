//! Acceptance suite. Every test prints one `[PASS]`/`[FAIL]` line for its
//! criterion before asserting, and takes a shared lock so that timings and
//! memory traces are not disturbed by concurrently running tests.

mod common;

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use common::{check_grads, labels, mean_ce, naive_conv, naive_matmul, random, rel_err, report};
use forwardbench::bench::{
    compare, run_experiment_with, ExperimentConfig, MetricSummary, RunMode, RunOptions,
};
use forwardbench::data::{load_raw, overlay_rows, DatasetName, DatasetSpec, LabeledBatch, PreparedData};
use forwardbench::models::{
    build_mlp, conv_forward, Activation, Checkpoint, CnnSpec, ConvBlockSpec, ConvParams, Dense, MlpSpec, Pool,
};
use forwardbench::ops::{cross_entropy, softmax};
use forwardbench::optim::AdamWConfig;
use forwardbench::search::{early_stop_step, probe, EarlyStopPolicy, SearchSpace, StopDecision};
use forwardbench::telemetry::{level_shifts, plateaus, Telemetry, TelemetrySettings};
use forwardbench::train::bp::{bp_gradients, CnnClassifier};
use forwardbench::train::cafo::{dfa_gradients, predictor_grads, CafoBlock, DfaFeedback};
use forwardbench::train::ff::{ff_layer_grads, goodness_separation, FfNetwork};
use forwardbench::train::mf::{MfLayer, MfMode, MfSchedule};
use forwardbench::train::{
    train, train_cafo_rand, train_ff, train_mf, Algorithm, Architecture, GoodnessAggregation, TrainConfig,
};
use forwardbench::{RngState, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_delta_arithmetic() {
    let _g = serial();
    let start = Instant::now();
    // Table inputs: accuracy %, time s, energy Wh, peak memory MiB.
    let mf = MetricSummary { accuracy_pct: 62.34, time_s: 177.70, energy_wh: 3.17, peak_mem_mib: Some(1120.0) };
    let bp_cifar = MetricSummary { accuracy_pct: 61.13, time_s: 268.45, energy_wh: 5.35, peak_mem_mib: Some(1184.0) };
    let ff = MetricSummary { accuracy_pct: 89.63, time_s: 574.60, energy_wh: 14.28, peak_mem_mib: Some(1190.0) };
    let bp_fmnist = MetricSummary { accuracy_pct: 88.88, time_s: 43.09, energy_wh: 1.48, peak_mem_mib: Some(1168.0) };

    let m = compare("CIFAR-10", "MLP 3x2000", "mf", &mf, &bp_cifar);
    let f = compare("F-MNIST", "MLP 4x2000", "ff", &ff, &bp_fmnist);
    let round2 = |v: f64| forwardbench::bench::round_half_away(v, 2);
    let checks = [
        ("MF dAcc", round2(m.d_acc), 1.21, 0.0),
        ("MF dTime", m.d_time.unwrap(), -33.81, 0.1),
        ("MF dEnergy", m.d_energy.unwrap(), -40.78, 0.1),
        ("MF dMem", m.d_mem.unwrap(), -5.41, 0.1),
        ("FF dAcc", round2(f.d_acc), 0.75, 0.0),
        ("FF dTime", f.d_time.unwrap(), 1233.26, 3.0),
        ("FF dEnergy", f.d_energy.unwrap(), 862.35, 3.0),
        ("FF dMem", f.d_mem.unwrap(), 1.88, 0.1),
    ];
    let elapsed = start.elapsed().as_secs_f64();
    let mut ok = elapsed < 1.0;
    let mut detail = Vec::new();
    for (name, got, want, tol) in checks {
        let pass = (got - want).abs() <= tol + 1e-9;
        ok &= pass;
        detail.push(format!("{name} {got:+.2} vs {want:+.2} (±{tol})"));
    }
    detail.push(format!("{elapsed:.4}s"));
    report(1, "delta arithmetic reproduces the reference rows", ok, &detail.join(", "));
    assert!(ok);
}

// ---------------------------------------------------------------- 2

const GRAD_TOL: f64 = 1e-4;

fn grad_bp_mlp(rng: &mut RngState) -> f64 {
    let spec = MlpSpec { widths: vec![8, 10, 9, 4], activation: Activation::Tanh };
    let mlp = build_mlp::<f64>(&spec, rng).unwrap();
    assert!(mlp.param_count() <= 1000);
    let x = random(&[6, 8], 1.0, rng);
    let y = labels(6, 4, rng);
    let (_, g) = bp_gradients(&mlp, &x, &y).unwrap();
    check_grads(&mlp, |m| m.tensors_mut(), |m| mean_ce(&m.logits(&x).unwrap(), &y), &g.iter().collect::<Vec<_>>())
}

fn grad_bp_relu(rng: &mut RngState) -> f64 {
    let spec = MlpSpec::new(vec![6, 12, 3]);
    let mlp = build_mlp::<f64>(&spec, rng).unwrap();
    let x = random(&[5, 6], 1.0, rng);
    let y = labels(5, 3, rng);
    let (_, g) = bp_gradients(&mlp, &x, &y).unwrap();
    check_grads(&mlp, |m| m.tensors_mut(), |m| mean_ce(&m.logits(&x).unwrap(), &y), &g.iter().collect::<Vec<_>>())
}

fn grad_bp_cnn(rng: &mut RngState) -> f64 {
    let block = |i, o, pool| ConvBlockSpec {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
        pool,
        activation: Activation::Tanh,
    };
    let spec = CnnSpec { input: [2, 6, 6], blocks: vec![block(2, 3, Pool::Max { size: 2 }), block(3, 2, Pool::None)] };
    let net = CnnClassifier::<f64>::build(&spec, 3, rng).unwrap();
    assert!(net.param_count() <= 1000);
    let x = random(&[3, 72], 1.0, rng);
    let y = labels(3, 3, rng);
    let (_, g) = net.gradients(&x, &y).unwrap();
    check_grads(&net, |m| m.tensors_mut(), |m| mean_ce(&m.logits(&x).unwrap(), &y), &g.iter().collect::<Vec<_>>())
}

/// softplus(θ − g) on positives plus softplus(g − θ) on negatives, g = mean of squares.
fn ff_reference_loss(layer: &Dense<f64>, xp: &Tensor<f64>, xn: &Tensor<f64>, theta: f64) -> f64 {
    let softplus = |v: f64| if v > 30.0 { v } else { v.exp().ln_1p() };
    let mut total = 0.0;
    for (x, sign) in [(xp, 1.0), (xn, -1.0)] {
        let z = layer.forward(x).unwrap();
        let w = z.cols();
        let n = z.rows();
        for s in 0..n {
            let g = z.row(s).iter().map(|v| v.max(0.0).powi(2)).sum::<f64>() / w as f64;
            total += softplus(sign * (theta - g)) / n as f64;
        }
    }
    total
}

fn grad_ff(rng: &mut RngState) -> f64 {
    let layer = Dense::<f64>::init(9, 12, rng).unwrap();
    let xp = random(&[7, 9], 1.0, rng);
    let xn = random(&[7, 9], 1.0, rng);
    let theta = 0.8;
    let g = ff_layer_grads(&layer, Activation::Relu, &xp, &xn, theta, GoodnessAggregation::Mean).unwrap();
    check_grads(
        &layer,
        |l| vec![&mut l.weight, &mut l.bias],
        |l| ff_reference_loss(l, &xp, &xn, theta),
        &[&g.weight, &g.bias],
    )
}

fn grad_cafo_predictor(rng: &mut RngState) -> f64 {
    let head = Dense::<f64>::init(20, 5, rng).unwrap();
    let f = random(&[8, 20], 1.0, rng);
    let y = labels(8, 5, rng);
    let (_, dw, db) = predictor_grads(&head, &f, &y).unwrap();
    check_grads(&head, |h| vec![&mut h.weight, &mut h.bias], |h| mean_ce(&h.forward(&f).unwrap(), &y), &[&dw, &db])
}

/// A 2-3-2 cascade: one dense block of width 3, a 2-class head. The block
/// update is `xᵀ · ((e · B) ⊙ relu'(z))` with `e = (softmax − onehot)/n`,
/// spelled out with scalar loops.
fn grad_dfa(rng: &mut RngState) -> (f64, f64) {
    let block = CafoBlock::Dense { layer: Dense::<f64>::init(2, 3, rng).unwrap(), activation: Activation::Relu };
    let head = Dense::<f64>::init(3, 2, rng).unwrap();
    let feedback = DfaFeedback { matrices: vec![random(&[2, 3], 1.0, rng)] };
    let n = 4;
    let x = random(&[n, 2], 1.0, rng);
    let y = labels(n, 2, rng);
    let g = dfa_gradients(std::slice::from_ref(&block), &head, &feedback, &x, &y).unwrap();

    let CafoBlock::Dense { layer, .. } = &block else { unreachable!() };
    let (w, b) = (layer.weight.data(), layer.bias.data());
    let (hw, hb) = (head.weight.data(), head.bias.data());
    let bm = feedback.matrices[0].data();
    let mut dw = [0.0f64; 6];
    let mut db = [0.0f64; 3];
    for s in 0..n {
        let xs = &x.data()[s * 2..s * 2 + 2];
        let z: Vec<f64> = (0..3).map(|j| xs[0] * w[j] + xs[1] * w[3 + j] + b[j]).collect();
        let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let logits: Vec<f64> = (0..2).map(|c| (0..3).map(|j| a[j] * hw[j * 2 + c]).sum::<f64>() + hb[c]).collect();
        let p = softmax(&logits);
        let e: Vec<f64> = (0..2).map(|c| (p[c] - f64::from(u8::from(c == y[s]))) / n as f64).collect();
        for j in 0..3 {
            let delta = (e[0] * bm[j] + e[1] * bm[3 + j]) * if z[j] > 0.0 { 1.0 } else { 0.0 };
            db[j] += delta;
            dw[j] += xs[0] * delta;
            dw[3 + j] += xs[1] * delta;
        }
    }
    let mut explicit: f64 = 0.0;
    for (got, want) in g.blocks[0].0.data().iter().zip(&dw).chain(g.blocks[0].1.data().iter().zip(&db)) {
        explicit = explicit.max((got - want).abs());
    }
    // The head itself learns by its true gradient.
    let top = block.forward(&x).unwrap().output;
    let head_err = check_grads(
        &head,
        |h| vec![&mut h.weight, &mut h.bias],
        |h| mean_ce(&h.forward(&top).unwrap(), &y),
        &[&g.head.0, &g.head.1],
    );
    (explicit, head_err)
}

fn grad_mf(rng: &mut RngState) -> f64 {
    let layer = MfLayer::<f64>::init(7, 9, 4, rng).unwrap();
    let x = random(&[6, 7], 1.0, rng);
    let y = labels(6, 4, rng);
    let g = layer.grads(&x, Activation::Tanh, &y).unwrap();
    let dm = g.projection.clone().unwrap();
    check_grads(
        &layer,
        |l| vec![&mut l.dense.weight, &mut l.dense.bias, &mut l.projection],
        |l| {
            let a = l.dense.forward(&x).unwrap().map(f64::tanh);
            let scores = Tensor::new(vec![6, 4], naive_matmul(a.data(), l.projection.data(), 6, 9, 4)).unwrap();
            mean_ce(&scores, &y)
        },
        &[&g.weight, &g.bias, &dm],
    )
}

#[test]
fn criterion_02_gradient_oracles() {
    let _g = serial();
    let start = Instant::now();
    let root = RngState::new(2024);
    let (dfa_explicit, dfa_head) = grad_dfa(&mut root.fork(5));
    let results = [
        ("bp_mlp_tanh", grad_bp_mlp(&mut root.fork(1)), GRAD_TOL),
        ("bp_mlp_relu", grad_bp_relu(&mut root.fork(2)), GRAD_TOL),
        ("bp_cnn", grad_bp_cnn(&mut root.fork(3)), GRAD_TOL),
        ("ff_layer", grad_ff(&mut root.fork(4)), GRAD_TOL),
        ("cafo_predictor", grad_cafo_predictor(&mut root.fork(6)), GRAD_TOL),
        ("dfa_explicit", dfa_explicit, 1e-12),
        ("dfa_head", dfa_head, GRAD_TOL),
        ("mf_w_b_m", grad_mf(&mut root.fork(7)), GRAD_TOL),
    ];
    let elapsed = start.elapsed().as_secs_f64();
    let ok = results.iter().all(|(_, e, tol)| *e <= *tol) && elapsed < 60.0;
    let detail: Vec<String> = results.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect();
    report(2, "analytic gradients match finite differences", ok, &format!("{} | {elapsed:.2}s", detail.join(", ")));
    assert!(ok);
}

// ---------------------------------------------------------------- 3

fn blobs(n: usize, features: usize, classes: usize, rng: &mut RngState) -> LabeledBatch {
    let centers: Vec<Vec<f32>> = (0..classes).map(|_| (0..features).map(|_| rng.normal() as f32).collect()).collect();
    let mut data = Vec::with_capacity(n * features);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        ys.push(c);
        data.extend(centers[c].iter().map(|&m| (m + 0.5 * rng.normal() as f32).abs()));
    }
    LabeledBatch::new(Tensor::new(vec![n, features], data).unwrap(), ys, classes, [1, 1, features]).unwrap()
}

fn toy_data(seed: u64) -> PreparedData {
    let mut rng = RngState::new(seed);
    PreparedData { train: blobs(120, 16, 3, &mut rng), val: blobs(30, 16, 3, &mut rng), test: blobs(30, 16, 3, &mut rng) }
}

fn small_config(alg: Algorithm) -> TrainConfig {
    let mut c = TrainConfig::new(alg, 1e-2, 16, 5);
    c.stop = EarlyStopPolicy { patience: 2, min_delta: 0.0, max_epochs: 4 };
    c.mf.schedule = MfSchedule { mode: MfMode::Sequential, layer_epochs: 3 };
    c.cafo.dfa_epochs = 2;
    c
}

#[test]
fn criterion_03_locality() {
    let _g = serial();
    let start = Instant::now();
    let data = toy_data(3);
    let mut notes = Vec::new();
    let mut ok = true;

    // FF: one step restricted to layer 2 leaves layers 1 and 3 bitwise unchanged,
    // and layer 1 trains identically whether or not layers sit above it.
    let ff_cfg = forwardbench::train::FfConfig::default();
    let opt = AdamWConfig::with_lr(1e-2, 0.0);
    let deep = MlpSpec::new(vec![16, 12, 10, 8, 3]);
    let shallow = MlpSpec::new(vec![16, 12, 3]);
    let mut net = FfNetwork::<f32>::build(&deep, &ff_cfg, opt, 1.0, &mut RngState::new(9)).unwrap();
    let before = net.clone();
    let pos = overlay_rows(&data.train.inputs, &data.train.labels, 3, 1.0).unwrap();
    let wrong: Vec<usize> = data.train.labels.iter().map(|&l| (l + 1) % 3).collect();
    let neg = overlay_rows(&data.train.inputs, &wrong, 3, 1.0).unwrap();
    net.train_batch(&pos, &neg, 1..2).unwrap();
    let ff_scope = net.layers[0].layer == before.layers[0].layer
        && net.layers[2].layer == before.layers[2].layer
        && net.layers[1].layer != before.layers[1].layer;
    let mut a = FfNetwork::<f32>::build(&deep, &ff_cfg, opt, 1.0, &mut RngState::new(9)).unwrap();
    let mut b = FfNetwork::<f32>::build(&shallow, &ff_cfg, opt, 1.0, &mut RngState::new(9)).unwrap();
    for _ in 0..5 {
        a.train_batch(&pos, &neg, 0..3).unwrap();
        b.train_batch(&pos, &neg, 0..1).unwrap();
    }
    let ff_indep = a.layers[0].layer == b.layers[0].layer;
    notes.push(format!("ff scoped step {ff_scope}, layer-1 independent of depth {ff_indep}"));
    ok &= ff_scope && ff_indep;

    // CaFo-Rand: block parameters equal their initialization bit for bit.
    let arch = Architecture::Mlp(MlpSpec::new(vec![16, 12, 10, 3]));
    let run = train_cafo_rand(&arch, &data, &small_config(Algorithm::CafoRand), Telemetry::disabled()).unwrap();
    let init = forwardbench::train::cafo::CafoCascade::<f32>::build(
        &arch,
        3,
        forwardbench::train::cafo::CafoMode::Rand,
        &mut RngState::new(5).fork(1),
    )
    .unwrap();
    let blocks_frozen = run.checkpoint.tensors[..4] == init.tensors()[..4].iter().map(|t| (*t).clone()).collect::<Vec<_>>();
    let predictors_moved = run.checkpoint.tensors[4..] != init.tensors()[4..].iter().map(|t| (*t).clone()).collect::<Vec<_>>();
    notes.push(format!("cafo blocks frozen {blocks_frozen}, predictors trained {predictors_moved}"));
    ok &= blocks_frozen && predictors_moved;

    // MF: a layer's trained parameters do not depend on anything stacked above it.
    let cfg = small_config(Algorithm::Mf);
    let deep = train_mf(&MlpSpec::new(vec![16, 12, 10, 3]), &data, &cfg, Telemetry::disabled()).unwrap();
    let shallow = train_mf(&MlpSpec::new(vec![16, 12, 3]), &data, &cfg, Telemetry::disabled()).unwrap();
    let mf_local = deep.checkpoint.tensors[..3] == shallow.checkpoint.tensors[..3];
    notes.push(format!("mf first layer (W, b, M) identical across depths {mf_local}"));
    ok &= mf_local;

    let elapsed = start.elapsed().as_secs_f64();
    ok &= elapsed < 30.0;
    report(3, "local updates leave out-of-scope parameters unchanged", ok, &format!("{} | {elapsed:.2}s", notes.join("; ")));
    assert!(ok);
}

// ---------------------------------------------------------------- 4 and 5

fn experiment(toml: &str, output: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(toml).unwrap();
    c.dataset.root = common::data_root();
    c.run.output = output.to_path_buf();
    c
}

fn mean_test_acc(cfg: &ExperimentConfig, raw: &(LabeledBatch, LabeledBatch)) -> (f64, Vec<f64>) {
    let opts = RunOptions { mode: RunMode::Bench, write: true, progress: None };
    let out = run_experiment_with(cfg, &opts, &raw.0, &raw.1, &train).unwrap();
    assert!(out.record.failed.is_empty(), "failed seeds: {:?}", out.record.failed);
    let accs = out.record.runs.iter().map(|r| r.test_acc).collect();
    (out.record.aggregate.unwrap().test_acc.mean, accs)
}

const MNIST_PARITY: &str = r#"
[dataset]
name = "mnist"
[model]
hidden = [1000, 1000]
[train]
algorithm = "ALG"
[search]
n_trials = 10
space = { lr = { min = 1e-4, max = 1e-2 }, batch_sizes = [32, 64, 128], mf_layer_epochs = [2, 6] }
[stop]
patience = 2
max_epochs = 6
[telemetry]
enabled = false
[run]
seeds = [0, 1, 2]
"#;

#[test]
fn criterion_04_mf_parity_mnist() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(DatasetName::Mnist, common::data_root());
    let raw = load_raw(&spec).unwrap();
    let total = raw.0.len() + raw.1.len();
    let bp = experiment(&MNIST_PARITY.replace("ALG", "bp"), &dir.path().join("bp"));
    let mf = experiment(&MNIST_PARITY.replace("ALG", "mf"), &dir.path().join("mf"));
    let (bp_acc, bp_runs) = mean_test_acc(&bp, &raw);
    let (mf_acc, mf_runs) = mean_test_acc(&mf, &raw);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = mf_acc >= bp_acc - 0.015 && elapsed < 1800.0;
    report(
        4,
        "MF mean test accuracy within 1.5 pp of BP on MNIST",
        ok,
        &format!(
            "{total} samples, MF {:.2}% {:?} vs BP {:.2}% {:?}, delta {:+.2} pp | {elapsed:.0}s",
            100.0 * mf_acc,
            mf_runs,
            100.0 * bp_acc,
            bp_runs,
            100.0 * (mf_acc - bp_acc)
        ),
    );
    assert!(ok);
}

const CIFAR_ORDERING: &str = r#"
[dataset]
name = "cifar10"
subset = 5000
test_subset = 2000
[model]
kind = "cnn"
[train]
algorithm = "ALG"
lr = 1e-3
batch_size = 64
[train.cafo]
dfa_epochs = 10
dfa_lr = 1e-4
[search]
n_trials = 0
[stop]
patience = 3
max_epochs = 15
[telemetry]
enabled = false
[run]
seeds = [0, 1, 2]
"#;

#[test]
fn criterion_05_cafo_dfa_beats_rand_cifar() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(DatasetName::Cifar10, common::data_root());
    let raw = load_raw(&spec).unwrap();
    let rand = experiment(&CIFAR_ORDERING.replace("ALG", "cafo_rand"), &dir.path().join("rand"));
    let dfa = experiment(&CIFAR_ORDERING.replace("ALG", "cafo_dfa"), &dir.path().join("dfa"));
    let (rand_acc, rand_runs) = mean_test_acc(&rand, &raw);
    let (dfa_acc, dfa_runs) = mean_test_acc(&dfa, &raw);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = dfa_acc >= rand_acc && elapsed < 2700.0;
    report(
        5,
        "CaFo-DFA mean accuracy at least CaFo-Rand on CIFAR-10",
        ok,
        &format!(
            "DFA {:.2}% {:?} vs Rand {:.2}% {:?} | {elapsed:.0}s",
            100.0 * dfa_acc,
            dfa_runs,
            100.0 * rand_acc,
            rand_runs
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_ff_goodness_separation() {
    let _g = serial();
    let start = Instant::now();
    let data = common::load(DatasetName::Mnist, 2000, 1000, 6);
    let spec = MlpSpec::new(vec![784, 500, 500, 10]);
    let mut cfg = TrainConfig::new(Algorithm::Ff, 1e-3, 64, 6);
    cfg.stop = EarlyStopPolicy { patience: 5, min_delta: 0.0, max_epochs: 5 };
    let run = train_ff(&spec, &data, &cfg, Telemetry::disabled()).unwrap();
    let last = run.epochs.last().unwrap();
    let during = last.goodness.iter().all(|g| g.mean_pos_goodness > g.mean_neg_goodness);

    // Held-out check with the returned parameters and fresh negatives.
    let mut net = FfNetwork::<f32>::build(&spec, &cfg.ff, cfg.adamw(), data.max_input(), &mut RngState::new(0)).unwrap();
    for (state, pair) in net.layers.iter_mut().zip(run.checkpoint.tensors.chunks(2)) {
        state.layer.weight = pair[0].clone();
        state.layer.bias = pair[1].clone();
    }
    let held_out = goodness_separation(&net, &data.test, &mut RngState::new(66)).unwrap();
    let after = held_out.iter().all(|g| g.mean_pos_goodness > g.mean_neg_goodness);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = run.epochs.len() == 5 && during && after && elapsed < 300.0;
    let fmt = |v: &[forwardbench::train::LayerGoodness]| {
        v.iter()
            .map(|g| format!("L{} {:.3}>{:.3}", g.layer, g.mean_pos_goodness, g.mean_neg_goodness))
            .collect::<Vec<_>>()
            .join(" ")
    };
    report(
        6,
        "FF positive goodness exceeds negative at every layer",
        ok,
        &format!("epoch 5: {} | held-out: {} | {elapsed:.1}s", fmt(&last.goodness), fmt(&held_out)),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_mf_memory_steps() {
    let _g = serial();
    let start = Instant::now();
    let data = common::load(DatasetName::Mnist, 0, 0, 7);
    let widths = vec![784, 1000, 1000, 1000, 10];
    let spec = MlpSpec::new(widths.clone());
    let mut cfg = TrainConfig::new(Algorithm::Mf, 1e-3, 128, 7);
    cfg.stop = EarlyStopPolicy { patience: 3, min_delta: 0.0, max_epochs: 4 };
    cfg.mf.schedule = MfSchedule { mode: MfMode::Sequential, layer_epochs: 4 };
    let settings = TelemetrySettings { period_ms: 20, ..TelemetrySettings::default() };
    let run = train_mf(&spec, &data, &cfg, Telemetry::start(settings).unwrap()).unwrap();
    // Adam keeps two moments per parameter of a hidden layer and its projection.
    let footprint = |fan_in: usize, w: usize| 2 * (fan_in * w + w + w * 10) * 4;
    let threshold = (1..widths.len() - 1).map(|l| footprint(widths[l - 1], widths[l])).max().unwrap() as f64;
    let levels = plateaus(&run.samples, 2.0 * 1024.0 * 1024.0, 5);
    let shifts = level_shifts(&levels, threshold);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = shifts.len() >= 2 && elapsed < 300.0;
    report(
        7,
        "sequential MF memory trace shows layer-wise steps",
        ok,
        &format!(
            "{} samples, {} plateaus at {:?} MiB, shifts over {:.1} MiB: {:?} | {elapsed:.1}s",
            run.samples.len(),
            levels.len(),
            levels.iter().map(|p| (p.level_bytes / 1048576.0).round()).collect::<Vec<_>>(),
            threshold / 1048576.0,
            shifts.iter().map(|s| (s / 1048576.0).round()).collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_shared_protocol() {
    let _g = serial();
    let mut ok = true;
    let mut notes = Vec::new();

    // Hand-enumerated stopping examples.
    let p2 = EarlyStopPolicy { patience: 2, min_delta: 0.0, max_epochs: 100 };
    let p3 = EarlyStopPolicy { patience: 3, ..p2 };
    let h = [0.10, 0.30, 0.20, 0.20];
    let partial: Vec<_> = (1..=3).map(|n| early_stop_step(&p2, &h[..n]).unwrap().decision).collect();
    let s = early_stop_step(&p2, &h).unwrap();
    let ex1 = partial.iter().all(|d| *d == StopDecision::Continue) && s.decision == StopDecision::Stop && s.best_index == 1;
    let flat = [0.5; 4];
    let partial: Vec<_> = (1..=3).map(|n| early_stop_step(&p3, &flat[..n]).unwrap().decision).collect();
    let s = early_stop_step(&p3, &flat).unwrap();
    let ex2 = partial.iter().all(|d| *d == StopDecision::Continue) && s.decision == StopDecision::Stop && s.best_index == 0;
    let rising: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
    let p_max = EarlyStopPolicy { patience: 1, min_delta: 0.0, max_epochs: 20 };
    let ex3 = (1..20).all(|n| early_stop_step(&p_max, &rising[..n]).unwrap().decision == StopDecision::Continue)
        && early_stop_step(&p_max, &rising).unwrap().decision == StopDecision::Stop;
    notes.push(format!("examples {ex1}/{ex2}/{ex3}"));
    ok &= ex1 && ex2 && ex3;

    // Every algorithm goes through the same search and stopping functions.
    let data = toy_data(8);
    let arch = Architecture::Mlp(MlpSpec::new(vec![16, 12, 10, 3]));
    let space = SearchSpace { batch_sizes: vec![16, 32], ..SearchSpace::default() };
    for alg in [Algorithm::Bp, Algorithm::Ff, Algorithm::CafoRand, Algorithm::CafoDfa, Algorithm::Mf] {
        let cfg = small_config(alg);
        probe::reset();
        let run = train(&arch, &data, &cfg, Telemetry::disabled()).unwrap();
        let c = probe::counts();
        let stopped_epochs = run.epochs.iter().filter(|e| e.phase != "dfa_pretrain").count() as u64;
        let fits_expected = if alg == Algorithm::Mf { 3 } else { 1 };
        let single = c.fits == fits_expected && c.early_stop_steps == stopped_epochs && c.searches == 0;

        probe::reset();
        let mut rng = RngState::new(1);
        let out = forwardbench::search::random_search(&space, 3, &mut rng, |p, seed| {
            train(&arch, &data, &cfg.with_trial(p, seed), Telemetry::disabled())
        })
        .unwrap();
        let c = probe::counts();
        let searched = c.searches == 1 && c.fits == 3 * fits_expected && out.best.is_some();
        notes.push(format!("{} fit/stop/search {single}/{searched}", alg.name()));
        ok &= single && searched;
    }
    report(8, "one search and early-stopping path for every algorithm", ok, &notes.join(", "));
    assert!(ok);
}

// ---------------------------------------------------------------- 9

const DETERMINISM: &str = r#"
[dataset]
name = "mnist"
subset = 600
test_subset = 300
[model]
hidden = [32, 32]
[train]
algorithm = "ALG"
[search]
n_trials = 2
space = { lr = { min = 1e-3, max = 1e-2 }, batch_sizes = [32, 64], mf_layer_epochs = [1, 2], ff_theta = [1.0, 3.0] }
[stop]
patience = 1
max_epochs = 2
[run]
seeds = [3]
"#;

#[test]
fn criterion_09_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { subset: 0, ..DatasetSpec::new(DatasetName::Mnist, common::data_root()) };
    let raw = load_raw(&spec).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for alg in ["bp", "mf", "ff"] {
        let read = |p: &Path| std::fs::read(p).unwrap();
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out_dir = dir.path().join(format!("{alg}_{rep}"));
            let cfg = experiment(&DETERMINISM.replace("ALG", alg), &out_dir);
            let opts = RunOptions { mode: RunMode::Bench, write: true, progress: None };
            let r = run_experiment_with(&cfg, &opts, &raw.0, &raw.1, &train).unwrap();
            outs.push((r.record.runs[0].curves.clone(), r.record.runs[0].test_acc, out_dir));
        }
        let (a, b) = (&outs[0], &outs[1]);
        let seed_dir = |d: &Path| d.join("seed_3");
        let same_curves = a.0 == b.0 && a.1 == b.1;
        let same_ckpt = read(&seed_dir(&a.2).join("checkpoint.fwdb")) == read(&seed_dir(&b.2).join("checkpoint.fwdb"));
        let same_trials = read(&seed_dir(&a.2).join("trials.jsonl")) == read(&seed_dir(&b.2).join("trials.jsonl"));
        let same_epochs = read(&seed_dir(&a.2).join("epochs.jsonl")) == read(&seed_dir(&b.2).join("epochs.jsonl"));
        let ck = Checkpoint::load(&seed_dir(&a.2).join("checkpoint.fwdb")).is_ok();
        notes.push(format!("{alg} curves {same_curves} ckpt {same_ckpt} trials {same_trials} epochs {same_epochs}"));
        ok &= same_curves && same_ckpt && same_trials && same_epochs && ck;
    }
    report(9, "repeated bench runs are bitwise identical", ok, &notes.join(", "));
    assert!(ok);
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_kernel_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = RngState::new(10);
    let cases = 1000;
    // Tolerances: f64 paths 1e-10 absolute; f32 paths 1e-4 relative to the f64 reference.
    let (mut mm64, mut mm32, mut sm, mut ce, mut cv64, mut cv32) = (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for _ in 0..cases {
        let (m, k, n) = (1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(16));
        let a = random(&[m, k], 1.0, &mut rng);
        let b = random(&[k, n], 1.0, &mut rng);
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        let got = a.matmul(&b).unwrap();
        let got_tn = a.cast::<f64>();
        let at = Tensor::new(vec![k, m], (0..k * m).map(|i| a.data()[(i % m) * k + i / m]).collect()).unwrap();
        let tn = at.matmul_tn(&b).unwrap();
        let bt = Tensor::new(vec![n, k], (0..n * k).map(|i| b.data()[(i % k) * n + i / k]).collect()).unwrap();
        let nt = got_tn.matmul_nt(&bt).unwrap();
        let got32 = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap();
        for i in 0..m * n {
            mm64 = mm64.max((got.data()[i] - want[i]).abs()).max((tn.data()[i] - want[i]).abs()).max((nt.data()[i] - want[i]).abs());
            mm32 = mm32.max(rel_err(got32.data()[i] as f64, want[i]).min((got32.data()[i] as f64 - want[i]).abs()));
        }

        let c = 2 + rng.below(10);
        let z: Vec<f64> = (0..c).map(|_| 10.0 * rng.normal()).collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        let p = softmax(&z);
        for (pi, zi) in p.iter().zip(&z) {
            sm = sm.max((pi - (zi - mx).exp() / denom).abs());
        }
        let y = rng.below(c);
        ce = ce.max((cross_entropy(&p, y).unwrap() - common::ce_of_logits(&z, y)).abs() / common::ce_of_logits(&z, y).max(1.0));
    }
    for _ in 0..cases {
        let ci = 1 + rng.below(3);
        let co = 1 + rng.below(3);
        let k = [1, 3, 5][rng.below(3)];
        let stride = 1 + rng.below(2);
        let pad = rng.below(k.min(3));
        let h = k + rng.below(6);
        let w = k + rng.below(6);
        let spec = ConvBlockSpec {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride,
            padding: pad,
            pool: Pool::None,
            activation: Activation::Relu,
        };
        let params = ConvParams::<f64> { weight: random(&[co, ci * k * k], 1.0, &mut rng), bias: random(&[co], 1.0, &mut rng) };
        let x = random(&[2, ci * h * w], 1.0, &mut rng);
        let got = conv_forward(&spec, &params, &x, [ci, h, w]).unwrap();
        let p32 = ConvParams::<f32> { weight: params.weight.cast(), bias: params.bias.cast() };
        let got32 = conv_forward(&spec, &p32, &x.cast::<f32>(), [ci, h, w]).unwrap();
        for s in 0..2 {
            let (want, _, _) = naive_conv(x.row(s), params.weight.data(), params.bias.data(), [ci, h, w], co, k, stride, pad);
            for (i, v) in want.iter().enumerate() {
                cv64 = cv64.max((got.pre.row(s)[i] - v).abs());
                cv32 = cv32.max(rel_err(got32.pre.row(s)[i] as f64, *v).min((got32.pre.row(s)[i] as f64 - v).abs()));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = mm64 <= 1e-10 && sm <= 1e-10 && ce <= 1e-10 && cv64 <= 1e-10 && mm32 <= 1e-4 && cv32 <= 1e-4 && elapsed < 60.0;
    report(
        10,
        "kernels agree with f64 brute-force references",
        ok,
        &format!(
            "{cases} cases each: matmul {mm64:.1e}, matmul f32 {mm32:.1e}, softmax {sm:.1e}, ce {ce:.1e}, conv {cv64:.1e}, conv f32 {cv32:.1e} | {elapsed:.2}s"
        ),
    );
    assert!(ok);
}
