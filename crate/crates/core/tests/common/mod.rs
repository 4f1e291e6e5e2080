//! Brute-force f64 references shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use forwardbench::data::{load_raw, prepare, DatasetName, DatasetSpec, PreparedData};
use forwardbench::{RngState, Tensor};

pub fn data_root() -> PathBuf {
    std::env::var_os("FORWARDBENCH_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")))
}

pub fn load(name: DatasetName, subset: usize, test_subset: usize, seed: u64) -> PreparedData {
    let mut spec = DatasetSpec::new(name, data_root());
    spec.subset = subset;
    spec.test_subset = test_subset;
    let (train, test) = load_raw(&spec).expect("dataset files present");
    prepare(&train, &test, &spec, &mut RngState::new(seed)).expect("prepare")
}

/// Writes straight to the process stderr so the line survives test output capture.
pub fn report(id: u32, title: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let line = format!("[{status}] criterion {id:>2}: {title} | {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

pub fn random(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

pub fn labels(n: usize, classes: usize, rng: &mut RngState) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `log Σ exp(z) − z[y]`, by shifting with the max.
pub fn ce_of_logits(z: &[f64], y: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

pub fn mean_ce(logits: &Tensor<f64>, y: &[usize]) -> f64 {
    let c = logits.cols();
    y.iter()
        .enumerate()
        .map(|(i, &l)| ce_of_logits(&logits.data()[i * c..(i + 1) * c], l))
        .sum::<f64>()
        / y.len() as f64
}

/// Direct convolution, zero padding, channel-major layout.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    input: [usize; 3],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let [c, h, wd] = input;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < wd {
                                acc += w[((o * c + ci) * k + ky) * k + kx] * x[(ci * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero in
/// both gradients compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-7;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every entry of the tensors `params` exposes.
pub fn check_grads<M: Clone>(
    model: &M,
    params: impl Fn(&mut M) -> Vec<&mut Tensor<f64>>,
    loss: impl Fn(&M) -> f64,
    analytic: &[&Tensor<f64>],
) -> f64 {
    let mut m = model.clone();
    let sizes: Vec<usize> = params(&mut m).iter().map(|t| t.len()).collect();
    assert_eq!(sizes.len(), analytic.len(), "one analytic gradient per tensor");
    let mut worst: f64 = 0.0;
    for (t, &n) in sizes.iter().enumerate() {
        assert_eq!(analytic[t].len(), n);
        for i in 0..n {
            let orig = params(&mut m)[t].data()[i];
            params(&mut m)[t].data_mut()[i] = orig + FD_STEP;
            let up = loss(&m);
            params(&mut m)[t].data_mut()[i] = orig - FD_STEP;
            let down = loss(&m);
            params(&mut m)[t].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[t].data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}
