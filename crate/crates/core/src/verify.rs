//! Self-checks run by `forwardbench verify`: kernels against brute-force
//! references and every analytic gradient against central differences, all
//! in f64.

use serde::Serialize;

use crate::error::Result;
use crate::models::{build_mlp, Activation, CnnSpec, ConvBlockSpec, ConvParams, Dense, MlpSpec, Pool};
use crate::ops::{cross_entropy, softmax, softmax_ce_batch};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::bp::{bp_gradients, CnnClassifier};
use crate::train::cafo::{dfa_direction, predictor_grads};
use crate::train::ff::{ff_layer_grads, goodness, ff_layer_loss, GoodnessAggregation, Polarity};
use crate::train::mf::{mf_output_grads, MfLayer};

/// Largest accepted `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("shape matches data")
}

/// Central differences of `loss` over every entry of the tensors exposed by
/// `params`, compared with `analytic` (same order). Returns the worst error.
fn max_grad_error<M: Clone>(
    model: &M,
    params: impl Fn(&mut M) -> Vec<&mut Tensor<f64>>,
    loss: impl Fn(&M) -> Result<f64>,
    analytic: &[Tensor<f64>],
) -> Result<f64> {
    let mut work = model.clone();
    let counts: Vec<usize> = params(&mut work).iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    for (t, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let orig = params(&mut work)[t].data()[i];
            params(&mut work)[t].data_mut()[i] = orig + STEP;
            let up = loss(&work)?;
            params(&mut work)[t].data_mut()[i] = orig - STEP;
            let down = loss(&work)?;
            params(&mut work)[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[t].data()[i], numeric));
        }
    }
    Ok(worst)
}

fn grad_result(name: &str, worst: Result<f64>) -> CheckResult {
    match worst {
        Ok(w) => CheckResult {
            name: name.into(),
            passed: w <= GRAD_TOLERANCE,
            detail: format!("max relative error {w:.3e}"),
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn labels(n: usize, classes: usize, rng: &mut RngState) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

fn check_bp_mlp(rng: &mut RngState) -> Result<f64> {
    let spec = MlpSpec {
        widths: vec![6, 8, 7, 4],
        activation: Activation::Tanh,
    };
    let mlp = build_mlp::<f64>(&spec, rng)?;
    let x = random(&[5, 6], 1.0, rng);
    let y = labels(5, 4, rng);
    let (_, grads) = bp_gradients(&mlp, &x, &y)?;
    max_grad_error(
        &mlp,
        |m| m.tensors_mut(),
        |m| Ok(softmax_ce_batch(&m.logits(&x)?, &y)?.0),
        &grads,
    )
}

fn check_bp_cnn(rng: &mut RngState) -> Result<f64> {
    let block = |i, o, pool| ConvBlockSpec {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
        pool,
        activation: Activation::Tanh,
    };
    let spec = CnnSpec {
        input: [2, 6, 6],
        blocks: vec![block(2, 3, Pool::Max { size: 2 }), block(3, 2, Pool::None)],
    };
    let net = CnnClassifier::<f64>::build(&spec, 3, rng)?;
    let x = random(&[3, 72], 1.0, rng);
    let y = labels(3, 3, rng);
    let (_, grads) = net.gradients(&x, &y)?;
    max_grad_error(
        &net,
        |m| m.tensors_mut(),
        |m| Ok(softmax_ce_batch(&m.logits(&x)?, &y)?.0),
        &grads,
    )
}

fn ff_loss(layer: &Dense<f64>, x_pos: &Tensor<f64>, x_neg: &Tensor<f64>, theta: f64) -> Result<f64> {
    let mut total = 0.0;
    for (x, pol) in [(x_pos, Polarity::Positive), (x_neg, Polarity::Negative)] {
        let h = Activation::Relu.apply(&layer.forward(x)?);
        let n = h.rows() as f64;
        for s in 0..h.rows() {
            total += ff_layer_loss(goodness(h.row(s), GoodnessAggregation::Mean), theta, pol).0 / n;
        }
    }
    Ok(total)
}

fn check_ff(rng: &mut RngState) -> Result<f64> {
    let layer = Dense::<f64>::init(7, 9, rng)?;
    let xp = random(&[6, 7], 1.0, rng);
    let xn = random(&[6, 7], 1.0, rng);
    let g = ff_layer_grads(&layer, Activation::Relu, &xp, &xn, 0.5, GoodnessAggregation::Mean)?;
    max_grad_error(
        &layer,
        |l| vec![&mut l.weight, &mut l.bias],
        |l| ff_loss(l, &xp, &xn, 0.5),
        &[g.weight, g.bias],
    )
}

fn check_cafo_predictor(rng: &mut RngState) -> Result<f64> {
    let head = Dense::<f64>::init(10, 4, rng)?;
    let f = random(&[6, 10], 1.0, rng);
    let y = labels(6, 4, rng);
    let (_, dw, db) = predictor_grads(&head, &f, &y)?;
    max_grad_error(
        &head,
        |h| vec![&mut h.weight, &mut h.bias],
        |h| Ok(softmax_ce_batch(&h.forward(&f)?, &y)?.0),
        &[dw, db],
    )
}

/// `(e · B) ⊙ act'(pre)` against an explicit triple loop.
fn check_dfa(rng: &mut RngState) -> Result<f64> {
    let (n, k, w) = (4, 3, 11);
    let e = random(&[n, k], 1.0, rng);
    let b = random(&[k, w], 1.0, rng);
    let pre = random(&[n, w], 1.0, rng);
    let got = dfa_direction(&e, &b, &pre, Activation::Tanh)?;
    let mut worst: f64 = 0.0;
    for s in 0..n {
        for j in 0..w {
            let mut acc = 0.0;
            for c in 0..k {
                acc += e.data()[s * k + c] * b.data()[c * w + j];
            }
            let t = pre.data()[s * w + j].tanh();
            worst = worst.max(rel_err(got.data()[s * w + j], acc * (1.0 - t * t)));
        }
    }
    Ok(worst)
}

fn check_mf_layer(rng: &mut RngState) -> Result<f64> {
    let layer = MfLayer::<f64>::init(6, 8, 3, rng)?;
    let x = random(&[5, 6], 1.0, rng);
    let y = labels(5, 3, rng);
    let g = layer.grads(&x, Activation::Tanh, &y)?;
    let dm = g.projection.expect("hidden layer");
    max_grad_error(
        &layer,
        |l| vec![&mut l.dense.weight, &mut l.dense.bias, &mut l.projection],
        |l| Ok(softmax_ce_batch(&l.activations(&x, Activation::Tanh)?.matmul(&l.projection)?, &y)?.0),
        &[g.weight, g.bias, dm],
    )
}

fn check_mf_output(rng: &mut RngState) -> Result<f64> {
    let out = Dense::<f64>::init(6, 3, rng)?;
    let x = random(&[5, 6], 1.0, rng);
    let y = labels(5, 3, rng);
    let g = mf_output_grads(&out, &x, &y)?;
    max_grad_error(
        &out,
        |l| vec![&mut l.weight, &mut l.bias],
        |l| Ok(softmax_ce_batch(&l.forward(&x)?, &y)?.0),
        &[g.weight, g.bias],
    )
}

fn check_matmul(rng: &mut RngState) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (m, k, n) = (1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9));
        let a = random(&[m, k], 1.0, rng);
        let b = random(&[k, n], 1.0, rng);
        let c = a.matmul(&b)?;
        for i in 0..m {
            for j in 0..n {
                let r: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                worst = worst.max((c.data()[i * n + j] - r).abs());
            }
        }
    }
    Ok(worst)
}

fn check_softmax_ce(rng: &mut RngState) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = 2 + rng.below(8);
        let z: Vec<f64> = (0..k).map(|_| 5.0 * rng.normal()).collect();
        let p = softmax(&z);
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        for (pi, zi) in p.iter().zip(&z) {
            worst = worst.max((pi - zi.exp() / total).abs());
        }
        let y = rng.below(k);
        worst = worst.max((cross_entropy(&p, y)? - (total.ln() - z[y])).abs());
    }
    Ok(worst)
}

fn check_conv(rng: &mut RngState) -> Result<f64> {
    let spec = ConvBlockSpec {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 2,
        padding: 1,
        pool: Pool::None,
        activation: Activation::Tanh,
    };
    let input = [2, 7, 5];
    let params = ConvParams::<f64>::init(&spec, rng)?;
    let x = random(&[2, 70], 1.0, rng);
    let got = crate::models::conv_forward(&spec, &params, &x, input)?;
    let [o, oh, ow] = spec.conv_shape(input)?;
    let mut worst: f64 = 0.0;
    for s in 0..2 {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = params.bias.data()[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let y = (oy * 2 + ky) as isize - 1;
                                let xx = (ox * 2 + kx) as isize - 1;
                                if y < 0 || y >= 7 || xx < 0 || xx >= 5 {
                                    continue;
                                }
                                acc += params.weight.data()[oc * 18 + (ic * 3 + ky) * 3 + kx]
                                    * x.data()[s * 70 + (ic * 7 + y as usize) * 5 + xx as usize];
                            }
                        }
                    }
                    worst = worst.max((got.pre.data()[s * o * oh * ow + (oc * oh + oy) * ow + ox] - acc).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn kernel_result(name: &str, tol: f64, worst: Result<f64>) -> CheckResult {
    match worst {
        Ok(w) => CheckResult {
            name: name.into(),
            passed: w <= tol,
            detail: format!("max abs error {w:.3e} (tolerance {tol:e})"),
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let root = RngState::new(seed);
    vec![
        kernel_result("matmul", 1e-12, check_matmul(&mut root.fork(1))),
        kernel_result("softmax_cross_entropy", 1e-12, check_softmax_ce(&mut root.fork(2))),
        kernel_result("conv_forward", 1e-12, check_conv(&mut root.fork(3))),
        grad_result("bp_mlp", check_bp_mlp(&mut root.fork(4))),
        grad_result("bp_cnn", check_bp_cnn(&mut root.fork(5))),
        grad_result("ff_layer", check_ff(&mut root.fork(6))),
        grad_result("cafo_predictor", check_cafo_predictor(&mut root.fork(7))),
        grad_result("dfa_direction", check_dfa(&mut root.fork(8))),
        grad_result("mf_layer", check_mf_layer(&mut root.fork(9))),
        grad_result("mf_output", check_mf_output(&mut root.fork(10))),
    ]
}
