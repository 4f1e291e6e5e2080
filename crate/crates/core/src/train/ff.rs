//! Forward-Forward: every hidden layer learns to give high goodness to
//! inputs carrying their true label and low goodness to inputs carrying a
//! wrong one. Layers never exchange gradients; each one sees the detached,
//! L2-normalized output of the layer below, rescaled to unit RMS.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::bp::argmax_rows;
use super::{
    check_loss, checkpoint_spec, chunked_accuracy, finish_run, minibatches, Algorithm, EpochRecord, LayerGoodness,
    RunResult, TrainConfig, TrainedRun,
};
use crate::data::{overlay_rows, wrong_label, LabeledBatch, PreparedData};
use crate::error::{Error, Result};
use crate::models::{Activation, Checkpoint, Dense, MlpSpec};
use crate::ops::{l2_normalize_rows, sigmoid, softplus};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::RngState;
use crate::search::{fit_with_early_stopping, EpochTrainer};
use crate::telemetry::Telemetry;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoodnessAggregation {
    /// Mean of squared activations.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfSchedule {
    /// Every layer takes a step on every batch.
    #[default]
    Simultaneous,
    /// One layer at a time, `greedy_layer_epochs` epochs each.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfConfig {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub aggregation: GoodnessAggregation,
    /// Count the first hidden layer's goodness at prediction time.
    #[serde(default)]
    pub include_first_layer: bool,
    #[serde(default)]
    pub schedule: FfSchedule,
    #[serde(default = "default_greedy_epochs")]
    pub greedy_layer_epochs: usize,
    /// Label overlay value; defaults to the largest training input.
    #[serde(default)]
    pub intensity: Option<f32>,
}

fn default_theta() -> f64 {
    2.0
}

fn default_greedy_epochs() -> usize {
    5
}

impl Default for FfConfig {
    fn default() -> Self {
        Self {
            theta: default_theta(),
            aggregation: GoodnessAggregation::Mean,
            include_first_layer: false,
            schedule: FfSchedule::Simultaneous,
            greedy_layer_epochs: default_greedy_epochs(),
            intensity: None,
        }
    }
}

impl FfConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(Error::Config("goodness threshold must be finite".into()));
        }
        if self.greedy_layer_epochs == 0 {
            return Err(Error::Config("greedy_layer_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn goodness<T: Scalar>(activations: &[T], aggregation: GoodnessAggregation) -> T {
    let ss: T = activations.iter().map(|&a| a * a).sum();
    match aggregation {
        GoodnessAggregation::Sum => ss,
        GoodnessAggregation::Mean => ss / T::from_f64(activations.len().max(1) as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Loss for one goodness value and its derivative with respect to `g`.
pub fn ff_layer_loss<T: Scalar>(g: T, theta: T, polarity: Polarity) -> (T, T) {
    match polarity {
        Polarity::Positive => (softplus(theta - g), -sigmoid(theta - g)),
        Polarity::Negative => (softplus(g - theta), sigmoid(g - theta)),
    }
}

/// Result of one layer's local loss on a positive and a negative batch.
#[derive(Debug, Clone)]
pub struct FfLayerGrads<T> {
    /// Mean positive loss plus mean negative loss.
    pub loss: T,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub pos_out: Tensor<T>,
    pub neg_out: Tensor<T>,
    pub mean_pos_goodness: T,
    pub mean_neg_goodness: T,
}

fn goodness_backward<T: Scalar>(
    layer: &Dense<T>,
    activation: Activation,
    x: &Tensor<T>,
    theta: T,
    aggregation: GoodnessAggregation,
    polarity: Polarity,
) -> Result<(T, Tensor<T>, Tensor<T>, Tensor<T>, T)> {
    let z = layer.forward(x)?;
    let h = activation.apply(&z);
    let n = x.rows();
    let width = h.cols();
    let scale = match aggregation {
        GoodnessAggregation::Mean => T::from_f64(2.0 / width as f64),
        GoodnessAggregation::Sum => T::from_f64(2.0),
    };
    let inv_n = T::from_f64(1.0 / n.max(1) as f64);
    let mut dz = h.clone();
    let mut loss = T::zero();
    let mut g_total = T::zero();
    for s in 0..n {
        let g = goodness(h.row(s), aggregation);
        let (l, dg) = ff_layer_loss(g, theta, polarity);
        loss += l * inv_n;
        g_total += g;
        let f = dg * inv_n * scale;
        dz.row_mut(s).iter_mut().for_each(|v| *v *= f);
    }
    dz.mul_assign(&activation.derivative(&z))?;
    let (dw, db) = layer.param_grads(x, &dz)?;
    Ok((loss, dw, db, h, g_total * inv_n))
}

/// Input for the next layer: the direction of `h` only, scaled to unit RMS
/// so that each feature stays of order one whatever the width.
pub fn pass_up<T: Scalar>(h: &Tensor<T>) -> Tensor<T> {
    let mut out = l2_normalize_rows(h).0;
    let scale = T::from_f64((h.cols() as f64).sqrt());
    out.data_mut().iter_mut().for_each(|v| *v *= scale);
    out
}

/// Gradients of one layer's local loss. Inputs are treated as constants.
pub fn ff_layer_grads<T: Scalar>(
    layer: &Dense<T>,
    activation: Activation,
    x_pos: &Tensor<T>,
    x_neg: &Tensor<T>,
    theta: T,
    aggregation: GoodnessAggregation,
) -> Result<FfLayerGrads<T>> {
    let (lp, mut dw, mut db, hp, gp) = goodness_backward(layer, activation, x_pos, theta, aggregation, Polarity::Positive)?;
    let (ln, dwn, dbn, hn, gn) = goodness_backward(layer, activation, x_neg, theta, aggregation, Polarity::Negative)?;
    dw.add_assign(&dwn)?;
    db.add_assign(&dbn)?;
    Ok(FfLayerGrads {
        loss: lp + ln,
        weight: dw,
        bias: db,
        pos_out: pass_up(&hp),
        neg_out: pass_up(&hn),
        mean_pos_goodness: gp,
        mean_neg_goodness: gn,
    })
}

/// One trainable layer with its threshold and optimizer state.
#[derive(Debug, Clone)]
pub struct FfLayerState<T = f32> {
    pub layer: Dense<T>,
    pub theta: T,
    pub opt: AdamWState<T>,
}

#[derive(Debug, Clone)]
pub struct FfNetwork<T = f32> {
    pub spec: MlpSpec,
    pub layers: Vec<FfLayerState<T>>,
    pub config: FfConfig,
    pub intensity: f32,
    pub num_classes: usize,
}

/// Per-layer summary of one batch step.
#[derive(Debug, Clone, Copy)]
pub struct FfStepStats {
    pub loss: f64,
    pub mean_pos_goodness: f64,
    pub mean_neg_goodness: f64,
}

impl<T: Scalar> FfNetwork<T> {
    /// Hidden layers of `spec` become goodness layers; the output width only
    /// has to name the class count.
    pub fn build(spec: &MlpSpec, config: &FfConfig, opt: AdamWConfig, intensity: f32, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        if spec.widths.len() < 3 {
            return Err(Error::Config("FF needs at least one hidden layer".into()));
        }
        let num_classes = *spec.widths.last().expect("validated");
        if spec.widths[0] < num_classes {
            return Err(Error::Config(format!(
                "label overlay needs at least {num_classes} input features, got {}",
                spec.widths[0]
            )));
        }
        let hidden = &spec.widths[..spec.widths.len() - 1];
        let layers = hidden
            .windows(2)
            .map(|w| {
                let layer = Dense::init(w[0], w[1], rng)?;
                let opt = AdamWState::new(opt, [&layer.weight, &layer.bias]);
                Ok(FfLayerState {
                    layer,
                    theta: T::from_f64(config.theta),
                    opt,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            layers,
            config: config.clone(),
            intensity,
            num_classes,
        })
    }

    /// One step on a positive and a negative batch for layers in `active`.
    /// Layers below `active` only pass activations upward; layers above are
    /// not touched.
    pub fn train_batch(&mut self, pos: &Tensor<T>, neg: &Tensor<T>, active: Range<usize>) -> Result<Vec<FfStepStats>> {
        let (mut xp, mut xn) = (pos.clone(), neg.clone());
        let mut stats = Vec::new();
        let activation = self.spec.activation;
        let aggregation = self.config.aggregation;
        for (l, state) in self.layers.iter_mut().enumerate().take(active.end) {
            if l < active.start {
                xp = pass_up(&activation.apply(&state.layer.forward(&xp)?));
                xn = pass_up(&activation.apply(&state.layer.forward(&xn)?));
                continue;
            }
            let g = ff_layer_grads(&state.layer, activation, &xp, &xn, state.theta, aggregation)?;
            check_loss(g.loss.to_f64(), || format!("layer {}", l + 1))?;
            state
                .opt
                .step(&mut [&mut state.layer.weight, &mut state.layer.bias], &[&g.weight, &g.bias])?;
            stats.push(FfStepStats {
                loss: g.loss.to_f64(),
                mean_pos_goodness: g.mean_pos_goodness.to_f64(),
                mean_neg_goodness: g.mean_neg_goodness.to_f64(),
            });
            xp = g.pos_out;
            xn = g.neg_out;
        }
        Ok(stats)
    }

    /// Per-layer goodness of each row of `inputs`: `[layers][rows]`.
    pub fn layer_goodness(&self, inputs: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let mut x = inputs.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for state in &self.layers {
            let h = self.spec.activation.apply(&state.layer.forward(&x)?);
            out.push((0..h.rows()).map(|s| goodness(h.row(s), self.config.aggregation)).collect());
            x = pass_up(&h);
        }
        Ok(out)
    }

    fn included_layers(&self) -> Range<usize> {
        let first = usize::from(!self.config.include_first_layer && self.layers.len() > 1);
        first..self.layers.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|s| [&s.layer.weight, &s.layer.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Tries every label on every input and picks the one with the highest total
/// goodness over the included layers. Ties go to the lowest class.
pub fn predict_ff<T: Scalar>(net: &FfNetwork<T>, inputs: &Tensor<f32>) -> Result<Vec<usize>> {
    let n = inputs.rows();
    let k = net.num_classes;
    let mut scores = Tensor::<T>::zeros(&[n, k]);
    let included = net.included_layers();
    for c in 0..k {
        let x = overlay_rows(inputs, &vec![c; n], k, net.intensity)?.cast::<T>();
        let per_layer = net.layer_goodness(&x)?;
        for layer in &per_layer[included.clone()] {
            for (s, &g) in layer.iter().enumerate() {
                scores.row_mut(s)[c] += g;
            }
        }
    }
    Ok(argmax_rows(&scores))
}

/// Mean positive and negative goodness per layer over `batch`, with one
/// wrong label drawn per sample from `rng`.
pub fn goodness_separation<T: Scalar>(net: &FfNetwork<T>, batch: &LabeledBatch, rng: &mut RngState) -> Result<Vec<LayerGoodness>> {
    let k = net.num_classes;
    let wrong: Vec<usize> = batch.labels.iter().map(|&l| wrong_label(l, k, rng)).collect();
    let pos = net.layer_goodness(&overlay_rows(&batch.inputs, &batch.labels, k, net.intensity)?.cast())?;
    let neg = net.layer_goodness(&overlay_rows(&batch.inputs, &wrong, k, net.intensity)?.cast())?;
    let mean = |v: &[T]| v.iter().map(|&g| Scalar::to_f64(g)).sum::<f64>() / v.len().max(1) as f64;
    Ok(pos
        .iter()
        .zip(&neg)
        .enumerate()
        .map(|(layer, (p, q))| LayerGoodness {
            layer: layer + 1,
            mean_pos_goodness: mean(p),
            mean_neg_goodness: mean(q),
        })
        .collect())
}

struct FfEpochs<'a> {
    net: FfNetwork<f32>,
    data: &'a PreparedData,
    batch_size: usize,
    batch_rng: RngState,
    negative_rng: RngState,
}

impl FfEpochs<'_> {
    fn active(&self, epoch: usize) -> Range<usize> {
        let depth = self.net.layers.len();
        match self.net.config.schedule {
            FfSchedule::Simultaneous => 0..depth,
            FfSchedule::Greedy => {
                let l = (epoch / self.net.config.greedy_layer_epochs).min(depth - 1);
                l..l + 1
            }
        }
    }
}

impl EpochTrainer for FfEpochs<'_> {
    type Snapshot = FfNetwork<f32>;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let train = &self.data.train;
        let k = self.net.num_classes;
        let negatives: Vec<usize> = train
            .labels
            .iter()
            .map(|&l| wrong_label(l, k, &mut self.negative_rng))
            .collect();
        let active = self.active(epoch);
        let width = active.len();
        let mut sums = vec![(0.0, 0.0, 0.0); width];
        for idx in minibatches(train.len(), self.batch_size, &mut self.batch_rng) {
            let x = train.inputs.select_rows(&idx);
            let pos_labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let neg_labels: Vec<usize> = idx.iter().map(|&i| negatives[i]).collect();
            let pos = overlay_rows(&x, &pos_labels, k, self.net.intensity)?;
            let neg = overlay_rows(&x, &neg_labels, k, self.net.intensity)?;
            let stats = self.net.train_batch(&pos, &neg, active.clone()).map_err(|e| match e {
                Error::Diverged { diagnostic, partial } => Error::Diverged {
                    diagnostic: format!("{diagnostic}, epoch {epoch}"),
                    partial,
                },
                e => e,
            })?;
            let w = idx.len() as f64;
            for (acc, s) in sums.iter_mut().zip(stats) {
                acc.0 += s.loss * w;
                acc.1 += s.mean_pos_goodness * w;
                acc.2 += s.mean_neg_goodness * w;
            }
        }
        let n = train.len().max(1) as f64;
        let val_acc = chunked_accuracy(&self.data.val, |x| predict_ff(&self.net, x))?;
        let layer_losses: Vec<f64> = sums.iter().map(|s| s.0 / n).collect();
        let mut rec = EpochRecord::new("train", layer_losses.iter().sum(), val_acc);
        rec.goodness = sums
            .iter()
            .zip(active.clone())
            .map(|(s, l)| LayerGoodness {
                layer: l + 1,
                mean_pos_goodness: s.1 / n,
                mean_neg_goodness: s.2 / n,
            })
            .collect();
        rec.layer_losses = layer_losses;
        if width == 1 {
            rec.active_layer = Some(active.start + 1);
        }
        Ok(rec)
    }

    fn snapshot(&self) -> FfNetwork<f32> {
        self.net.clone()
    }
}

pub fn train_ff(spec: &MlpSpec, data: &PreparedData, config: &TrainConfig, mut telemetry: Telemetry) -> Result<RunResult> {
    config.validate()?;
    super::require_classes(*spec.widths.last().unwrap_or(&0), data)?;
    let intensity = config.ff.intensity.unwrap_or_else(|| data.max_input());
    let root = RngState::new(config.seed);
    let net = FfNetwork::build(spec, &config.ff, config.adamw(), intensity, &mut root.fork(1))?;
    let mut epochs = FfEpochs {
        net,
        data,
        batch_size: config.batch_size,
        batch_rng: root.fork(2),
        negative_rng: root.fork(3),
    };
    telemetry.mark("train", None);
    let outcome = fit_with_early_stopping(&config.stop, &mut epochs)?;
    let best = outcome.best;
    let test_acc = chunked_accuracy(&data.test, |x| predict_ff(&best, x))?;
    let hidden = MlpSpec {
        widths: spec.widths[..spec.widths.len() - 1].to_vec(),
        activation: spec.activation,
    };
    let flops = crate::models::flops_forward(&hidden, 1) as f64 * best.num_classes as f64;
    let run = TrainedRun {
        checkpoint: Checkpoint {
            spec: checkpoint_spec(
                Algorithm::Ff,
                spec,
                json!({ "theta": config.ff.theta, "aggregation": config.ff.aggregation, "intensity": intensity }),
            ),
            tensors: best.tensors().into_iter().cloned().collect(),
        },
        epochs: outcome.records,
        best_epoch: outcome.best_index,
        best_val_acc: outcome.best_val_acc,
        test_acc,
        param_count: best.param_count(),
        forward_flops: flops,
    };
    finish_run(Algorithm::Ff, run, telemetry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn goodness_examples() {
        assert_eq!(goodness(&[0.0f64; 4], GoodnessAggregation::Mean), 0.0);
        assert_eq!(goodness(&[3.0f64, 4.0], GoodnessAggregation::Mean), 12.5);
        assert_eq!(goodness(&[3.0f64, 4.0], GoodnessAggregation::Sum), 25.0);
    }

    #[test]
    fn loss_at_threshold_is_ln2() {
        for p in [Polarity::Positive, Polarity::Negative] {
            assert_relative_eq!(ff_layer_loss(2.0f64, 2.0, p).0, std::f64::consts::LN_2, max_relative = 1e-12);
        }
        assert!(ff_layer_loss(1e4f64, 2.0, Polarity::Positive).0 < 1e-12);
    }

    #[test]
    fn loss_derivative_matches_finite_differences() {
        let h = 1e-6;
        for p in [Polarity::Positive, Polarity::Negative] {
            for d in [-2.0f64, 0.0, 2.0] {
                let g = 2.0 + d;
                let num = (ff_layer_loss(g + h, 2.0, p).0 - ff_layer_loss(g - h, 2.0, p).0) / (2.0 * h);
                assert!((num - ff_layer_loss(g, 2.0, p).1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn symmetric_net_predicts_class_zero() {
        let spec = MlpSpec::new(vec![4, 3, 2]);
        let mut net =
            FfNetwork::<f64>::build(&spec, &FfConfig::default(), AdamWConfig::default(), 1.0, &mut RngState::new(0))
                .unwrap();
        net.layers[0].layer = Dense::zeros(4, 3);
        let x = Tensor::matrix(2, 4, vec![0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.1, 0.9]).unwrap();
        assert_eq!(predict_ff(&net, &x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn engineered_label_doubling_predicts_one() {
        // One hidden layer reading only the overlay slots: label 1 gives
        // activations twice as large as label 0.
        let spec = MlpSpec::new(vec![3, 2, 2]);
        let mut net =
            FfNetwork::<f64>::build(&spec, &FfConfig::default(), AdamWConfig::default(), 1.0, &mut RngState::new(0))
                .unwrap();
        net.layers[0].layer = Dense {
            weight: Tensor::matrix(3, 2, vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let x = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.7]).unwrap();
        assert_eq!(predict_ff(&net, &x).unwrap(), vec![1]);
    }

    #[test]
    fn overlay_requires_enough_features() {
        let r = FfNetwork::<f32>::build(
            &MlpSpec::new(vec![3, 4, 10]),
            &FfConfig::default(),
            AdamWConfig::default(),
            1.0,
            &mut RngState::new(0),
        );
        assert!(r.is_err());
    }
}
