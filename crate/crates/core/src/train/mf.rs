//! Mono-Forward: every hidden layer owns a projection from its activations
//! to class scores and learns from the cross-entropy of those scores alone.
//! The output layer learns from cross-entropy on its logits. No gradient
//! crosses a layer boundary.
//!
//! In sequential mode layers are built, trained and frozen one after the
//! other, so only one layer's optimizer state exists at any time.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::bp::argmax_rows;
use super::{
    check_loss, checkpoint_spec, finish_run, minibatches, require_classes, Algorithm, Curves, EpochRecord, RunResult,
    TrainConfig, TrainedRun,
};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::models::{Activation, Checkpoint, Dense, MlpSpec};
use crate::ops::{kaiming_init, softmax_ce_batch};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::RngState;
use crate::search::{fit_with_early_stopping, EarlyStopPolicy, EpochTrainer};
use crate::telemetry::Telemetry;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfMode {
    #[default]
    Sequential,
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfSchedule {
    #[serde(default)]
    pub mode: MfMode,
    /// Epoch budget per layer in sequential mode.
    #[serde(default = "default_layer_epochs")]
    pub layer_epochs: usize,
}

fn default_layer_epochs() -> usize {
    20
}

impl Default for MfSchedule {
    fn default() -> Self {
        Self {
            mode: MfMode::Sequential,
            layer_epochs: default_layer_epochs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfAggregation {
    /// Sum of every layer's class scores, output logits included.
    #[default]
    Sum,
    /// Output logits only.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfConfig {
    #[serde(default)]
    pub schedule: MfSchedule,
    #[serde(default)]
    pub aggregation: MfAggregation,
}

impl MfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.mode == MfMode::Sequential && self.schedule.layer_epochs == 0 {
            return Err(Error::Config("layer_epochs must be at least 1 in sequential mode".into()));
        }
        Ok(())
    }
}

pub fn mf_layer_scores<T: Scalar>(activations: &Tensor<T>, projection: &Tensor<T>) -> Result<Tensor<T>> {
    activations.matmul(projection)
}

/// Mean cross-entropy of `a · M` and its gradients with respect to `a` and `M`.
pub fn mf_local_loss<T: Scalar>(
    activations: &Tensor<T>,
    projection: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let (loss, ds) = softmax_ce_batch(&mf_layer_scores(activations, projection)?, labels)?;
    let dm = activations.matmul_tn(&ds)?;
    let da = ds.matmul_nt(projection)?;
    Ok((loss, da, dm))
}

/// A hidden layer with its projection to class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MfLayer<T = f32> {
    pub dense: Dense<T>,
    /// `[width × classes]`
    pub projection: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct MfGrads<T> {
    pub loss: T,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Empty for the output layer.
    pub projection: Option<Tensor<T>>,
    /// The layer's activations, passed on detached.
    pub output: Tensor<T>,
}

impl<T: Scalar> MfLayer<T> {
    pub fn init(fan_in: usize, width: usize, classes: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            dense: Dense::init(fan_in, width, rng)?,
            projection: kaiming_init(&[width, classes], width, rng)?,
        })
    }

    pub fn activations(&self, x: &Tensor<T>, activation: Activation) -> Result<Tensor<T>> {
        Ok(activation.apply(&self.dense.forward(x)?))
    }

    /// Local gradients for `(W, b, M)`. `x` is a constant.
    pub fn grads(&self, x: &Tensor<T>, activation: Activation, labels: &[usize]) -> Result<MfGrads<T>> {
        let z = self.dense.forward(x)?;
        let a = activation.apply(&z);
        let (loss, mut da, dm) = mf_local_loss(&a, &self.projection, labels)?;
        da.mul_assign(&activation.derivative(&z))?;
        let (dw, db) = self.dense.param_grads(x, &da)?;
        Ok(MfGrads {
            loss,
            weight: dw,
            bias: db,
            projection: Some(dm),
            output: a,
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 3] {
        [&self.dense.weight, &self.dense.bias, &self.projection]
    }

    fn step(&mut self, opt: &mut AdamWState<T>, g: &MfGrads<T>) -> Result<()> {
        let dm = g.projection.as_ref().expect("hidden layers have a projection gradient");
        opt.step(
            &mut [&mut self.dense.weight, &mut self.dense.bias, &mut self.projection],
            &[&g.weight, &g.bias, dm],
        )
    }
}

/// Cross-entropy gradients for the output layer on detached inputs.
pub fn mf_output_grads<T: Scalar>(output: &Dense<T>, x: &Tensor<T>, labels: &[usize]) -> Result<MfGrads<T>> {
    let logits = output.forward(x)?;
    let (loss, dz) = softmax_ce_batch(&logits, labels)?;
    let (dw, db) = output.param_grads(x, &dz)?;
    Ok(MfGrads {
        loss,
        weight: dw,
        bias: db,
        projection: None,
        output: logits,
    })
}

/// Hidden layers and output layer; unbuilt layers are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfNetwork<T = f32> {
    pub spec: MlpSpec,
    pub hidden: Vec<Option<MfLayer<T>>>,
    pub output: Option<Dense<T>>,
    pub num_classes: usize,
}

impl<T: Scalar> MfNetwork<T> {
    /// An empty network; layers are built on demand with [`Self::build_layer`].
    pub fn empty(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            hidden: vec![None; spec.widths.len() - 2],
            output: None,
            num_classes: *spec.widths.last().expect("validated"),
        })
    }

    /// Builds layer `l` (hidden layers first, then the output layer) from a
    /// stream derived from `root`, so the result does not depend on when it
    /// is built.
    pub fn build_layer(&mut self, l: usize, root: &RngState) -> Result<()> {
        let mut rng = root.fork(100 + l as u64);
        let w = &self.spec.widths;
        if l < self.hidden.len() {
            self.hidden[l] = Some(MfLayer::init(w[l], w[l + 1], self.num_classes, &mut rng)?);
        } else {
            self.output = Some(Dense::init(w[l], w[l + 1], &mut rng)?);
        }
        Ok(())
    }

    pub fn build(spec: &MlpSpec, root: &RngState) -> Result<Self> {
        let mut net = Self::empty(spec)?;
        for l in 0..=net.hidden.len() {
            net.build_layer(l, root)?;
        }
        Ok(net)
    }

    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Class scores of every built layer in order, stopping at the first
    /// unbuilt one.
    pub fn scores(&self, inputs: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut x = inputs.clone();
        let mut out = Vec::new();
        for layer in &self.hidden {
            let Some(layer) = layer else { return Ok(out) };
            x = layer.activations(&x, self.spec.activation)?;
            out.push(mf_layer_scores(&x, &layer.projection)?);
        }
        if let Some(o) = &self.output {
            out.push(o.forward(&x)?);
        }
        Ok(out)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.hidden.iter().flatten().flat_map(MfLayer::tensors).collect();
        if let Some(o) = &self.output {
            out.extend([&o.weight, &o.bias]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flops_forward(&self) -> u64 {
        let w = &self.spec.widths;
        let k = self.num_classes as u64;
        let hidden: u64 = (0..self.hidden.len())
            .map(|l| 2 * w[l] as u64 * w[l + 1] as u64 + 2 * w[l + 1] as u64 * k)
            .sum();
        hidden + 2 * w[w.len() - 2] as u64 * w[w.len() - 1] as u64
    }
}

fn combine<T: Scalar>(scores: &[Tensor<T>], aggregation: MfAggregation) -> Result<Tensor<T>> {
    let last = scores.last().ok_or_else(|| Error::Config("network has no built layers".into()))?;
    match aggregation {
        MfAggregation::Last => Ok(last.clone()),
        MfAggregation::Sum => {
            let mut total = Tensor::zeros(last.shape());
            for s in scores {
                total.add_assign(s)?;
            }
            Ok(total)
        }
    }
}

/// Argmax of the summed (or last) class scores; ties go to the lowest class.
pub fn predict_mf<T: Scalar>(net: &MfNetwork<T>, inputs: &Tensor<T>, aggregation: MfAggregation) -> Result<Vec<usize>> {
    Ok(argmax_rows(&combine(&net.scores(inputs)?, aggregation)?))
}

/// Trains one layer on cached, detached input features.
struct LayerEpochs<'a> {
    layer: MfLayerKind,
    opt: AdamWState<f32>,
    activation: Activation,
    features: &'a Tensor<f32>,
    labels: &'a [usize],
    val_features: &'a Tensor<f32>,
    val_labels: &'a [usize],
    /// Scores of the already frozen layers on the validation set.
    val_base: Option<&'a Tensor<f32>>,
    batch_size: usize,
    rng: RngState,
    index: usize,
}

#[derive(Debug, Clone)]
enum MfLayerKind {
    Hidden(MfLayer<f32>),
    Output(Dense<f32>),
}

impl MfLayerKind {
    fn grads(&self, x: &Tensor<f32>, activation: Activation, labels: &[usize]) -> Result<MfGrads<f32>> {
        match self {
            MfLayerKind::Hidden(l) => l.grads(x, activation, labels),
            MfLayerKind::Output(d) => mf_output_grads(d, x, labels),
        }
    }

    fn step(&mut self, opt: &mut AdamWState<f32>, g: &MfGrads<f32>) -> Result<()> {
        match self {
            MfLayerKind::Hidden(l) => l.step(opt, g),
            MfLayerKind::Output(d) => opt.step(&mut [&mut d.weight, &mut d.bias], &[&g.weight, &g.bias]),
        }
    }

    fn scores(&self, x: &Tensor<f32>, activation: Activation) -> Result<Tensor<f32>> {
        match self {
            MfLayerKind::Hidden(l) => mf_layer_scores(&l.activations(x, activation)?, &l.projection),
            MfLayerKind::Output(d) => d.forward(x),
        }
    }

    fn tensors(&self) -> Vec<&Tensor<f32>> {
        match self {
            MfLayerKind::Hidden(l) => l.tensors().to_vec(),
            MfLayerKind::Output(d) => vec![&d.weight, &d.bias],
        }
    }
}

fn scores_accuracy(scores: &Tensor<f32>, base: Option<&Tensor<f32>>, labels: &[usize]) -> Result<f64> {
    let total = match base {
        Some(b) => {
            let mut t = scores.clone();
            t.add_assign(b)?;
            t
        }
        None => scores.clone(),
    };
    Ok(super::accuracy(&argmax_rows(&total), labels))
}

impl EpochTrainer for LayerEpochs<'_> {
    type Snapshot = MfLayerKind;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let mut total = 0.0;
        for idx in minibatches(self.labels.len(), self.batch_size, &mut self.rng) {
            let x = self.features.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
            let g = self.layer.grads(&x, self.activation, &labels)?;
            check_loss(g.loss as f64, || format!("layer {}, epoch {epoch}", self.index + 1))?;
            total += g.loss as f64 * idx.len() as f64;
            self.layer.step(&mut self.opt, &g)?;
        }
        let scores = self.layer.scores(self.val_features, self.activation)?;
        let val_acc = scores_accuracy(&scores, self.val_base, self.val_labels)?;
        let loss = total / self.labels.len().max(1) as f64;
        let mut rec = EpochRecord::new(&phase_name(self.index, matches!(self.layer, MfLayerKind::Output(_))), loss, val_acc);
        rec.active_layer = Some(self.index + 1);
        rec.layer_losses = vec![loss];
        Ok(rec)
    }

    fn snapshot(&self) -> MfLayerKind {
        self.layer.clone()
    }
}

fn phase_name(index: usize, output: bool) -> String {
    if output {
        "output_layer".to_string()
    } else {
        format!("layer_{}", index + 1)
    }
}

fn with_prefix(records: &[EpochRecord], e: Error) -> Error {
    match e {
        Error::Diverged { diagnostic, partial } => {
            let mut curves = Curves::from_records(records);
            curves.train_loss.extend(partial.train_loss);
            curves.val_acc.extend(partial.val_acc);
            Error::Diverged { diagnostic, partial: curves }
        }
        e => e,
    }
}

struct SequentialOutcome {
    net: MfNetwork<f32>,
    records: Vec<EpochRecord>,
    best_epoch: usize,
    best_val_acc: f64,
}

fn train_sequential(
    spec: &MlpSpec,
    data: &PreparedData,
    config: &TrainConfig,
    telemetry: &mut Telemetry,
) -> Result<SequentialOutcome> {
    let root = RngState::new(config.seed);
    let mut net = MfNetwork::<f32>::empty(spec)?;
    let policy = EarlyStopPolicy {
        max_epochs: config.mf.schedule.layer_epochs,
        ..config.stop
    };
    let activation = spec.activation;
    let mut features: Option<Tensor<f32>> = None;
    let mut val_features: Option<Tensor<f32>> = None;
    let mut val_base: Option<Tensor<f32>> = None;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut last = (0, 0.0);
    let depth = net.layer_count();
    for l in 0..depth {
        let is_output = l + 1 == depth;
        telemetry.mark(&phase_name(l, is_output), Some(l + 1));
        net.build_layer(l, &root)?;
        let layer = if is_output {
            MfLayerKind::Output(net.output.take().expect("just built"))
        } else {
            MfLayerKind::Hidden(net.hidden[l].take().expect("just built"))
        };
        let opt = AdamWState::new(config.adamw(), layer.tensors());
        let feats = features.as_ref().unwrap_or(&data.train.inputs);
        let vfeats = val_features.as_ref().unwrap_or(&data.val.inputs);
        let base = match config.mf.aggregation {
            MfAggregation::Sum => val_base.as_ref(),
            MfAggregation::Last => None,
        };
        let mut epochs = LayerEpochs {
            layer,
            opt,
            activation,
            features: feats,
            labels: &data.train.labels,
            val_features: vfeats,
            val_labels: &data.val.labels,
            val_base: base,
            batch_size: config.batch_size,
            rng: root.fork(200 + l as u64),
            index: l,
        };
        let outcome = fit_with_early_stopping(&policy, &mut epochs).map_err(|e| with_prefix(&records, e))?;
        drop(epochs);
        last = (records.len() + outcome.best_index, outcome.best_val_acc);
        records.extend(outcome.records);
        match outcome.best {
            MfLayerKind::Output(d) => net.output = Some(d),
            MfLayerKind::Hidden(layer) => {
                let next = layer.activations(feats, activation)?;
                let next_val = layer.activations(vfeats, activation)?;
                let s = mf_layer_scores(&next_val, &layer.projection)?;
                val_base = Some(match val_base.take() {
                    Some(mut b) => {
                        b.add_assign(&s)?;
                        b
                    }
                    None => s,
                });
                features = Some(next);
                val_features = Some(next_val);
                net.hidden[l] = Some(layer);
            }
        }
    }
    Ok(SequentialOutcome {
        net,
        records,
        best_epoch: last.0,
        best_val_acc: last.1,
    })
}

struct InterleavedEpochs<'a> {
    net: MfNetwork<f32>,
    opts: Vec<AdamWState<f32>>,
    data: &'a PreparedData,
    batch_size: usize,
    rng: RngState,
    aggregation: MfAggregation,
}

impl EpochTrainer for InterleavedEpochs<'_> {
    type Snapshot = MfNetwork<f32>;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let train = &self.data.train;
        let activation = self.net.spec.activation;
        let mut totals = vec![0.0; self.net.layer_count()];
        for idx in minibatches(train.len(), self.batch_size, &mut self.rng) {
            let mut x = train.inputs.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            for (l, layer) in self.net.hidden.iter_mut().enumerate() {
                let layer = layer.as_mut().expect("interleaved networks are fully built");
                let g = layer.grads(&x, activation, &labels)?;
                check_loss(g.loss as f64, || format!("layer {}, epoch {epoch}", l + 1))?;
                totals[l] += g.loss as f64 * idx.len() as f64;
                layer.step(&mut self.opts[l], &g)?;
                x = g.output;
            }
            let out = self.net.output.as_mut().expect("interleaved networks are fully built");
            let g = mf_output_grads(out, &x, &labels)?;
            let l = totals.len() - 1;
            check_loss(g.loss as f64, || format!("output layer, epoch {epoch}"))?;
            totals[l] += g.loss as f64 * idx.len() as f64;
            self.opts[l].step(&mut [&mut out.weight, &mut out.bias], &[&g.weight, &g.bias])?;
        }
        let n = train.len().max(1) as f64;
        let layer_losses: Vec<f64> = totals.iter().map(|t| t / n).collect();
        let val_acc = super::chunked_accuracy(&self.data.val, |x| predict_mf(&self.net, x, self.aggregation))?;
        let mut rec = EpochRecord::new("interleaved", layer_losses.iter().sum(), val_acc);
        rec.layer_losses = layer_losses;
        Ok(rec)
    }

    fn snapshot(&self) -> MfNetwork<f32> {
        self.net.clone()
    }
}

fn layer_optimizers(net: &MfNetwork<f32>, config: AdamWConfig) -> Vec<AdamWState<f32>> {
    let mut opts: Vec<AdamWState<f32>> = net
        .hidden
        .iter()
        .flatten()
        .map(|l| AdamWState::new(config, l.tensors()))
        .collect();
    let out = net.output.as_ref().expect("built");
    opts.push(AdamWState::new(config, [&out.weight, &out.bias]));
    opts
}

pub fn train_mf(spec: &MlpSpec, data: &PreparedData, config: &TrainConfig, mut telemetry: Telemetry) -> Result<RunResult> {
    config.validate()?;
    spec.validate()?;
    require_classes(*spec.widths.last().expect("validated"), data)?;
    let (net, records, best_epoch, best_val_acc) = match config.mf.schedule.mode {
        MfMode::Sequential => {
            let o = train_sequential(spec, data, config, &mut telemetry)?;
            (o.net, o.records, o.best_epoch, o.best_val_acc)
        }
        MfMode::Interleaved => {
            telemetry.mark("interleaved", None);
            let root = RngState::new(config.seed);
            let net = MfNetwork::build(spec, &root)?;
            let opts = layer_optimizers(&net, config.adamw());
            let mut epochs = InterleavedEpochs {
                net,
                opts,
                data,
                batch_size: config.batch_size,
                rng: root.fork(2),
                aggregation: config.mf.aggregation,
            };
            let o = fit_with_early_stopping(&config.stop, &mut epochs)?;
            (o.best, o.records, o.best_index, o.best_val_acc)
        }
    };
    let aggregation = config.mf.aggregation;
    let test_acc = super::chunked_accuracy(&data.test, |x| predict_mf(&net, x, aggregation))?;
    let run = TrainedRun {
        checkpoint: Checkpoint {
            spec: checkpoint_spec(
                Algorithm::Mf,
                spec,
                json!({ "schedule": config.mf.schedule, "aggregation": aggregation }),
            ),
            tensors: net.tensors().into_iter().cloned().collect(),
        },
        epochs: records,
        best_epoch,
        best_val_acc,
        test_acc,
        param_count: net.param_count(),
        forward_flops: net.flops_forward() as f64,
    };
    finish_run(Algorithm::Mf, run, telemetry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn example() -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap(),
        )
    }

    #[test]
    fn scores_example() {
        let (a, m) = example();
        assert_eq!(mf_layer_scores(&a, &m).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn local_loss_example() {
        let (a, m) = example();
        let (loss, _, _) = mf_local_loss(&a, &m, &[0]).unwrap();
        assert_relative_eq!(loss, (1.0 + (-2.0f64).exp()).ln(), max_relative = 1e-12);
        let (loss, _, _) = mf_local_loss(&a, &Tensor::zeros(&[2, 5]), &[3]).unwrap();
        assert_relative_eq!(loss, 5f64.ln(), max_relative = 1e-12);
        let big = Tensor::matrix(2, 2, vec![20.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(mf_local_loss(&a, &big, &[0]).unwrap().0 < 1e-8);
    }

    #[test]
    fn summed_scores_example() {
        let s1 = Tensor::matrix(1, 2, vec![2.0f64, 0.0]).unwrap();
        let s2 = Tensor::matrix(1, 2, vec![0.0f64, 1.0]).unwrap();
        let t = combine(&[s1, s2], MfAggregation::Sum).unwrap();
        assert_eq!(argmax_rows(&t), vec![0]);
    }

    #[test]
    fn layers_are_built_from_their_own_streams() {
        let spec = MlpSpec::new(vec![4, 5, 3, 2]);
        let root = RngState::new(11);
        let full = MfNetwork::<f32>::build(&spec, &root).unwrap();
        let mut lazy = MfNetwork::<f32>::empty(&spec).unwrap();
        for l in (0..3).rev() {
            lazy.build_layer(l, &root).unwrap();
        }
        assert_eq!(full, lazy);
    }
}
