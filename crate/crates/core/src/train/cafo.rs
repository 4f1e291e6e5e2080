//! Cascaded Forward: a stack of blocks, each followed by its own linear
//! predictor trained with cross-entropy on the block's detached features.
//! Blocks are either left at their random initialization or pretrained with
//! direct feedback alignment, which sends the output error to every block
//! through a fixed random matrix instead of the transposed forward weights.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::bp::argmax_rows;
use super::{
    check_loss, checkpoint_spec, chunked_accuracy, finish_run, minibatches, Algorithm, Architecture, EpochRecord,
    RunResult, TrainConfig, TrainedRun,
};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::models::{conv_forward, conv_weight_grad, Activation, Checkpoint, ConvBlockSpec, ConvParams, Dense};
use crate::ops::{softmax_ce_batch, softmax_rows};
use crate::optim::AdamWState;
use crate::rng::RngState;
use crate::search::{fit_with_early_stopping, EpochTrainer};
use crate::telemetry::Telemetry;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CafoAggregation {
    /// Mean of the per-block softmax outputs.
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CafoMode {
    Rand,
    Dfa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CafoConfig {
    /// Pretraining epochs for the feedback-alignment phase.
    #[serde(default = "default_dfa_epochs")]
    pub dfa_epochs: usize,
    /// Pretraining learning rate; the run's learning rate when absent.
    #[serde(default)]
    pub dfa_lr: Option<f64>,
    #[serde(default)]
    pub aggregation: CafoAggregation,
}

fn default_dfa_epochs() -> usize {
    10
}

impl Default for CafoConfig {
    fn default() -> Self {
        Self {
            dfa_epochs: default_dfa_epochs(),
            dfa_lr: None,
            aggregation: CafoAggregation::Mean,
        }
    }
}

impl CafoConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.dfa_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config("dfa_lr must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CafoBlock<T = f32> {
    Conv {
        spec: ConvBlockSpec,
        params: ConvParams<T>,
        input: [usize; 3],
    },
    Dense {
        layer: Dense<T>,
        activation: Activation,
    },
}

/// Block evaluation keeping what a local update needs.
#[derive(Debug, Clone)]
pub struct BlockForward<T> {
    /// Pre-activation (before any pooling).
    pub pre: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Scalar> CafoBlock<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<BlockForward<T>> {
        match self {
            CafoBlock::Conv { spec, params, input } => {
                let f = conv_forward(spec, params, x, *input)?;
                Ok(BlockForward {
                    pre: f.pre,
                    output: f.output,
                })
            }
            CafoBlock::Dense { layer, activation } => {
                let pre = layer.forward(x)?;
                let output = activation.apply(&pre);
                Ok(BlockForward { pre, output })
            }
        }
    }

    pub fn output_width(&self) -> Result<usize> {
        match self {
            CafoBlock::Conv { spec, input, .. } => Ok(spec.output_shape(*input)?.iter().product()),
            CafoBlock::Dense { layer, .. } => Ok(layer.fan_out()),
        }
    }

    /// Width of the pre-activation, where feedback is delivered.
    pub fn feedback_width(&self) -> Result<usize> {
        match self {
            CafoBlock::Conv { spec, input, .. } => Ok(spec.conv_shape(*input)?.iter().product()),
            CafoBlock::Dense { layer, .. } => Ok(layer.fan_out()),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            CafoBlock::Conv { spec, .. } => spec.activation,
            CafoBlock::Dense { activation, .. } => *activation,
        }
    }

    /// Weight and bias gradients from the block input and `dL/d(pre)`.
    pub fn param_grads(&self, x: &Tensor<T>, d_pre: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        match self {
            CafoBlock::Conv { spec, input, .. } => conv_weight_grad(spec, x, *input, d_pre),
            CafoBlock::Dense { layer, .. } => layer.param_grads(x, d_pre),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        match self {
            CafoBlock::Conv { params, .. } => [&params.weight, &params.bias],
            CafoBlock::Dense { layer, .. } => [&layer.weight, &layer.bias],
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        match self {
            CafoBlock::Conv { params, .. } => [&mut params.weight, &mut params.bias],
            CafoBlock::Dense { layer, .. } => [&mut layer.weight, &mut layer.bias],
        }
    }

    fn flops(&self) -> Result<u64> {
        match self {
            CafoBlock::Conv { spec, input, .. } => spec.flops(*input),
            CafoBlock::Dense { layer, .. } => Ok(2 * (layer.fan_in() * layer.fan_out()) as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CafoCascade<T = f32> {
    pub blocks: Vec<CafoBlock<T>>,
    pub predictors: Vec<Dense<T>>,
    pub mode: CafoMode,
    pub num_classes: usize,
}

impl<T: Scalar> CafoCascade<T> {
    /// Conv blocks from a CNN spec, or one dense block per hidden layer of an
    /// MLP spec (the MLP's output width is ignored).
    pub fn build(arch: &Architecture, num_classes: usize, mode: CafoMode, rng: &mut RngState) -> Result<Self> {
        let blocks: Vec<CafoBlock<T>> = match arch {
            Architecture::Cnn(spec) => {
                let mut shape = spec.input;
                let mut out = Vec::new();
                for b in &spec.blocks {
                    out.push(CafoBlock::Conv {
                        spec: b.clone(),
                        params: ConvParams::init(b, rng)?,
                        input: shape,
                    });
                    shape = b.output_shape(shape)?;
                }
                out
            }
            Architecture::Mlp(spec) => {
                spec.validate()?;
                let hidden = &spec.widths[..spec.widths.len() - 1];
                hidden
                    .windows(2)
                    .map(|w| {
                        Ok(CafoBlock::Dense {
                            layer: Dense::init(w[0], w[1], rng)?,
                            activation: spec.activation,
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        if blocks.is_empty() {
            return Err(Error::Config("a cascade needs at least one block".into()));
        }
        let predictors = blocks
            .iter()
            .map(|b| Dense::init(b.output_width()?, num_classes, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            predictors,
            mode,
            num_classes,
        })
    }

    pub fn input_width(&self) -> usize {
        match &self.blocks[0] {
            CafoBlock::Conv { input, .. } => input.iter().product(),
            CafoBlock::Dense { layer, .. } => layer.fan_in(),
        }
    }

    /// Output of every block for `inputs`.
    pub fn block_outputs(&self, inputs: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let x = outs.last().unwrap_or(inputs);
            let o = b.forward(x)?.output;
            outs.push(o);
        }
        Ok(outs)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.blocks
            .iter()
            .flat_map(CafoBlock::tensors)
            .chain(self.predictors.iter().flat_map(|p| [&p.weight, &p.bias]))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Forward FLOPs per sample: all blocks plus every predictor.
    pub fn flops_forward(&self) -> Result<u64> {
        let mut total = 0;
        for (b, p) in self.blocks.iter().zip(&self.predictors) {
            total += b.flops()? + 2 * (p.fan_in() * p.fan_out()) as u64;
        }
        Ok(total)
    }
}

/// Combines per-block predictor scores into class indices.
pub fn aggregate_predictions<T: Scalar>(scores: &[Tensor<T>], aggregation: CafoAggregation) -> Result<Vec<usize>> {
    let last = scores.last().ok_or_else(|| Error::Config("no predictor scores".into()))?;
    match aggregation {
        CafoAggregation::Last => Ok(argmax_rows(last)),
        CafoAggregation::Mean => {
            let mut total = Tensor::<T>::zeros(last.shape());
            for s in scores {
                total.add_assign(&softmax_rows(s))?;
            }
            total.scale(T::from_f64(1.0 / scores.len() as f64));
            Ok(argmax_rows(&total))
        }
    }
}

pub fn predict_cafo<T: Scalar>(cascade: &CafoCascade<T>, inputs: &Tensor<T>, aggregation: CafoAggregation) -> Result<Vec<usize>> {
    let outs = cascade.block_outputs(inputs)?;
    let scores = outs
        .iter()
        .zip(&cascade.predictors)
        .map(|(o, p)| p.forward(o))
        .collect::<Result<Vec<_>>>()?;
    aggregate_predictions(&scores, aggregation)
}

/// Mean cross-entropy of a predictor on fixed features, with gradients.
pub fn predictor_grads<T: Scalar>(predictor: &Dense<T>, features: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let (loss, dz) = softmax_ce_batch(&predictor.forward(features)?, labels)?;
    let (dw, db) = predictor.param_grads(features, &dz)?;
    Ok((loss, dw, db))
}

/// Fixed random matrices carrying the output error to each block.
#[derive(Debug, Clone, PartialEq)]
pub struct DfaFeedback<T = f32> {
    /// `[classes × feedback width]` per block.
    pub matrices: Vec<Tensor<T>>,
}

impl<T: Scalar> DfaFeedback<T> {
    /// Entries uniform in `±1/√classes`.
    pub fn init(cascade: &CafoCascade<T>, rng: &mut RngState) -> Result<Self> {
        let k = cascade.num_classes;
        let bound = 1.0 / (k as f64).sqrt();
        let matrices = cascade
            .blocks
            .iter()
            .map(|b| {
                let w = b.feedback_width()?;
                let data = (0..k * w).map(|_| T::from_f64(rng.uniform_range(-bound, bound))).collect();
                Tensor::matrix(k, w, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { matrices })
    }
}

/// Update direction for one block: `(e · B) ⊙ act'(pre)`.
pub fn dfa_direction<T: Scalar>(error: &Tensor<T>, feedback: &Tensor<T>, pre: &Tensor<T>, activation: Activation) -> Result<Tensor<T>> {
    let mut d = error.matmul(feedback)?;
    d.mul_assign(&activation.derivative(pre))?;
    Ok(d)
}

/// Gradients of one feedback-alignment step.
#[derive(Debug, Clone)]
pub struct DfaGrads<T> {
    pub loss: T,
    /// Weight and bias gradient per block.
    pub blocks: Vec<(Tensor<T>, Tensor<T>)>,
    pub head: (Tensor<T>, Tensor<T>),
}

/// The temporary head's cross-entropy error `e = (p − onehot)/n` drives
/// every block through its own feedback matrix. Each block's update reads
/// only `e`, its feedback matrix and its own input and pre-activation.
pub fn dfa_gradients<T: Scalar>(
    blocks: &[CafoBlock<T>],
    head: &Dense<T>,
    feedback: &DfaFeedback<T>,
    inputs: &Tensor<T>,
    labels: &[usize],
) -> Result<DfaGrads<T>> {
    let mut fwd: Vec<BlockForward<T>> = Vec::with_capacity(blocks.len());
    for b in blocks {
        let x = fwd.last().map_or(inputs, |f| &f.output);
        let f = b.forward(x)?;
        fwd.push(f);
    }
    let top = &fwd.last().expect("at least one block").output;
    let (loss, error) = softmax_ce_batch(&head.forward(top)?, labels)?;
    let head_grads = head.param_grads(top, &error)?;
    let mut grads = Vec::with_capacity(blocks.len());
    for (l, b) in blocks.iter().enumerate() {
        let x = if l == 0 { inputs } else { &fwd[l - 1].output };
        let delta = dfa_direction(&error, &feedback.matrices[l], &fwd[l].pre, b.activation())?;
        grads.push(b.param_grads(x, &delta)?);
    }
    Ok(DfaGrads {
        loss,
        blocks: grads,
        head: head_grads,
    })
}

/// Block outputs for every row of `inputs`, evaluated in chunks.
fn extract_features(cascade: &CafoCascade<f32>, inputs: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let n = inputs.rows();
    let widths = cascade
        .blocks
        .iter()
        .map(CafoBlock::output_width)
        .collect::<Result<Vec<_>>>()?;
    let mut feats: Vec<Vec<f32>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(super::EVAL_CHUNK) {
        let outs = cascade.block_outputs(&inputs.select_rows(chunk))?;
        for (f, o) in feats.iter_mut().zip(outs) {
            f.extend_from_slice(o.data());
        }
    }
    feats
        .into_iter()
        .zip(widths)
        .map(|(f, w)| Tensor::matrix(n, w, f))
        .collect()
}

struct DfaEpochs<'a> {
    cascade: CafoCascade<f32>,
    head: Dense<f32>,
    feedback: DfaFeedback<f32>,
    block_opts: Vec<AdamWState<f32>>,
    head_opt: AdamWState<f32>,
    data: &'a PreparedData,
    batch_size: usize,
    rng: RngState,
    aggregation: CafoAggregation,
}

impl DfaEpochs<'_> {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let train = &self.data.train;
        let mut total = 0.0;
        for idx in minibatches(train.len(), self.batch_size, &mut self.rng) {
            let x = train.inputs.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let g = dfa_gradients(&self.cascade.blocks, &self.head, &self.feedback, &x, &labels)?;
            check_loss(g.loss as f64, || format!("dfa_pretrain phase, epoch {epoch}"))?;
            total += g.loss as f64 * idx.len() as f64;
            for ((block, opt), (dw, db)) in self.cascade.blocks.iter_mut().zip(&mut self.block_opts).zip(&g.blocks) {
                let [w, b] = block.tensors_mut();
                opt.step(&mut [w, b], &[dw, db])?;
            }
            self.head_opt
                .step(&mut [&mut self.head.weight, &mut self.head.bias], &[&g.head.0, &g.head.1])?;
        }
        let val_acc = chunked_accuracy(&self.data.val, |x| predict_cafo(&self.cascade, x, self.aggregation))?;
        Ok(EpochRecord::new("dfa_pretrain", total / train.len().max(1) as f64, val_acc))
    }
}

struct PredictorEpochs<'a> {
    predictors: Vec<Dense<f32>>,
    opts: Vec<AdamWState<f32>>,
    train_features: Vec<Tensor<f32>>,
    val_features: Vec<Tensor<f32>>,
    data: &'a PreparedData,
    batch_size: usize,
    rng: RngState,
    aggregation: CafoAggregation,
}

fn features_accuracy(predictors: &[Dense<f32>], features: &[Tensor<f32>], labels: &[usize], aggregation: CafoAggregation) -> Result<f64> {
    let scores = predictors
        .iter()
        .zip(features)
        .map(|(p, f)| p.forward(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(super::accuracy(&aggregate_predictions(&scores, aggregation)?, labels))
}

impl EpochTrainer for PredictorEpochs<'_> {
    type Snapshot = Vec<Dense<f32>>;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let labels_all = &self.data.train.labels;
        let mut totals = vec![0.0; self.predictors.len()];
        for idx in minibatches(labels_all.len(), self.batch_size, &mut self.rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
            for (b, ((p, opt), feats)) in self
                .predictors
                .iter_mut()
                .zip(&mut self.opts)
                .zip(&self.train_features)
                .enumerate()
            {
                let (loss, dw, db) = predictor_grads(p, &feats.select_rows(&idx), &labels)?;
                check_loss(loss as f64, || format!("predictor_fit phase, predictor {}, epoch {epoch}", b + 1))?;
                totals[b] += loss as f64 * idx.len() as f64;
                opt.step(&mut [&mut p.weight, &mut p.bias], &[&dw, &db])?;
            }
        }
        let n = labels_all.len().max(1) as f64;
        let layer_losses: Vec<f64> = totals.iter().map(|t| t / n).collect();
        let val_acc = features_accuracy(&self.predictors, &self.val_features, &self.data.val.labels, self.aggregation)?;
        let mut rec = EpochRecord::new(
            "predictor_fit",
            layer_losses.iter().sum::<f64>() / layer_losses.len() as f64,
            val_acc,
        );
        rec.layer_losses = layer_losses;
        Ok(rec)
    }

    fn snapshot(&self) -> Vec<Dense<f32>> {
        self.predictors.clone()
    }
}

fn train_cafo(
    arch: &Architecture,
    data: &PreparedData,
    config: &TrainConfig,
    mode: CafoMode,
    mut telemetry: Telemetry,
) -> Result<RunResult> {
    config.validate()?;
    let algorithm = match mode {
        CafoMode::Rand => Algorithm::CafoRand,
        CafoMode::Dfa => Algorithm::CafoDfa,
    };
    let root = RngState::new(config.seed);
    let classes = data.num_classes();
    let mut cascade = CafoCascade::<f32>::build(arch, classes, mode, &mut root.fork(1))?;
    if cascade.input_width() != data.features() {
        return Err(Error::Config(format!(
            "cascade expects {} input features, data has {}",
            cascade.input_width(),
            data.features()
        )));
    }
    let aggregation = config.cafo.aggregation;
    let mut records = Vec::new();

    if mode == CafoMode::Dfa && config.cafo.dfa_epochs > 0 {
        telemetry.mark("dfa_pretrain", None);
        let mut dfa_opt = config.adamw();
        dfa_opt.lr = config.cafo.dfa_lr.unwrap_or(config.lr);
        let top = cascade.blocks.last().expect("non-empty").output_width()?;
        let mut init_rng = root.fork(4);
        // A zero head starts from uniform predictions, so the first errors
        // carry no accidental bias from a random readout.
        let head = Dense::zeros(top, classes);
        let feedback = DfaFeedback::init(&cascade, &mut init_rng)?;
        let block_opts = cascade
            .blocks
            .iter()
            .map(|b| AdamWState::new(dfa_opt, b.tensors()))
            .collect();
        let head_opt = AdamWState::new(config.adamw(), [&head.weight, &head.bias]);
        let mut phase = DfaEpochs {
            cascade,
            head,
            feedback,
            block_opts,
            head_opt,
            data,
            batch_size: config.batch_size,
            rng: root.fork(5),
            aggregation,
        };
        for epoch in 0..config.cafo.dfa_epochs {
            match phase.run_epoch(epoch) {
                Ok(r) => records.push(r),
                Err(Error::Diverged { diagnostic, .. }) => {
                    return Err(Error::Diverged {
                        diagnostic,
                        partial: super::Curves::from_records(&records),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        cascade = phase.cascade;
    }

    telemetry.mark("predictor_fit", None);
    let train_features = extract_features(&cascade, &data.train.inputs)?;
    let val_features = extract_features(&cascade, &data.val.inputs)?;
    let opts = cascade
        .predictors
        .iter()
        .map(|p| AdamWState::new(config.adamw(), [&p.weight, &p.bias]))
        .collect();
    let mut phase = PredictorEpochs {
        predictors: cascade.predictors.clone(),
        opts,
        train_features,
        val_features,
        data,
        batch_size: config.batch_size,
        rng: root.fork(2),
        aggregation,
    };
    let pretrain_epochs = records.len();
    let outcome = match fit_with_early_stopping(&config.stop, &mut phase) {
        Ok(o) => o,
        Err(Error::Diverged { diagnostic, partial }) => {
            let mut curves = super::Curves::from_records(&records);
            curves.train_loss.extend(partial.train_loss);
            curves.val_acc.extend(partial.val_acc);
            return Err(Error::Diverged { diagnostic, partial: curves });
        }
        Err(e) => return Err(e),
    };
    drop(phase);
    cascade.predictors = outcome.best;
    records.extend(outcome.records);

    let test_acc = chunked_accuracy(&data.test, |x| predict_cafo(&cascade, x, aggregation))?;
    let run = TrainedRun {
        checkpoint: Checkpoint {
            spec: checkpoint_spec(algorithm, arch, json!({ "classes": classes, "aggregation": aggregation })),
            tensors: cascade.tensors().into_iter().cloned().collect(),
        },
        epochs: records,
        best_epoch: pretrain_epochs + outcome.best_index,
        best_val_acc: outcome.best_val_acc,
        test_acc,
        param_count: cascade.param_count(),
        forward_flops: cascade.flops_forward()? as f64,
    };
    finish_run(algorithm, run, telemetry)
}

/// Blocks stay at their random initialization; only predictors learn.
pub fn train_cafo_rand(arch: &Architecture, data: &PreparedData, config: &TrainConfig, telemetry: Telemetry) -> Result<RunResult> {
    train_cafo(arch, data, config, CafoMode::Rand, telemetry)
}

/// Feedback-alignment pretraining of the blocks, then predictor fitting.
pub fn train_cafo_dfa(arch: &Architecture, data: &PreparedData, config: &TrainConfig, telemetry: Telemetry) -> Result<RunResult> {
    train_cafo(arch, data, config, CafoMode::Dfa, telemetry)
}
