//! End-to-end backpropagation on a global cross-entropy loss.

use serde_json::json;

use super::{
    check_loss, checkpoint_spec, chunked_accuracy, finish_run, minibatches, require_classes, Algorithm, EpochRecord,
    RunResult, TrainConfig, TrainedRun,
};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::models::{
    build_mlp, conv_forward, conv_input_grad, conv_weight_grad, flops_forward, maxpool_backward, Checkpoint, CnnSpec,
    ConvForward, ConvParams, Dense, Mlp, MlpSpec,
};
use crate::ops::{argmax, softmax_ce_batch};
use crate::optim::AdamWState;
use crate::rng::RngState;
use crate::search::{fit_with_early_stopping, EpochTrainer};
use crate::telemetry::Telemetry;
use crate::tensor::{Scalar, Tensor};

/// Row-wise argmax of a score matrix; ties go to the lowest class.
pub(crate) fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    (0..scores.rows()).map(|i| argmax(scores.row(i))).collect()
}

pub fn predict_bp<T: Scalar>(mlp: &Mlp<T>, inputs: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&mlp.logits(inputs)?))
}

/// Mean cross-entropy over the batch and its gradient for every tensor in
/// [`Mlp::tensors`] order, by a hand-written backward pass.
pub fn bp_gradients<T: Scalar>(mlp: &Mlp<T>, inputs: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<Tensor<T>>)> {
    let trace = mlp.forward_collect(inputs)?;
    let (loss, mut dz) = softmax_ce_batch(trace.logits(), labels)?;
    let n = mlp.layers.len();
    let mut grads: Vec<Tensor<T>> = Vec::with_capacity(2 * n);
    for l in (0..n).rev() {
        let layer = &mlp.layers[l];
        let input = if l == 0 { inputs } else { &trace.act[l - 1] };
        let (dw, db) = layer.param_grads(input, &dz)?;
        grads.push(db);
        grads.push(dw);
        if l > 0 {
            let mut da = dz.matmul_nt(&layer.weight)?;
            da.mul_assign(&mlp.spec.activation.derivative(&trace.pre[l - 1]))?;
            dz = da;
        }
    }
    grads.reverse();
    Ok((loss, grads))
}

/// A model trained on one global loss.
pub(crate) trait GlobalModel: Clone {
    fn gradients(&self, inputs: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Vec<Tensor<f32>>)>;
    fn params(&self) -> Vec<&Tensor<f32>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>>;
    fn predict(&self, inputs: &Tensor<f32>) -> Result<Vec<usize>>;
}

impl GlobalModel for Mlp<f32> {
    fn gradients(&self, inputs: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Vec<Tensor<f32>>)> {
        bp_gradients(self, inputs, labels)
    }

    fn params(&self) -> Vec<&Tensor<f32>> {
        self.tensors()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.tensors_mut()
    }

    fn predict(&self, inputs: &Tensor<f32>) -> Result<Vec<usize>> {
        predict_bp(self, inputs)
    }
}

/// A convolutional stack followed by one linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnClassifier<T = f32> {
    pub spec: CnnSpec,
    pub blocks: Vec<ConvParams<T>>,
    pub head: Dense<T>,
}

impl<T: Scalar> CnnClassifier<T> {
    pub fn build(spec: &CnnSpec, classes: usize, rng: &mut RngState) -> Result<Self> {
        let shapes = spec.block_shapes()?;
        let blocks = spec
            .blocks
            .iter()
            .map(|b| ConvParams::init(b, rng))
            .collect::<Result<Vec<_>>>()?;
        let flat: usize = shapes.last().ok_or_else(|| Error::Config("CNN needs at least one block".into()))?.iter().product();
        Ok(Self {
            spec: spec.clone(),
            blocks,
            head: Dense::init(flat, classes, rng)?,
        })
    }

    fn forward_blocks(&self, inputs: &Tensor<T>) -> Result<Vec<ConvForward<T>>> {
        let mut shape = self.spec.input;
        let mut out: Vec<ConvForward<T>> = Vec::with_capacity(self.blocks.len());
        for (b, params) in self.spec.blocks.iter().zip(&self.blocks) {
            let input = out.last().map_or(inputs, |f| &f.output);
            let f = conv_forward(b, params, input, shape)?;
            shape = f.output_shape;
            out.push(f);
        }
        Ok(out)
    }

    pub fn logits(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let fwd = self.forward_blocks(inputs)?;
        self.head.forward(&fwd.last().expect("at least one block").output)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.blocks
            .iter()
            .flat_map(|p| [&p.weight, &p.bias])
            .chain([&self.head.weight, &self.head.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .chain([&mut self.head.weight, &mut self.head.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Loss and gradients in [`Self::tensors`] order.
    pub fn gradients(&self, inputs: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<Tensor<T>>)> {
        let fwd = self.forward_blocks(inputs)?;
        let features = &fwd.last().expect("at least one block").output;
        let logits = self.head.forward(features)?;
        let (loss, dlogits) = softmax_ce_batch(&logits, labels)?;
        let (hw, hb) = self.head.param_grads(features, &dlogits)?;
        let mut d_out = dlogits.matmul_nt(&self.head.weight)?;
        let mut shapes = vec![self.spec.input];
        shapes.extend(fwd.iter().map(|f| f.output_shape));
        let mut grads = vec![hb, hw];
        for b in (0..self.blocks.len()).rev() {
            let spec = &self.spec.blocks[b];
            let mut d_pre = maxpool_backward(&fwd[b], &d_out);
            d_pre.mul_assign(&spec.activation.derivative(&fwd[b].pre))?;
            let input = if b == 0 { inputs } else { &fwd[b - 1].output };
            let (dw, db) = conv_weight_grad(spec, input, shapes[b], &d_pre)?;
            grads.push(db);
            grads.push(dw);
            if b > 0 {
                d_out = conv_input_grad(spec, &self.blocks[b], shapes[b], &d_pre)?;
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }
}

impl GlobalModel for CnnClassifier<f32> {
    fn gradients(&self, inputs: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Vec<Tensor<f32>>)> {
        CnnClassifier::gradients(self, inputs, labels)
    }

    fn params(&self) -> Vec<&Tensor<f32>> {
        self.tensors()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.tensors_mut()
    }

    fn predict(&self, inputs: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(inputs)?))
    }
}

struct GlobalEpochs<'a, M> {
    model: M,
    opt: AdamWState<f32>,
    data: &'a PreparedData,
    batch_size: usize,
    rng: RngState,
}

impl<M: GlobalModel> EpochTrainer for GlobalEpochs<'_, M> {
    type Snapshot = M;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let train = &self.data.train;
        let mut total = 0.0;
        for idx in minibatches(train.len(), self.batch_size, &mut self.rng) {
            let x = train.inputs.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = self.model.gradients(&x, &labels)?;
            check_loss(loss as f64, || format!("epoch {epoch}"))?;
            total += loss as f64 * idx.len() as f64;
            let grads: Vec<&Tensor<f32>> = grads.iter().collect();
            self.opt.step(&mut self.model.params_mut(), &grads)?;
        }
        let val_acc = chunked_accuracy(&self.data.val, |x| self.model.predict(x))?;
        Ok(EpochRecord::new("train", total / train.len().max(1) as f64, val_acc))
    }

    fn snapshot(&self) -> M {
        self.model.clone()
    }
}

fn train_global<M: GlobalModel>(
    model: M,
    data: &PreparedData,
    config: &TrainConfig,
    mut telemetry: Telemetry,
    spec_text: String,
    forward_flops: f64,
) -> Result<RunResult> {
    config.validate()?;
    let opt = AdamWState::new(config.adamw(), model.params());
    let mut epochs = GlobalEpochs {
        model,
        opt,
        data,
        batch_size: config.batch_size,
        rng: RngState::new(config.seed).fork(2),
    };
    telemetry.mark("train", None);
    let outcome = fit_with_early_stopping(&config.stop, &mut epochs)?;
    let best = outcome.best;
    let test_acc = chunked_accuracy(&data.test, |x| best.predict(x))?;
    let checkpoint = Checkpoint {
        spec: spec_text,
        tensors: best.params().into_iter().cloned().collect(),
    };
    let param_count = checkpoint.tensors.iter().map(Tensor::len).sum();
    let run = TrainedRun {
        checkpoint,
        epochs: outcome.records,
        best_epoch: outcome.best_index,
        best_val_acc: outcome.best_val_acc,
        test_acc,
        param_count,
        forward_flops,
    };
    finish_run(config.algorithm, run, telemetry)
}

pub fn train_bp(spec: &MlpSpec, data: &PreparedData, config: &TrainConfig, telemetry: Telemetry) -> Result<RunResult> {
    spec.validate()?;
    require_classes(*spec.widths.last().expect("validated"), data)?;
    let mlp: Mlp<f32> = build_mlp(spec, &mut RngState::new(config.seed).fork(1))?;
    let text = checkpoint_spec(Algorithm::Bp, spec, json!(null));
    train_global(mlp, data, config, telemetry, text, flops_forward(spec, 1) as f64)
}

/// The cascade's backpropagation baseline: the same blocks trained end to
/// end through a single final classifier.
pub fn train_bp_cnn(spec: &CnnSpec, data: &PreparedData, config: &TrainConfig, telemetry: Telemetry) -> Result<RunResult> {
    if spec.input.iter().product::<usize>() != data.features() {
        return Err(Error::Config(format!(
            "CNN input {:?} does not match {} features",
            spec.input,
            data.features()
        )));
    }
    let classes = data.num_classes();
    let model = CnnClassifier::<f32>::build(spec, classes, &mut RngState::new(config.seed).fork(1))?;
    let last = spec.blocks.len() - 1;
    let flops = spec.flops_forward(&[(last, classes)], 1)? as f64;
    let text = checkpoint_spec(Algorithm::Bp, spec, json!({ "head_classes": classes }));
    train_global(model, data, config, telemetry, text, flops)
}
