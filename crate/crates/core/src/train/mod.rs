//! Trainers for backpropagation and the three backpropagation-free
//! algorithms, plus the run-level types they share.
//!
//! Accuracies are fractions in `[0, 1]` throughout.

pub mod bp;
pub mod cafo;
pub mod ff;
pub mod mf;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledBatch, PreparedData};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, CnnSpec, MlpSpec};
use crate::optim::AdamWConfig;
use crate::rng::RngState;
use crate::search::{EarlyStopPolicy, Objective, TrialParams};
use crate::telemetry::{PhaseMark, ResourceSample, RunMetrics, Telemetry};
use crate::tensor::Tensor;

pub use bp::{predict_bp, train_bp};
pub use cafo::{predict_cafo, train_cafo_dfa, train_cafo_rand, CafoAggregation, CafoConfig};
pub use ff::{goodness, predict_ff, train_ff, FfConfig, GoodnessAggregation};
pub use mf::{predict_mf, train_mf, MfAggregation, MfConfig, MfMode, MfSchedule};

/// Rows evaluated at once during inference.
pub(crate) const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Bp,
    Ff,
    CafoRand,
    CafoDfa,
    Mf,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bp => "bp",
            Algorithm::Ff => "ff",
            Algorithm::CafoRand => "cafo_rand",
            Algorithm::CafoDfa => "cafo_dfa",
            Algorithm::Mf => "mf",
        }
    }

    pub fn display(self) -> &'static str {
        match self {
            Algorithm::Bp => "BP",
            Algorithm::Ff => "FF",
            Algorithm::CafoRand => "CaFo-Rand",
            Algorithm::CafoDfa => "CaFo-DFA",
            Algorithm::Mf => "MF",
        }
    }
}

/// The network a run trains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpSpec),
    Cnn(CnnSpec),
}

impl Architecture {
    pub fn label(&self) -> String {
        match self {
            Architecture::Mlp(m) => m.label(),
            Architecture::Cnn(c) => format!("CNN {}-block", c.blocks.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stop: EarlyStopPolicy,
    #[serde(default)]
    pub ff: FfConfig,
    #[serde(default)]
    pub mf: MfConfig,
    #[serde(default)]
    pub cafo: CafoConfig,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, lr: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            algorithm,
            lr,
            batch_size,
            weight_decay: 0.0,
            seed,
            stop: EarlyStopPolicy::default(),
            ff: FfConfig::default(),
            mf: MfConfig::default(),
            cafo: CafoConfig::default(),
        }
    }

    pub fn max_epochs(&self) -> usize {
        self.stop.max_epochs
    }

    pub fn validate(&self) -> Result<()> {
        // lr == 0 is allowed: it is how frozen-parameter runs are expressed.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        self.stop.validate()?;
        self.ff.validate()?;
        self.mf.validate()?;
        self.cafo.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig::with_lr(self.lr, self.weight_decay)
    }

    /// This config with a search trial's sampled values applied.
    pub fn with_trial(&self, params: &TrialParams, seed: u64) -> Self {
        let mut c = self.clone();
        c.lr = params.lr;
        c.batch_size = params.batch_size;
        c.weight_decay = params.weight_decay;
        c.seed = seed;
        if let Some(t) = params.ff_theta {
            c.ff.theta = t;
        }
        if let Some(e) = params.mf_layer_epochs {
            c.mf.schedule.layer_epochs = e;
        }
        if let Some(e) = params.dfa_epochs {
            c.cafo.dfa_epochs = e;
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
}

impl Curves {
    pub fn from_records(records: &[EpochRecord]) -> Self {
        Self {
            train_loss: records.iter().map(|r| r.train_loss).collect(),
            val_acc: records.iter().map(|r| r.val_acc).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.val_acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.val_acc.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGoodness {
    pub layer: usize,
    pub mean_pos_goodness: f64,
    pub mean_neg_goodness: f64,
}

/// One line of the per-epoch run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub val_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub active_layer: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub goodness: Vec<LayerGoodness>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub layer_losses: Vec<f64>,
}

impl EpochRecord {
    pub fn new(phase: &str, train_loss: f64, val_acc: f64) -> Self {
        Self {
            epoch: 0,
            phase: phase.to_string(),
            train_loss,
            val_acc,
            active_layer: None,
            goodness: Vec::new(),
            layer_losses: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub algorithm: Algorithm,
    /// Parameters of the best-validation epoch.
    pub checkpoint: Checkpoint,
    pub curves: Curves,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the epoch the checkpoint comes from.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub metrics: RunMetrics,
    pub phases: Vec<PhaseMark>,
    pub samples: Vec<ResourceSample>,
    pub param_count: usize,
}

impl Objective for RunResult {
    fn objective(&self) -> f64 {
        self.best_val_acc
    }
}

/// Everything a trainer hands back before telemetry is closed.
pub(crate) struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub param_count: usize,
    /// Forward FLOPs of evaluating the trained model once per test sample.
    pub forward_flops: f64,
}

pub(crate) fn finish_run(algorithm: Algorithm, run: TrainedRun, telemetry: Telemetry) -> Result<RunResult> {
    let report = telemetry.finish(run.forward_flops)?;
    let mut epochs = run.epochs;
    for (i, e) in epochs.iter_mut().enumerate() {
        e.epoch = i;
    }
    Ok(RunResult {
        algorithm,
        checkpoint: run.checkpoint,
        curves: Curves::from_records(&epochs),
        epochs,
        best_epoch: run.best_epoch,
        best_val_acc: run.best_val_acc,
        test_acc: run.test_acc,
        metrics: report.metrics,
        phases: report.phases,
        samples: report.samples,
        param_count: run.param_count,
    })
}

/// Trains `arch` with the algorithm named in `config`.
pub fn train(arch: &Architecture, data: &PreparedData, config: &TrainConfig, telemetry: Telemetry) -> Result<RunResult> {
    match (config.algorithm, arch) {
        (Algorithm::Bp, Architecture::Mlp(spec)) => train_bp(spec, data, config, telemetry),
        (Algorithm::Bp, Architecture::Cnn(spec)) => bp::train_bp_cnn(spec, data, config, telemetry),
        (Algorithm::Ff, Architecture::Mlp(spec)) => train_ff(spec, data, config, telemetry),
        (Algorithm::Mf, Architecture::Mlp(spec)) => train_mf(spec, data, config, telemetry),
        (Algorithm::CafoRand, _) => train_cafo_rand(arch, data, config, telemetry),
        (Algorithm::CafoDfa, _) => train_cafo_dfa(arch, data, config, telemetry),
        (alg, Architecture::Cnn(_)) => Err(Error::Config(format!(
            "{} needs an MLP architecture",
            alg.display()
        ))),
    }
}

/// Shuffled minibatch index lists covering `0..n`.
pub(crate) fn minibatches(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    rng.permutation(n).chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Applies `predict` to row chunks of `batch` and scores the result.
pub(crate) fn chunked_accuracy(
    batch: &LabeledBatch,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Vec<usize>>,
) -> Result<f64> {
    let mut predicted = Vec::with_capacity(batch.len());
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        predicted.extend(predict(&batch.inputs.select_rows(chunk))?);
    }
    Ok(accuracy(&predicted, &batch.labels))
}

pub(crate) fn check_loss(loss: f64, context: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            diagnostic: format!("non-finite loss ({loss}) in {}", context()),
            partial: Curves::default(),
        })
    }
}

/// Architecture description stored in checkpoints.
pub(crate) fn checkpoint_spec(algorithm: Algorithm, arch: &impl Serialize, extra: serde_json::Value) -> String {
    serde_json::json!({
        "algorithm": algorithm,
        "architecture": arch,
        "extra": extra,
    })
    .to_string()
}

pub(crate) fn require_classes(out_width: usize, data: &PreparedData) -> Result<()> {
    if out_width != data.num_classes() {
        return Err(Error::Config(format!(
            "output width {out_width} does not match {} classes",
            data.num_classes()
        )));
    }
    Ok(())
}
