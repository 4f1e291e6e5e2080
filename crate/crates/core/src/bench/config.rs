//! TOML experiment configuration.
//!
//! ```toml
//! [dataset]
//! name = "mnist"          # mnist | fashion_mnist | cifar10 | cifar100
//! root = "data"           # FORWARDBENCH_DATA overrides this
//! subset = 10000
//!
//! [model]
//! kind = "mlp"            # mlp | cnn
//! hidden = [1000, 1000]
//!
//! [train]
//! algorithm = "mf"        # bp | ff | cafo_rand | cafo_dfa | mf
//! lr = 1e-3
//! batch_size = 64
//!
//! [search]
//! n_trials = 10           # 0 trains once with [train] as given
//!
//! [stop]
//! patience = 10
//!
//! [telemetry]
//! power_w = 15.0
//!
//! [run]
//! seeds = [0, 1, 2]
//! output = "runs/mnist_mf"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetName, DatasetSpec};
use crate::error::{Error, Result};
use crate::models::{default_cafo_blocks, Activation, CnnSpec, ConvBlockSpec, MlpSpec};
use crate::search::{EarlyStopPolicy, SearchSpace};
use crate::telemetry::TelemetrySettings;
use crate::train::{Algorithm, Architecture, CafoConfig, FfConfig, MfConfig, TrainConfig};

/// Environment variable that replaces `dataset.root`.
pub const DATA_ENV: &str = "FORWARDBENCH_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    /// MLP hidden widths; input and output widths come from the data.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// CNN blocks; the default three-block stack when empty.
    #[serde(default)]
    pub blocks: Vec<ConvBlockSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden: vec![1000, 1000],
            activation: Activation::Relu,
            blocks: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// Concrete architecture for inputs of `image_shape` and `classes` outputs.
    pub fn architecture(&self, image_shape: [usize; 3], classes: usize) -> Result<Architecture> {
        match self.kind {
            ModelKind::Mlp => {
                if self.hidden.is_empty() {
                    return Err(Error::Config("model.hidden needs at least one width".into()));
                }
                let mut widths = vec![image_shape.iter().product()];
                widths.extend(&self.hidden);
                widths.push(classes);
                let spec = MlpSpec {
                    widths,
                    activation: self.activation,
                };
                spec.validate()?;
                Ok(Architecture::Mlp(spec))
            }
            ModelKind::Cnn => {
                let blocks = if self.blocks.is_empty() {
                    default_cafo_blocks(image_shape[0])
                } else {
                    self.blocks.clone()
                };
                let spec = CnnSpec {
                    input: image_shape,
                    blocks,
                };
                spec.block_shapes()?;
                Ok(Architecture::Cnn(spec))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub algorithm: Algorithm,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub ff: FfConfig,
    #[serde(default)]
    pub mf: MfConfig,
    #[serde(default)]
    pub cafo: CafoConfig,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub space: SearchSpace,
}

fn default_trials() -> usize {
    30
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            n_trials: default_trials(),
            space: SearchSpace::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// One full tune-and-train repetition per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/experiment")
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            output: default_output(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub stop: EarlyStopPolicy,
    #[serde(default)]
    pub telemetry: TelemetrySettings,
    #[serde(default)]
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative `dataset.root` or `run.output` stays
    /// relative to the working directory; an empty root becomes `data`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds needs at least one seed".into()));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(Error::Config("run.seeds contains duplicates".into()));
        }
        self.dataset.validate()?;
        if self.search.n_trials > 0 {
            self.search.space.validate()?;
        }
        self.telemetry.power_model().validate()?;
        self.base_train_config(0).validate()
    }

    /// Dataset spec with the environment override and default root applied.
    pub fn resolved_dataset(&self) -> DatasetSpec {
        let mut spec = self.dataset.clone();
        if let Some(root) = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()) {
            spec.root = PathBuf::from(root);
        } else if spec.root.as_os_str().is_empty() {
            spec.root = PathBuf::from("data");
        }
        spec
    }

    /// Training settings before any search trial is applied.
    pub fn base_train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            algorithm: t.algorithm,
            lr: t.lr,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            seed,
            stop: self.stop,
            ff: t.ff.clone(),
            mf: t.mf.clone(),
            cafo: t.cafo.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form, independent of the output
    /// directory and data location.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.run.output = PathBuf::new();
        c.dataset.root = PathBuf::new();
        let json = serde_json::to_vec(&c)?;
        let digest = Sha256::digest(&json);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!("{}_{}", dataset_label(self.dataset.name).to_lowercase(), self.train.algorithm.name())
        })
    }
}

pub fn dataset_label(name: DatasetName) -> &'static str {
    match name {
        DatasetName::Mnist => "MNIST",
        DatasetName::FashionMnist => "F-MNIST",
        DatasetName::Cifar10 => "CIFAR-10",
        DatasetName::Cifar100 => "CIFAR-100",
    }
}
