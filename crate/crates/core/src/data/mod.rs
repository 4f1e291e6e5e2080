//! Dataset loading, normalization and stratified splitting.

mod cifar;
mod idx;
mod split;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use cifar::{load_cifar_binary, CifarVariant};
pub use idx::{load_idx, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use split::{
    overlay_label, overlay_rows, stratified_split, subsample, validation_count, wrong_label,
};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Labeled records. `inputs` is always `[batch × features]`; `image_shape`
/// gives the `[channels, height, width]` view used by convolutional blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
}

impl LabeledBatch {
    pub fn new(
        inputs: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        image_shape: [usize; 3],
    ) -> Result<Self> {
        if inputs.rows() != labels.len() && !(labels.is_empty() && inputs.is_empty()) {
            return Err(Error::dim(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                bound: num_classes,
            });
        }
        if !inputs.is_empty() && image_shape.iter().product::<usize>() != inputs.cols() {
            return Err(Error::dim(format!(
                "image shape {image_shape:?} does not cover {} features",
                inputs.cols()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut inputs = self.inputs.select_rows(idx);
        if idx.is_empty() {
            inputs = Tensor::zeros(&[0, self.features()]);
        }
        Self {
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenation of two batches over the same label space.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.image_shape != other.image_shape || self.num_classes != other.num_classes {
            return Err(Error::dim("merging batches of different layouts"));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let n = labels.len();
        Self::new(
            Tensor::new(vec![n, self.features()], data)?,
            labels,
            self.num_classes,
            self.image_shape,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion_mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
        }
    }

    pub fn default_normalization(self) -> Normalization {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => Normalization::Scale01,
            DatasetName::Cifar10 | DatasetName::Cifar100 => Normalization::PerChannel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw pixels already in `[0, 1]`.
    Scale01,
    /// Per-channel standardization with statistics of the training split.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    #[serde(default)]
    pub root: PathBuf,
    /// Training records to keep (stratified); 0 keeps everything.
    #[serde(default)]
    pub subset: usize,
    /// Test records to keep (stratified); 0 keeps everything.
    #[serde(default)]
    pub test_subset: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    /// CIFAR-100 only: use the 20 coarse labels.
    #[serde(default)]
    pub coarse_labels: bool,
}

fn default_validation_fraction() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn new(name: DatasetName, root: impl Into<PathBuf>) -> Self {
        Self {
            name,
            root: root.into(),
            subset: 0,
            test_subset: 0,
            validation_fraction: default_validation_fraction(),
            normalization: None,
            coarse_labels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(self.name.dir_name())
    }
}

/// Raw train/test splits as stored on disk.
pub fn load_raw(spec: &DatasetSpec) -> Result<(LabeledBatch, LabeledBatch)> {
    let dir = spec.dir();
    match spec.name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let pair = |prefix: &str| -> Result<LabeledBatch> {
                load_idx(
                    &dir.join(format!("{prefix}-images-idx3-ubyte")),
                    &dir.join(format!("{prefix}-labels-idx1-ubyte")),
                )
            };
            Ok((pair("train")?, pair("t10k")?))
        }
        DatasetName::Cifar10 => {
            let train: Vec<PathBuf> = (1..=5)
                .map(|i| cifar::find_file(&dir, &format!("data_batch_{i}.bin")))
                .collect();
            let test = vec![cifar::find_file(&dir, "test_batch.bin")];
            Ok((
                load_cifar_binary(&train, CifarVariant::Ten)?,
                load_cifar_binary(&test, CifarVariant::Ten)?,
            ))
        }
        DatasetName::Cifar100 => {
            let v = CifarVariant::Hundred {
                coarse_labels: spec.coarse_labels,
            };
            Ok((
                load_cifar_binary(&[cifar::find_file(&dir, "train.bin")], v)?,
                load_cifar_binary(&[cifar::find_file(&dir, "test.bin")], v)?,
            ))
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn fit(batch: &LabeledBatch) -> Self {
        let [c, h, w] = batch.image_shape;
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for row in batch.inputs.data().chunks_exact(c * plane) {
            for ch in 0..c {
                for &v in &row[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (batch.len() * plane).max(1) as f64;
        let mut std = vec![0.0f32; c];
        let mut mean32 = vec![0.0f32; c];
        for ch in 0..c {
            let m = mean[ch] / n;
            mean32[ch] = m as f32;
            std[ch] = ((sq[ch] / n - m * m).max(0.0).sqrt() as f32).max(1e-6);
        }
        Self { mean: mean32, std }
    }

    pub fn apply(&self, batch: &mut LabeledBatch) {
        let [c, h, w] = batch.image_shape;
        let plane = h * w;
        for row in batch.inputs.data_mut().chunks_exact_mut(c * plane) {
            for ch in 0..c {
                for v in &mut row[ch * plane..(ch + 1) * plane] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
    }
}

/// Train/validation/test splits ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledBatch,
    pub val: LabeledBatch,
    pub test: LabeledBatch,
}

impl PreparedData {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn features(&self) -> usize {
        self.train.features()
    }

    /// Largest input value of the training split (the FF overlay intensity).
    pub fn max_input(&self) -> f32 {
        self.train
            .inputs
            .data()
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Subsample, split off validation, and normalize.
pub fn prepare(
    train: &LabeledBatch,
    test: &LabeledBatch,
    spec: &DatasetSpec,
    rng: &mut RngState,
) -> Result<PreparedData> {
    spec.validate()?;
    let pool = if spec.subset > 0 {
        subsample(train, spec.subset, &mut rng.fork(1))?
    } else {
        train.clone()
    };
    let mut test = if spec.test_subset > 0 {
        subsample(test, spec.test_subset, &mut rng.fork(2))?
    } else {
        test.clone()
    };
    let (mut train, mut val) = stratified_split(&pool, spec.validation_fraction, &mut rng.fork(3))?;
    if spec.normalization.unwrap_or(spec.name.default_normalization()) == Normalization::PerChannel {
        let stats = ChannelStats::fit(&train);
        stats.apply(&mut train);
        stats.apply(&mut val);
        stats.apply(&mut test);
    }
    Ok(PreparedData { train, val, test })
}

pub fn load_prepared(spec: &DatasetSpec, rng: &mut RngState) -> Result<PreparedData> {
    let (train, test) = load_raw(spec)?;
    prepare(&train, &test, spec, rng)
}

/// True when the files for `name` are present under `root`.
pub fn dataset_available(root: &Path, name: DatasetName) -> bool {
    let dir = root.join(name.dir_name());
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            dir.join("train-images-idx3-ubyte").exists() && dir.join("t10k-labels-idx1-ubyte").exists()
        }
        DatasetName::Cifar10 => cifar::find_file(&dir, "data_batch_1.bin").exists(),
        DatasetName::Cifar100 => cifar::find_file(&dir, "train.bin").exists(),
    }
}
