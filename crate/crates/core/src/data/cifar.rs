//! CIFAR binary records: `[label][3×32×32 channel-major pixels]` for CIFAR-10,
//! `[coarse][fine][pixels]` for CIFAR-100.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Ten,
    Hundred { coarse_labels: bool },
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Ten => PIXELS + 1,
            CifarVariant::Hundred { .. } => PIXELS + 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred { coarse_labels: true } => 20,
            CifarVariant::Hundred { coarse_labels: false } => 100,
        }
    }
}

pub fn load_cifar_binary(paths: &[PathBuf], variant: CifarVariant) -> Result<LabeledBatch> {
    let rec = variant.record_len();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % rec != 0 {
            return Err(Error::Format {
                path: path.clone(),
                offset: (bytes.len() - bytes.len() % rec) as u64,
                reason: format!(
                    "length {} is not a multiple of the {rec}-byte record size",
                    bytes.len()
                ),
            });
        }
        for (i, r) in bytes.chunks_exact(rec).enumerate() {
            let label = match variant {
                CifarVariant::Ten => r[0],
                CifarVariant::Hundred { coarse_labels: true } => r[0],
                CifarVariant::Hundred { coarse_labels: false } => r[1],
            } as usize;
            if label >= variant.num_classes() {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: (i * rec) as u64,
                    reason: format!("label {label} out of range"),
                });
            }
            labels.push(label);
            pixels.extend(r[rec - PIXELS..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    let n = labels.len();
    LabeledBatch::new(
        Tensor::new(vec![n, PIXELS], pixels)?,
        labels,
        variant.num_classes(),
        [3, 32, 32],
    )
}

/// Locates `name` directly under `dir` or inside one of the usual archive folders.
pub(crate) fn find_file(dir: &Path, name: &str) -> PathBuf {
    for sub in ["", "cifar-10-batches-bin", "cifar-100-binary"] {
        let p = dir.join(sub).join(name);
        if p.exists() {
            return p;
        }
    }
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(labels: &[u8], fill: u8) -> Vec<u8> {
        let mut v = labels.to_vec();
        v.extend(std::iter::repeat_n(fill, PIXELS));
        v
    }

    #[test]
    fn single_cifar10_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut r = record(&[3], 0);
        r[1] = 255; // first red pixel
        fs::write(&p, r).unwrap();
        let b = load_cifar_binary(&[p], CifarVariant::Ten).unwrap();
        assert_eq!(b.inputs.shape(), &[1, 3072]);
        assert_eq!(b.labels, vec![3]);
        assert_eq!(b.inputs.data()[0], 1.0);
        assert_eq!(b.image_shape, [3, 32, 32]);
    }

    #[test]
    fn cifar100_fine_and_coarse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.bin");
        fs::write(&p, record(&[4, 57], 10)).unwrap();
        let fine = load_cifar_binary(&[p.clone()], CifarVariant::Hundred { coarse_labels: false }).unwrap();
        assert_eq!(fine.labels, vec![57]);
        assert_eq!(fine.num_classes, 100);
        let coarse = load_cifar_binary(&[p], CifarVariant::Hundred { coarse_labels: true }).unwrap();
        assert_eq!(coarse.labels, vec![4]);
    }

    #[test]
    fn truncated_record_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut bytes = record(&[1], 0);
        bytes.extend(record(&[2], 0).into_iter().take(100));
        fs::write(&p, bytes).unwrap();
        match load_cifar_binary(&[p], CifarVariant::Ten).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 3073),
            e => panic!("unexpected {e}"),
        }
    }
}
