//! IDX reader/writer (MNIST family). Big-endian headers, unsigned byte payloads.

use std::fs;
use std::path::Path;

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, "truncated header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated payload: header promises {len} bytes, {available} present"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn expect_magic(cur: &mut Cursor<'_>, magic: u32) -> Result<()> {
    let found = cur.u32()?;
    if found != magic {
        return Err(cur.fail(
            0,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    Ok(())
}

/// Loads an IDX image/label pair; pixels are mapped to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledBatch> {
    let img_bytes = read(images)?;
    let mut cur = Cursor {
        path: images,
        bytes: &img_bytes,
        pos: 0,
    };
    expect_magic(&mut cur, IMAGES_MAGIC)?;
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let pixels = cur.payload(count * rows * cols)?;

    let lab_bytes = read(labels)?;
    let mut lcur = Cursor {
        path: labels,
        bytes: &lab_bytes,
        pos: 0,
    };
    expect_magic(&mut lcur, LABELS_MAGIC)?;
    let label_count = lcur.u32()? as usize;
    if label_count != count {
        return Err(lcur.fail(
            4,
            format!("label count {label_count} does not match image count {count}"),
        ));
    }
    let raw_labels = lcur.payload(count)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);

    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let inputs = Tensor::new(vec![count, rows * cols], data)?;
    LabeledBatch::new(inputs, labels, num_classes, [1, rows, cols])
}

/// Writes a batch back as an IDX pair. Pixels are re-quantized to bytes.
pub fn write_idx(batch: &LabeledBatch, images: &Path, labels: &Path) -> Result<()> {
    let [_, rows, cols] = batch.image_shape;
    let mut img = Vec::with_capacity(16 + batch.inputs.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(batch.inputs.data().iter().map(|&p| quantize(p)));
    fs::write(images, img).map_err(|e| Error::io(images, e))?;

    let mut lab = Vec::with_capacity(8 + batch.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    lab.extend(batch.labels.iter().map(|&l| l as u8));
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

pub(crate) fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}
