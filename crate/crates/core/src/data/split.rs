//! Class-stratified splitting and subsampling, plus the FF label overlay.

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

fn indices_by_class(batch: &LabeledBatch) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); batch.num_classes];
    for (i, &y) in batch.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Number of validation samples for a class of size `n`: the nearest integer
/// to `n * fraction`, clamped so both sides keep at least one sample.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    let k = (n as f64 * fraction).round() as usize;
    k.clamp(1, n - 1)
}

/// Splits off a validation set with the requested per-class proportion.
pub fn stratified_split(
    batch: &LabeledBatch,
    fraction: f64,
    rng: &mut RngState,
) -> Result<(LabeledBatch, LabeledBatch)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut idx) in indices_by_class(batch).into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} sample(s); a split needs at least 2",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let k = validation_count(idx.len(), fraction);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((batch.select(&train), batch.select(&val)))
}

/// Class-stratified subsample of `n` records, keeping the original order.
///
/// Per-class quotas follow largest-remainder apportionment of `n` over the
/// class frequencies.
pub fn subsample(batch: &LabeledBatch, n: usize, rng: &mut RngState) -> Result<LabeledBatch> {
    if n > batch.len() {
        return Err(Error::Config(format!(
            "requested {n} samples but only {} are available",
            batch.len()
        )));
    }
    if n == batch.len() {
        return Ok(batch.clone());
    }
    let by_class = indices_by_class(batch);
    let total = batch.len() as f64;
    let quotas: Vec<f64> = by_class
        .iter()
        .map(|c| n as f64 * c.len() as f64 / total)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    // Largest fractional part first; lowest class index breaks ties.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if counts[c] < by_class[c].len() {
            counts[c] += 1;
            remaining -= 1;
        }
    }
    let mut chosen = Vec::with_capacity(n);
    for (mut idx, k) in by_class.into_iter().zip(counts) {
        rng.shuffle(&mut idx);
        chosen.extend_from_slice(&idx[..k]);
    }
    chosen.sort_unstable();
    Ok(batch.select(&chosen))
}

/// Replaces the first `num_classes` features with `intensity · onehot(label)`.
pub fn overlay_label(input: &[f32], label: usize, num_classes: usize, intensity: f32) -> Result<Vec<f32>> {
    let mut out = input.to_vec();
    overlay_in_place(&mut out, label, num_classes, intensity)?;
    Ok(out)
}

pub(crate) fn overlay_in_place(row: &mut [f32], label: usize, num_classes: usize, intensity: f32) -> Result<()> {
    if label >= num_classes {
        return Err(Error::Index {
            what: "overlay label",
            index: label,
            bound: num_classes,
        });
    }
    if row.len() < num_classes {
        return Err(Error::dim(format!(
            "cannot overlay {num_classes} classes onto {} features",
            row.len()
        )));
    }
    row[..num_classes].iter_mut().for_each(|v| *v = 0.0);
    row[label] = intensity;
    Ok(())
}

/// Applies [`overlay_label`] to every row with its own label.
pub fn overlay_rows(inputs: &Tensor<f32>, labels: &[usize], num_classes: usize, intensity: f32) -> Result<Tensor<f32>> {
    let mut out = inputs.clone();
    for (i, &y) in labels.iter().enumerate() {
        overlay_in_place(out.row_mut(i), y, num_classes, intensity)?;
    }
    Ok(out)
}

/// A label drawn uniformly from the `num_classes - 1` classes other than `label`.
pub fn wrong_label(label: usize, num_classes: usize, rng: &mut RngState) -> usize {
    let r = rng.below(num_classes - 1);
    if r >= label {
        r + 1
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(classes: usize, per_class: usize) -> LabeledBatch {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let data = (0..n).map(|i| i as f32).collect();
        LabeledBatch::new(Tensor::new(vec![n, 1], data).unwrap(), labels, classes, [1, 1, 1]).unwrap()
    }

    #[test]
    fn divisible_split_is_exact() {
        let b = balanced(10, 100);
        let (train, val) = stratified_split(&b, 0.1, &mut RngState::new(0)).unwrap();
        assert_eq!(val.class_counts(), vec![10; 10]);
        assert_eq!(train.len() + val.len(), 1000);
    }

    #[test]
    fn fifteen_samples_round_within_one() {
        // 15 * 0.1 = 1.5: the ±1 rule admits 1 or 2.
        let k = validation_count(15, 0.1);
        assert!(k == 1 || k == 2);
        let b = balanced(1, 15);
        let (_, val) = stratified_split(&b, 0.1, &mut RngState::new(9)).unwrap();
        assert!(val.len() == 1 || val.len() == 2);
    }

    #[test]
    fn split_is_deterministic() {
        let b = balanced(3, 20);
        let a = stratified_split(&b, 0.25, &mut RngState::new(4)).unwrap();
        let c = stratified_split(&b, 0.25, &mut RngState::new(4)).unwrap();
        assert_eq!(a.1.inputs, c.1.inputs);
        assert_eq!(a.0.labels, c.0.labels);
    }

    #[test]
    fn singleton_class_is_config_error() {
        let b = LabeledBatch::new(Tensor::zeros(&[3, 1]), vec![0, 0, 1], 2, [1, 1, 1]).unwrap();
        assert!(matches!(
            stratified_split(&b, 0.5, &mut RngState::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn subsample_cases() {
        let b = balanced(10, 30);
        let full = subsample(&b, 300, &mut RngState::new(1)).unwrap();
        assert_eq!(full.inputs, b.inputs);
        let ten = subsample(&b, 10, &mut RngState::new(1)).unwrap();
        assert_eq!(ten.class_counts(), vec![1; 10]);
        let again = subsample(&b, 10, &mut RngState::new(1)).unwrap();
        assert_eq!(ten.inputs, again.inputs);
        assert!(subsample(&b, 301, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn overlay_cases() {
        let z = vec![0.0f32; 20];
        let o = overlay_label(&z, 3, 10, 1.0).unwrap();
        assert_eq!(o[3], 1.0);
        assert_eq!(o.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(overlay_label(&o, 3, 10, 1.0).unwrap(), o);
        assert!(matches!(overlay_label(&z, 10, 10, 1.0), Err(Error::Index { .. })));
    }

    #[test]
    fn wrong_label_never_true() {
        let mut rng = RngState::new(2);
        for y in 0..10 {
            for _ in 0..100 {
                assert_ne!(wrong_label(y, 10, &mut rng), y);
            }
        }
    }
}
