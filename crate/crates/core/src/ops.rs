//! Activations, losses and initializers.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Numerically stable softmax of a single score vector.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(z: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v = *v / total;
    }
}

/// Row-wise softmax of a `[batch × classes]` score matrix.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let mut out = scores.clone();
    let c = out.cols();
    if c > 0 {
        out.data_mut().chunks_exact_mut(c).for_each(softmax_in_place);
    }
    out
}

/// `−ln p[label]`.
pub fn cross_entropy<T: Scalar>(probabilities: &[T], label: usize) -> Result<T> {
    let p = probabilities.get(label).ok_or(Error::Index {
        what: "class label",
        index: label,
        bound: probabilities.len(),
    })?;
    // Clamp so a saturated softmax reports a large finite loss instead of inf.
    Ok(-p.max(T::min_positive_value()).ln())
}

/// Gradient of `cross_entropy(softmax(z), label)` with respect to `z`.
pub fn cross_entropy_grad<T: Scalar>(probabilities: &[T], label: usize) -> Result<Vec<T>> {
    if label >= probabilities.len() {
        return Err(Error::Index {
            what: "class label",
            index: label,
            bound: probabilities.len(),
        });
    }
    let mut g = probabilities.to_vec();
    g[label] -= T::one();
    Ok(g)
}

/// Mean softmax cross-entropy over a batch of score rows, with the gradient
/// of that mean with respect to the scores.
pub fn softmax_ce_batch<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if scores.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} score rows for {} labels",
            scores.rows(),
            labels.len()
        )));
    }
    let mut grad = softmax_rows(scores);
    let c = grad.cols();
    let scale = T::one() / T::from_f64(labels.len().max(1) as f64);
    let mut loss = T::zero();
    for (row, &y) in grad.data_mut().chunks_exact_mut(c).zip(labels) {
        loss += cross_entropy(row, y)?;
        row[y] -= T::one();
        row.iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss * scale, grad))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient of relu; zero at zero.
pub fn relu_grad<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { T::one() } else { T::zero() })
}

/// Unit-L2 rescaling. A zero vector is returned unchanged with the
/// degenerate flag set.
pub fn l2_normalize<T: Scalar>(x: &[T]) -> (Vec<T>, bool) {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() {
        (x.iter().map(|&v| v / norm).collect(), false)
    } else {
        (x.to_vec(), true)
    }
}

/// Row-wise [`l2_normalize`]; returns how many rows were degenerate.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, usize) {
    let mut out = x.clone();
    let c = out.cols();
    let mut degenerate = 0;
    if c > 0 {
        for row in out.data_mut().chunks_exact_mut(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / norm);
            } else {
                degenerate += 1;
            }
        }
    }
    (out, degenerate)
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// He/Kaiming normal draws with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Config("kaiming init needs fan_in > 0".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data)
}
