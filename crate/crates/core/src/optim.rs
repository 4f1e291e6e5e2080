//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

/// Moment buffers for an ordered group of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamWState<T = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bytes held by the moment buffers.
    pub fn footprint_bytes(&self) -> usize {
        let n: usize = self.first.iter().chain(&self.second).map(Tensor::len).sum();
        n * std::mem::size_of::<T>()
    }

    /// Applies one update in place. `params[i]` pairs with `grads[i]` and with
    /// the i-th tensor this state was created for.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.check_same_shape(g)?;
            p.check_same_shape(m)?;
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::from_f64(c.lr);
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let one = T::one();

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::vector(vec![v])
    }

    #[test]
    fn first_step_closed_form() {
        let mut theta = scalar(0.0);
        let g = scalar(1.0);
        let mut st = AdamWState::new(AdamWConfig::with_lr(0.1, 0.0), [&theta]);
        st.step(&mut [&mut theta], &[&g]).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((theta.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut theta = Tensor::<f64>::vector(vec![1.5, -2.0, 0.25]);
        let before = theta.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamWState::new(AdamWConfig::with_lr(0.1, 0.0), [&theta]);
        for _ in 0..5 {
            st.step(&mut [&mut theta], &[&g]).unwrap();
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn decoupled_decay_shrinks_exactly() {
        let (lr, wd) = (0.1, 0.01);
        let mut theta = scalar(2.0);
        let g = scalar(0.0);
        let mut st = AdamWState::new(AdamWConfig::with_lr(lr, wd), [&theta]);
        st.step(&mut [&mut theta], &[&g]).unwrap();
        let expected = 2.0 - lr * wd * 2.0;
        assert!((theta.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut theta = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::<f32>::zeros(&[3]);
        let mut st = AdamWState::new(AdamWConfig::default(), [&theta]);
        assert!(st.step(&mut [&mut theta], &[&g]).is_err());
        assert_eq!(st.steps(), 0);
    }
}
