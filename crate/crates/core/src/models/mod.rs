//! Architectures shared by every trainer: dense MLPs and the small
//! convolutional blocks of the cascaded model.
//!
//! FLOP accounting counts one multiply-accumulate as 2 FLOPs and ignores
//! bias additions, activations and pooling.

mod checkpoint;
mod conv;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{
    conv_forward, conv_input_grad, conv_weight_grad, default_cafo_blocks, maxpool_backward, ConvBlockSpec,
    ConvForward, ConvParams, Pool,
};

use crate::error::{Error, Result};
use crate::ops::kaiming_init;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => crate::ops::relu(z),
            Activation::Tanh => z.map(|v| v.tanh()),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    pub fn derivative<T: Scalar>(self, z: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => crate::ops::relu_grad(z),
            Activation::Tanh => z.map(|v| T::one() - v.tanh() * v.tanh()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        Self {
            widths,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Short label such as `MLP 3x2000` (or the width list when hidden widths differ).
    pub fn label(&self) -> String {
        let h = self.hidden_widths();
        match h.first() {
            Some(&w) if h.iter().all(|&x| x == w) => format!("MLP {}x{}", h.len(), w),
            _ => format!("MLP {:?}", self.widths),
        }
    }
}

/// One affine map `x · W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            weight: kaiming_init(&[fan_in, fan_out], fan_in, rng)?,
            bias: Tensor::zeros(&[fan_out]),
        })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.fan_in() {
            return Err(Error::dim(format!(
                "input width {} for a layer expecting {}",
                x.cols(),
                self.fan_in()
            )));
        }
        let x2 = if x.rank() == 2 {
            x.matmul(&self.weight)?
        } else {
            x.clone().reshape(vec![x.rows(), x.cols()])?.matmul(&self.weight)?
        };
        let mut z = x2;
        z.add_row_vector(&self.bias)?;
        Ok(z)
    }

    /// Gradients of the weight and bias given the layer input and `dL/dz`.
    pub fn param_grads(&self, x: &Tensor<T>, dz: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((x.matmul_tn(dz)?, dz.sum_rows()))
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    pub spec: MlpSpec,
    pub layers: Vec<Dense<T>>,
}

/// Per-layer pre-activations and activations. The last activation is the
/// logits (no nonlinearity on the output layer).
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub pre: Vec<Tensor<T>>,
    pub act: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.act.last().expect("non-empty trace")
    }
}

/// Kaiming-initialized weights, zero biases.
pub fn build_mlp<T: Scalar>(spec: &MlpSpec, rng: &mut RngState) -> Result<Mlp<T>> {
    spec.validate()?;
    let layers = spec
        .widths
        .windows(2)
        .map(|w| Dense::init(w[0], w[1], rng))
        .collect::<Result<_>>()?;
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

impl<T: Scalar> Mlp<T> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward_collect(&self, inputs: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { inputs } else { &act[l - 1] };
            let z = layer.forward(input)?;
            let a = if l == last {
                z.clone()
            } else {
                self.spec.activation.apply(&z)
            };
            pre.push(z);
            act.push(a);
        }
        Ok(ForwardTrace { pre, act })
    }

    pub fn logits(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = inputs.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if l != last {
                h = self.spec.activation.apply(&h);
            }
        }
        Ok(h)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|d| [&d.weight, &d.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(Dense::cast).collect(),
        }
    }
}

/// Forward FLOPs of a dense stack: `batch · Σ 2·in·out`.
pub fn flops_forward(spec: &MlpSpec, batch: usize) -> u64 {
    let per_sample: u64 = spec
        .widths
        .windows(2)
        .map(|w| 2 * w[0] as u64 * w[1] as u64)
        .sum();
    per_sample * batch as u64
}

/// A stack of convolutional blocks over a fixed input image shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub input: [usize; 3],
    pub blocks: Vec<ConvBlockSpec>,
}

impl CnnSpec {
    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            shape = b.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Forward FLOPs of the convolutions plus an optional linear head per
    /// entry of `heads` (block index → output classes).
    pub fn flops_forward(&self, heads: &[(usize, usize)], batch: usize) -> Result<u64> {
        let mut shape = self.input;
        let mut total = 0u64;
        let mut flat = Vec::new();
        for b in &self.blocks {
            total += b.flops(shape)?;
            shape = b.output_shape(shape)?;
            flat.push(shape.iter().product::<usize>());
        }
        for &(block, classes) in heads {
            total += 2 * flat[block] as u64 * classes as u64;
        }
        Ok(total * batch as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_closed_form() {
        let spec = MlpSpec::new(vec![784, 1000, 1000, 10]);
        assert_eq!(spec.param_count(), 1_796_010);
        let mlp: Mlp<f32> = build_mlp(&spec, &mut RngState::new(0)).unwrap();
        assert_eq!(mlp.param_count(), 1_796_010);
        assert!(mlp.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = MlpSpec::new(vec![5, 4, 3]);
        let a: Mlp<f32> = build_mlp(&spec, &mut RngState::new(11)).unwrap();
        let b: Mlp<f32> = build_mlp(&spec, &mut RngState::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_layer_is_affine() {
        let spec = MlpSpec::new(vec![3, 2]);
        let mlp: Mlp<f64> = build_mlp(&spec, &mut RngState::new(1)).unwrap();
        assert_eq!(mlp.layers.len(), 1);
        let x = Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0., 4.]).unwrap();
        let mut expected = x.matmul(&mlp.layers[0].weight).unwrap();
        expected.add_row_vector(&mlp.layers[0].bias).unwrap();
        let trace = mlp.forward_collect(&x).unwrap();
        assert_eq!(trace.logits(), &expected);
        assert_eq!(trace.act.len(), 1);
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let spec = MlpSpec::new(vec![4, 3, 5]);
        let mut mlp: Mlp<f64> = build_mlp(&spec, &mut RngState::new(1)).unwrap();
        mlp.tensors_mut().into_iter().for_each(|t| t.scale(0.0));
        let x = Tensor::full(&[2, 4], 0.7);
        let p = crate::ops::softmax_rows(&mlp.logits(&x).unwrap());
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn width_mismatch() {
        let mlp: Mlp<f32> = build_mlp(&MlpSpec::new(vec![4, 2]), &mut RngState::new(0)).unwrap();
        assert!(mlp.forward_collect(&Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn flops_closed_form() {
        let spec = MlpSpec::new(vec![3072, 2000, 2000, 2000, 10]);
        assert_eq!(flops_forward(&spec, 1), 28_328_000);
        assert_eq!(flops_forward(&MlpSpec::new(vec![7, 10]), 1), 140);
        assert_eq!(flops_forward(&spec, 2), 2 * 28_328_000);
    }

    #[test]
    fn labels() {
        assert_eq!(MlpSpec::new(vec![784, 1000, 1000, 10]).label(), "MLP 2x1000");
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpSpec::new(vec![5]).validate().is_err());
        assert!(MlpSpec::new(vec![5, 0, 2]).validate().is_err());
    }
}
