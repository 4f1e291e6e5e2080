//! Convolution blocks: conv → activation → optional max-pool.
//!
//! Convolutions are lowered to matrix products through an im2col buffer per
//! sample. Samples are stored flattened channel-major (`c, h, w`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Activation;
use crate::ops::kaiming_init;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Pool {
    #[default]
    None,
    Max {
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub pool: Pool,
    #[serde(default)]
    pub activation: Activation,
}

fn one() -> usize {
    1
}

/// Three blocks of 3×3 convolutions (padding 1, ReLU, 2×2 max-pool) widening
/// 32 → 64 → 128 channels.
pub fn default_cafo_blocks(in_channels: usize) -> Vec<ConvBlockSpec> {
    let block = |i, o| ConvBlockSpec {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
        pool: Pool::Max { size: 2 },
        activation: Activation::Relu,
    };
    vec![block(in_channels, 32), block(32, 64), block(64, 128)]
}

impl ConvBlockSpec {
    pub fn conv_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        if c != self.in_channels {
            return Err(Error::dim(format!(
                "block expects {} channels, input has {c}",
                self.in_channels
            )));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::dim(format!(
                    "kernel {} larger than padded input {padded}",
                    self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok([self.out_channels, span(h)?, span(w)?])
    }

    /// Shape after conv, activation and pooling.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = self.conv_shape(input)?;
        match self.pool {
            Pool::None => Ok([c, h, w]),
            Pool::Max { size } => {
                if size == 0 || h / size == 0 || w / size == 0 {
                    return Err(Error::dim(format!("pool {size} collapses a {h}×{w} map")));
                }
                Ok([c, h / size, w / size])
            }
        }
    }

    pub fn flops(&self, input: [usize; 3]) -> Result<u64> {
        let [o, h, w] = self.conv_shape(input)?;
        let k2 = (self.kernel * self.kernel) as u64;
        Ok(2 * self.in_channels as u64 * k2 * o as u64 * h as u64 * w as u64)
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `[out_channels × in_channels·k·k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn init(spec: &ConvBlockSpec, rng: &mut RngState) -> Result<Self> {
        let fan_in = spec.patch();
        Ok(Self {
            weight: kaiming_init(&[spec.out_channels, fan_in], fan_in, rng)?,
            bias: Tensor::zeros(&[spec.out_channels]),
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Everything a backward or feedback pass needs from a block evaluation.
#[derive(Debug, Clone)]
pub struct ConvForward<T> {
    /// Convolution output before the activation, `[n × out·oh·ow]`.
    pub pre: Tensor<T>,
    /// Block output after activation and pooling.
    pub output: Tensor<T>,
    pub conv_shape: [usize; 3],
    pub output_shape: [usize; 3],
    /// For each pooled element, the flat index of the winning element within its sample.
    pub pool_argmax: Vec<usize>,
}

fn im2col<T: Scalar>(spec: &ConvBlockSpec, sample: &[T], input: [usize; 3], out_hw: (usize, usize), cols: &mut [T]) {
    let [c, h, w] = input;
    let (oh, ow) = out_hw;
    let k = spec.kernel;
    let p = oh * ow;
    let pad = spec.padding as isize;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let y = (oy * spec.stride + ki) as isize - pad;
                    for ox in 0..ow {
                        let x = (ox * spec.stride + kj) as isize - pad;
                        dst[oy * ow + ox] = if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                            sample[(ci * h + y as usize) * w + x as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(spec: &ConvBlockSpec, cols: &[T], input: [usize; 3], out_hw: (usize, usize), dst: &mut [T]) {
    let [c, h, w] = input;
    let (oh, ow) = out_hw;
    let k = spec.kernel;
    let p = oh * ow;
    let pad = spec.padding as isize;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let y = (oy * spec.stride + ki) as isize - pad;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * spec.stride + kj) as isize - pad;
                        if x >= 0 && (x as usize) < w {
                            dst[(ci * h + y as usize) * w + x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(spec: &ConvBlockSpec, inputs: &Tensor<T>, input: [usize; 3]) -> Result<[usize; 3]> {
    let conv_shape = spec.conv_shape(input)?;
    if inputs.cols() != input.iter().product::<usize>() {
        return Err(Error::dim(format!(
            "rows of width {} for an input of shape {input:?}",
            inputs.cols()
        )));
    }
    Ok(conv_shape)
}

pub fn conv_forward<T: Scalar>(
    spec: &ConvBlockSpec,
    params: &ConvParams<T>,
    inputs: &Tensor<T>,
    input: [usize; 3],
) -> Result<ConvForward<T>> {
    let conv_shape = check_input(spec, inputs, input)?;
    let [o, oh, ow] = conv_shape;
    let n = inputs.rows();
    let p = oh * ow;
    let mut cols = Tensor::<T>::zeros(&[spec.patch(), p]);
    let mut pre = Tensor::<T>::zeros(&[n, o * p]);
    for s in 0..n {
        im2col(spec, inputs.row(s), input, (oh, ow), cols.data_mut());
        let z = params.weight.matmul(&cols)?;
        let dst = pre.row_mut(s);
        for (ch, (d, zrow)) in dst.chunks_exact_mut(p).zip(z.data().chunks_exact(p)).enumerate() {
            let b = params.bias.data()[ch];
            d.iter_mut().zip(zrow).for_each(|(d, &v)| *d = v + b);
        }
    }
    let act = spec.activation.apply(&pre);
    let output_shape = spec.output_shape(input)?;
    let (output, pool_argmax) = match spec.pool {
        Pool::None => (act, Vec::new()),
        Pool::Max { size } => maxpool(&act, conv_shape, output_shape, size),
    };
    Ok(ConvForward {
        pre,
        output,
        conv_shape,
        output_shape,
        pool_argmax,
    })
}

fn maxpool<T: Scalar>(act: &Tensor<T>, conv: [usize; 3], out: [usize; 3], size: usize) -> (Tensor<T>, Vec<usize>) {
    let [c, h, w] = conv;
    let [_, ph, pw] = out;
    let n = act.rows();
    let per = c * ph * pw;
    let mut pooled = Tensor::zeros(&[n, per]);
    let mut argmax = Vec::with_capacity(n * per);
    for s in 0..n {
        let src = act.row(s);
        let dst = pooled.row_mut(s);
        for ch in 0..c {
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = (ch * h + py * size) * w + px * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = (ch * h + py * size + dy) * w + px * size + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    dst[(ch * ph + py) * pw + px] = src[best];
                    argmax.push(best);
                }
            }
        }
    }
    (pooled, argmax)
}

/// Routes a gradient w.r.t. the pooled output back onto the activation map.
pub fn maxpool_backward<T: Scalar>(fwd: &ConvForward<T>, d_output: &Tensor<T>) -> Tensor<T> {
    let n = d_output.rows();
    let conv_len: usize = fwd.conv_shape.iter().product();
    if fwd.pool_argmax.is_empty() {
        return d_output.clone();
    }
    let per = d_output.cols();
    let mut d_act = Tensor::zeros(&[n, conv_len]);
    for s in 0..n {
        let src = d_output.row(s);
        let idx = &fwd.pool_argmax[s * per..(s + 1) * per];
        let dst = d_act.row_mut(s);
        for (&i, &g) in idx.iter().zip(src) {
            dst[i] += g;
        }
    }
    d_act
}

/// Weight and bias gradients from the block input and `dL/d(pre)`.
pub fn conv_weight_grad<T: Scalar>(
    spec: &ConvBlockSpec,
    inputs: &Tensor<T>,
    input: [usize; 3],
    d_pre: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [o, oh, ow] = check_input(spec, inputs, input)?;
    let p = oh * ow;
    let mut cols = Tensor::<T>::zeros(&[spec.patch(), p]);
    let mut dw = Tensor::<T>::zeros(&[o, spec.patch()]);
    let mut db = vec![T::zero(); o];
    for s in 0..inputs.rows() {
        im2col(spec, inputs.row(s), input, (oh, ow), cols.data_mut());
        let dz = Tensor::matrix(o, p, d_pre.row(s).to_vec())?;
        dw.add_assign(&dz.matmul_nt(&cols)?)?;
        for (ch, row) in dz.data().chunks_exact(p).enumerate() {
            db[ch] += row.iter().copied().sum::<T>();
        }
    }
    Ok((dw, Tensor::vector(db)))
}

/// Gradient with respect to the block input given `dL/d(pre)`.
pub fn conv_input_grad<T: Scalar>(
    spec: &ConvBlockSpec,
    params: &ConvParams<T>,
    input: [usize; 3],
    d_pre: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [o, oh, ow] = spec.conv_shape(input)?;
    let p = oh * ow;
    let n = d_pre.rows();
    let mut dx = Tensor::<T>::zeros(&[n, input.iter().product()]);
    for s in 0..n {
        let dz = Tensor::matrix(o, p, d_pre.row(s).to_vec())?;
        let dcols = params.weight.matmul_tn(&dz)?;
        col2im_add(spec, dcols.data(), input, (oh, ow), dx.row_mut(s));
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(i: usize, o: usize, k: usize, pad: usize) -> ConvBlockSpec {
        ConvBlockSpec {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: 1,
            padding: pad,
            pool: Pool::None,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn one_by_one_identity_copies_channels() {
        let s = spec(2, 2, 1, 0);
        let params = ConvParams::<f64> {
            weight: Tensor::identity(2),
            bias: Tensor::zeros(&[2]),
        };
        let x = Tensor::matrix(1, 8, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let f = conv_forward(&s, &params, &x, [2, 2, 2]).unwrap();
        assert_eq!(f.output.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_on_constant_image() {
        let s = spec(1, 1, 3, 1);
        let params = ConvParams::<f64> {
            weight: Tensor::full(&[1, 9], 1.0),
            bias: Tensor::zeros(&[1]),
        };
        let c = 0.5;
        let x = Tensor::full(&[1, 25], c);
        let f = conv_forward(&s, &params, &x, [1, 5, 5]).unwrap();
        let out = f.output.row(0);
        for y in 1..4 {
            for xx in 1..4 {
                assert_eq!(out[y * 5 + xx], 9.0 * c);
            }
        }
        assert_eq!(out[0], 4.0 * c);
    }

    #[test]
    fn output_shapes() {
        let blocks = default_cafo_blocks(3);
        let mut shape = [3, 32, 32];
        for b in &blocks {
            shape = b.output_shape(shape).unwrap();
        }
        assert_eq!(shape, [128, 4, 4]);
        assert!(spec(3, 4, 3, 0).output_shape([3, 2, 2]).is_err());
        assert!(spec(3, 4, 3, 0).output_shape([2, 8, 8]).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let mut s = spec(1, 1, 1, 0);
        s.pool = Pool::Max { size: 2 };
        let params = ConvParams::<f64> {
            weight: Tensor::full(&[1, 1], 1.0),
            bias: Tensor::zeros(&[1]),
        };
        let x = Tensor::matrix(1, 4, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let f = conv_forward(&s, &params, &x, [1, 2, 2]).unwrap();
        assert_eq!(f.output.data(), &[0.9]);
        let d = maxpool_backward(&f, &Tensor::matrix(1, 1, vec![2.0]).unwrap());
        assert_eq!(d.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
