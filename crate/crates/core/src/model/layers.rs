//! Parameterized building blocks.
//!
//! Weights are drawn from uniform(−1/√fan_in, +1/√fan_in); biases start at zero.

use crate::error::Result;
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormState, Mode, Tensor};

pub(crate) fn fan_in_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut Rng,
) -> Tensor<T> {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng).requires_grad()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning parameters.
pub trait Module<T: Scalar> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>);

    fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }
}

/// `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: fan_in_uniform(&[d_in, d_out], d_in, rng),
            bias: Tensor::zeros(&[d_out]).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::trainable(join(prefix, "weight"), &self.weight));
        out.push(Parameter::trainable(join(prefix, "bias"), &self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[dim]).requires_grad(),
            beta: Tensor::zeros(&[dim]).requires_grad(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::trainable(join(prefix, "gamma"), &self.gamma));
        out.push(Parameter::trainable(join(prefix, "beta"), &self.beta));
    }
}

impl<T: Scalar> Module<T> for BatchNormState<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::trainable(join(prefix, "gamma"), &self.gamma));
        out.push(Parameter::trainable(join(prefix, "beta"), &self.beta));
        out.push(Parameter::frozen(
            join(prefix, "running_mean"),
            &self.running_mean,
        ));
        out.push(Parameter::frozen(
            join(prefix, "running_var"),
            &self.running_var,
        ));
    }
}

/// 3×3 convolution (no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T: Scalar> {
    pub weight: Tensor<T>,
    pub bn: BatchNormState<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        ConvBnRelu {
            weight: fan_in_uniform(&[c_out, c_in, 3, 3], c_in * 9, rng),
            bn: BatchNormState::new(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(x.conv2d(&self.weight, None, 1, 1)?
            .batch_norm(&self.bn, mode)?
            .relu())
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::trainable(join(prefix, "weight"), &self.weight));
        self.bn.collect_params(&join(prefix, "bn"), out);
    }
}

/// 2×2 stride-2 transposed convolution with bias; doubles both extents.
#[derive(Debug, Clone)]
pub struct Deconv<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Deconv<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        // With kernel == stride every output cell sums exactly c_in terms.
        Deconv {
            weight: fan_in_uniform(&[c_in, c_out, 2, 2], c_in, rng),
            bias: Tensor::zeros(&[c_out]).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv_transpose2d(&self.weight, Some(&self.bias), 2)
    }
}

impl<T: Scalar> Module<T> for Deconv<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::trainable(join(prefix, "weight"), &self.weight));
        out.push(Parameter::trainable(join(prefix, "bias"), &self.bias));
    }
}
