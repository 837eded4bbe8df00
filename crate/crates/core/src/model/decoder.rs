//! Convolutional decoder. Stage `s` doubles the resolution, concatenates the
//! matching skip and refines with two 3×3 conv layers.

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tensor};

use super::config::ModelConfig;
use super::layers::{fan_in_uniform, join, ConvBnRelu, Deconv, Module};

#[derive(Debug, Clone)]
pub struct DecoderStage<T: Scalar> {
    pub up: Deconv<T>,
    /// Index into the skip list consumed by this stage.
    pub skip: Option<usize>,
    /// Projects a `[B, D, r, c]` skip to this stage's resolution and width.
    pub skip_chain: Vec<Deconv<T>>,
    pub conv1: ConvBnRelu<T>,
    pub conv2: ConvBnRelu<T>,
}

impl<T: Scalar> DecoderStage<T> {
    fn forward(&self, x: &Tensor<T>, skips: &[Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        let mut up = self.up.forward(x)?;
        if let Some(i) = self.skip {
            let mut s = skips[i].clone();
            for d in &self.skip_chain {
                s = d.forward(&s)?;
            }
            if s.shape()[2..] != up.shape()[2..] || s.shape()[0] != up.shape()[0] {
                return Err(Error::Shape(format!(
                    "upsampled map {:?} does not match skip {:?}",
                    up.shape(),
                    s.shape()
                )));
            }
            up = Tensor::concat(&[up, s], 1)?;
        }
        self.conv2.forward(&self.conv1.forward(&up, mode)?, mode)
    }
}

impl<T: Scalar> Module<T> for DecoderStage<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.up.collect_params(&join(prefix, "up"), out);
        for (j, d) in self.skip_chain.iter().enumerate() {
            d.collect_params(&join(prefix, &format!("skip{j}")), out);
        }
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    pub stages: Vec<DecoderStage<T>>,
    /// 1×1 kernel `[K, c_last, 1, 1]`.
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    pub num_skips: usize,
}

impl<T: Scalar> Decoder<T> {
    /// Deep skips feed the early (coarse) stages: stage `s` takes skip
    /// `L − 1 − s` while `s < L`.
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let l = cfg.skip_layers.len();
        let mut c_prev = d;
        let mut stages = Vec::with_capacity(cfg.decoder_channels.len());
        for (s, &c) in cfg.decoder_channels.iter().enumerate() {
            let up = Deconv::new(c_prev, c, rng);
            let (skip, skip_chain) = if s < l {
                let chain = (0..=s)
                    .map(|j| Deconv::new(if j == 0 { d } else { c }, c, rng))
                    .collect();
                (Some(l - 1 - s), chain)
            } else {
                (None, Vec::new())
            };
            let c_cat = if skip.is_some() { 2 * c } else { c };
            stages.push(DecoderStage {
                up,
                skip,
                skip_chain,
                conv1: ConvBnRelu::new(c_cat, c, rng),
                conv2: ConvBnRelu::new(c, c, rng),
            });
            c_prev = c;
        }
        Decoder {
            stages,
            head_weight: fan_in_uniform(&[cfg.num_classes, c_prev, 1, 1], c_prev, rng),
            head_bias: Tensor::zeros(&[cfg.num_classes]).requires_grad(),
            num_skips: l,
        }
    }

    /// `bottleneck: [B, D, r, c]`, `skips`: `[B, D, r, c]` each, shallow first.
    /// Returns logits `[B, K, r·P, c·P]`.
    pub fn forward(
        &self,
        bottleneck: &Tensor<T>,
        skips: &[Tensor<T>],
        mode: Mode,
    ) -> Result<Tensor<T>> {
        if skips.len() != self.num_skips {
            return Err(Error::Shape(format!(
                "decoder expects {} skip maps, got {}",
                self.num_skips,
                skips.len()
            )));
        }
        let mut x = bottleneck.clone();
        for stage in &self.stages {
            x = stage.forward(&x, skips, mode)?;
        }
        x.conv2d(&self.head_weight, Some(&self.head_bias), 1, 0)
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        for (s, stage) in self.stages.iter().enumerate() {
            stage.collect_params(&join(prefix, &format!("stage{s}")), out);
        }
        out.push(Parameter::trainable(
            join(prefix, "head.weight"),
            &self.head_weight,
        ));
        out.push(Parameter::trainable(
            join(prefix, "head.bias"),
            &self.head_bias,
        ));
    }
}
