//! The segmentation network: transformer encoder over image patches and a
//! convolutional decoder fed by skip taps.

mod config;
mod decoder;
mod encoder;
mod layers;

pub use config::ModelConfig;
pub use decoder::{Decoder, DecoderStage};
pub use encoder::{
    tokens_to_grid, AttentionRecord, Encoder, EncoderOutput, Mlp, Msa, TransformerBlock,
};
pub use layers::{ConvBnRelu, Deconv, LayerNorm, Linear, Module};

use crate::error::{Error, Result};
use crate::optim::{check_unique_names, count_params, ParamCount, Parameter};
use crate::preprocess::{Image, Mask};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tensor};

/// Result of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    /// `[B, K, H, W]` raw scores.
    pub logits: Tensor<T>,
    /// `[B, K, H, W]`, softmax over the class axis.
    pub probs: Tensor<T>,
    /// Per sample, one record per encoder block.
    pub records: Vec<Vec<AttentionRecord<T>>>,
}

/// Bottleneck maps, skip maps per skip layer, attention records per image.
type EncodedBatch<T> = (Tensor<T>, Vec<Tensor<T>>, Vec<Vec<AttentionRecord<T>>>);

#[derive(Debug, Clone)]
pub struct MapUNetR<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> MapUNetR<T> {
    /// Builds a freshly initialized model; all weights come from the `Init`
    /// stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init);
        let encoder = Encoder::new(&config, &mut rng)?;
        let decoder = Decoder::new(&config, &mut rng);
        let model = MapUNetR {
            config,
            encoder,
            decoder,
        };
        check_unique_names(&model.parameters())?;
        Ok(model)
    }

    /// All tensors in a stable order. Batch-norm running statistics are
    /// reported as non-trainable.
    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        self.encoder.collect_params("encoder", &mut out);
        self.decoder.collect_params("decoder", &mut out);
        out
    }

    pub fn trainable_parameters(&self) -> Vec<Parameter<T>> {
        self.parameters()
            .into_iter()
            .filter(|p| p.trainable)
            .collect()
    }

    pub fn param_count(&self) -> ParamCount {
        count_params(&self.parameters())
    }

    /// Encoder outputs reshaped into decoder feature maps, stacked over the batch.
    fn encode_batch(&self, images: &[&Image<T>]) -> Result<EncodedBatch<T>> {
        if images.is_empty() {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        let (rows, cols) = self.config.grid();
        let n_skips = self.config.skip_layers.len();
        let mut bottlenecks = Vec::with_capacity(images.len());
        let mut skips: Vec<Vec<Tensor<T>>> = vec![Vec::with_capacity(images.len()); n_skips];
        let mut records = Vec::with_capacity(images.len());
        for img in images {
            let out = self.encoder.forward(img)?;
            bottlenecks.push(tokens_to_grid(&out.bottleneck, rows, cols)?);
            for (slot, s) in skips.iter_mut().zip(&out.skips) {
                slot.push(tokens_to_grid(s, rows, cols)?);
            }
            records.push(out.records);
        }
        let skips = skips
            .iter()
            .map(|s| Tensor::stack(s))
            .collect::<Result<_>>()?;
        Ok((Tensor::stack(&bottlenecks)?, skips, records))
    }

    pub fn forward_batch(&self, images: &[&Image<T>], mode: Mode) -> Result<ForwardOutput<T>> {
        let (bottleneck, skips, records) = self.encode_batch(images)?;
        let logits = self.decoder.forward(&bottleneck, &skips, mode)?;
        let probs = logits.softmax(1)?;
        Ok(ForwardOutput {
            logits,
            probs,
            records,
        })
    }

    /// Single image: `([K, H, W] probabilities, attention records)`.
    pub fn forward(
        &self,
        image: &Image<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<AttentionRecord<T>>)> {
        let mut out = self.forward_batch(&[image], mode)?;
        Ok((out.probs.select(0)?, out.records.remove(0)))
    }
}

/// Per-pixel argmax of `[K, H, W]` probabilities; ties go to the lower class.
pub fn predict_mask<T: Scalar>(probs: &Tensor<T>) -> Result<Mask> {
    if probs.ndim() != 3 {
        return Err(Error::Shape(format!(
            "predict_mask expects [K, H, W], got {:?}",
            probs.shape()
        )));
    }
    let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    if k == 0 || k > 256 {
        return Err(Error::Shape(format!("cannot label {k} classes with u8")));
    }
    let p = probs.data();
    let hw = h * w;
    let labels = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if p[c * hw + i] > p[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, labels)
}

/// [`predict_mask`] over a `[B, K, H, W]` batch.
pub fn predict_masks<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<Mask>> {
    if probs.ndim() != 4 {
        return Err(Error::Shape(format!(
            "predict_masks expects [B, K, H, W], got {:?}",
            probs.shape()
        )));
    }
    (0..probs.shape()[0])
        .map(|b| predict_mask(&probs.select(b)?))
        .collect()
}

/// `[K, H, W]` one-hot encoding of a mask.
pub fn one_hot<T: Scalar>(mask: &Mask, num_classes: usize) -> Result<Tensor<T>> {
    let hw = mask.height * mask.width;
    let mut data = vec![T::zero(); num_classes * hw];
    for (i, &l) in mask.data.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Bounds(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        data[l * hw + i] = T::one();
    }
    Tensor::from_vec(&[num_classes, mask.height, mask.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_ties() {
        let p = Tensor::<f64>::from_f64(&[2, 1, 2], &[0.7, 0.5, 0.3, 0.5]).unwrap();
        assert_eq!(predict_mask(&p).unwrap().data, vec![0, 0]);
    }

    #[test]
    fn one_hot_roundtrip() {
        let m = Mask::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let p = one_hot::<f32>(&m, 3).unwrap();
        assert_eq!(predict_mask(&p).unwrap(), m);
        assert!(one_hot::<f32>(&m, 2).is_err());
    }

    #[test]
    fn tiny_forward_shapes() {
        let model = MapUNetR::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        let img = Image::filled(32, 32, 3, 0.5);
        let (probs, records) = model.forward(&img, Mode::Infer).unwrap();
        assert_eq!(probs.shape(), &[2, 32, 32]);
        assert_eq!(records.len(), 2);
        let p = probs.to_vec();
        for i in 0..32 * 32 {
            assert!((p[i] + p[1024 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_names_unique_and_counted() {
        let model = MapUNetR::<f32>::new(ModelConfig::default(), 1).unwrap();
        let params = model.parameters();
        check_unique_names(&params).unwrap();
        let count = model.param_count();
        assert_eq!(count.total, count.trainable + count.non_trainable);
        // two running-stat vectors per decoder conv layer: 2 * (64 + 64 + 32 + 32 + 16 + 16)
        assert_eq!(count.non_trainable, 448);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let model = MapUNetR::<f64>::new(ModelConfig::tiny(), 2).unwrap();
        model.decoder.head_weight.data_mut().fill(0.0);
        let img = Image::filled(32, 32, 3, 0.2);
        let out = model.forward_batch(&[&img], Mode::Infer).unwrap();
        assert!(out.logits.to_vec().iter().all(|&v| v == 0.0));
    }
}
