//! Patch embedding and the transformer encoder.

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::patchwork::{embed_tokens, patchify};
use crate::preprocess::Image;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::layers::{fan_in_uniform, join, LayerNorm, Linear, Module};

/// Post-softmax attention of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    pub layer: usize,
    pub heads: usize,
    pub tokens: usize,
    /// `heads × tokens × tokens`, row-major; row `q` of head `h` is how query
    /// token `q` distributes its attention.
    pub weights: Vec<T>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn new(layer: usize, heads: usize, tokens: usize, weights: Vec<T>) -> Result<Self> {
        if weights.len() != heads * tokens * tokens {
            return Err(Error::Shape(format!(
                "attention record needs {heads}x{tokens}x{tokens} weights, got {}",
                weights.len()
            )));
        }
        Ok(AttentionRecord {
            layer,
            heads,
            tokens,
            weights,
        })
    }

    /// `tokens × tokens` matrix of one head.
    pub fn head(&self, h: usize) -> &[T] {
        let nn = self.tokens * self.tokens;
        &self.weights[h * nn..(h + 1) * nn]
    }

    pub fn row(&self, h: usize, q: usize) -> &[T] {
        let n = self.tokens;
        &self.head(h)[q * n..(q + 1) * n]
    }

    /// Largest `|Σ row − 1|` over all heads and rows.
    pub fn max_row_deviation(&self) -> f64 {
        self.weights
            .chunks_exact(self.tokens.max(1))
            .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Multi-head self-attention. Head `i` owns columns `i·d_k .. (i+1)·d_k` of
/// the query, key and value projections.
#[derive(Debug, Clone)]
pub struct Msa<T: Scalar> {
    pub num_heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Scalar> Msa<T> {
    pub fn new(dim: usize, num_heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(dim, num_heads)?;
        Ok(Msa {
            num_heads,
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
        })
    }

    /// `z: [N, D]` → `([N, D], attention)`. The record's `layer` is left at 0.
    pub fn forward(&self, z: &Tensor<T>) -> Result<(Tensor<T>, AttentionRecord<T>)> {
        if z.ndim() != 2 {
            return Err(Error::Shape(format!(
                "msa expects [N, D], got {:?}",
                z.shape()
            )));
        }
        let (n, d) = (z.shape()[0], z.shape()[1]);
        check_heads(d, self.num_heads)?;
        let dk = d / self.num_heads;
        let q = self.wq.forward(z)?;
        let k = self.wk.forward(z)?;
        let v = self.wv.forward(z)?;
        let scale = T::lit(1.0 / (dk as f64).sqrt());

        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads * n * n);
        for h in 0..self.num_heads {
            let qh = q.narrow(1, h * dk, dk)?;
            let kh = k.narrow(1, h * dk, dk)?;
            let vh = v.narrow(1, h * dk, dk)?;
            let att = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
            weights.extend_from_slice(&att.data());
            heads.push(att.matmul(&vh)?);
        }
        let out = self.wo.forward(&Tensor::concat(&heads, 1)?)?;
        Ok((out, AttentionRecord::new(0, self.num_heads, n, weights)?))
    }
}

impl<T: Scalar> Module<T> for Msa<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.wq.collect_params(&join(prefix, "q"), out);
        self.wk.collect_params(&join(prefix, "k"), out);
        self.wv.collect_params(&join(prefix, "v"), out);
        self.wo.collect_params(&join(prefix, "o"), out);
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embed_dim {dim} is not divisible by num_heads {heads}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }
}

/// Pre-norm block: `z₁ = z + MSA(LN(z))`, `z' = z₁ + MLP(LN(z₁))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: Msa<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: Msa::new(dim, heads, rng)?,
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, hidden, rng),
        })
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<(Tensor<T>, AttentionRecord<T>)> {
        let (a, record) = self.attn.forward(&self.ln1.forward(z)?)?;
        let z1 = z.add(&a)?;
        let z2 = z1.add(&self.mlp.forward(&self.ln2.forward(&z1)?)?)?;
        Ok((z2, record))
    }
}

impl<T: Scalar> Module<T> for TransformerBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.ln1.collect_params(&join(prefix, "ln1"), out);
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.ln2.collect_params(&join(prefix, "ln2"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Scalar> {
    /// Tokens after projection and position embedding, `[N, D]`.
    pub embedded: Tensor<T>,
    /// Output of the last block, `[N, D]`.
    pub bottleneck: Tensor<T>,
    /// Outputs of the tapped blocks, shallow first.
    pub skips: Vec<Tensor<T>>,
    /// One record per block.
    pub records: Vec<AttentionRecord<T>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    /// `[P²C, D]`, no bias.
    pub projection: Tensor<T>,
    /// `[N, D]`.
    pub positions: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub skip_layers: Vec<usize>,
    pub patch_size: usize,
    pub image_size: (usize, usize),
    pub in_channels: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let projection = fan_in_uniform(&[cfg.token_len(), d], cfg.token_len(), rng);
        let positions = Tensor::uniform(&[cfg.num_patches(), d], 0.02, rng).requires_grad();
        let blocks = (0..cfg.depth)
            .map(|_| TransformerBlock::new(d, cfg.num_heads, cfg.mlp_hidden(), rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            projection,
            positions,
            blocks,
            skip_layers: cfg.skip_layers.clone(),
            patch_size: cfg.patch_size,
            image_size: cfg.image_size,
            in_channels: cfg.in_channels,
        })
    }

    pub fn embed(&self, image: &Image<T>) -> Result<Tensor<T>> {
        let (h, w) = self.image_size;
        if (image.height, image.width, image.channels) != (h, w, self.in_channels) {
            return Err(Error::Shape(format!(
                "model expects {h}x{w}x{} images, got {}x{}x{}",
                self.in_channels, image.height, image.width, image.channels
            )));
        }
        let tokens = patchify(image, self.patch_size)?.to_tensor();
        embed_tokens(&tokens, &self.projection, &self.positions)
    }

    pub fn forward(&self, image: &Image<T>) -> Result<EncoderOutput<T>> {
        let embedded = self.embed(image)?;
        self.forward_tokens(embedded)
    }

    /// Runs the block cascade on already embedded tokens.
    pub fn forward_tokens(&self, embedded: Tensor<T>) -> Result<EncoderOutput<T>> {
        let mut z = embedded.clone();
        let mut skips = Vec::with_capacity(self.skip_layers.len());
        let mut records = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, mut record) = block.forward(&z)?;
            record.layer = i;
            records.push(record);
            z = next;
            if self.skip_layers.contains(&i) {
                skips.push(z.clone());
            }
        }
        Ok(EncoderOutput {
            embedded,
            bottleneck: z,
            skips,
            records,
        })
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::trainable(
            join(prefix, "patch_embed"),
            &self.projection,
        ));
        out.push(Parameter::trainable(
            join(prefix, "pos_embed"),
            &self.positions,
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("block{i}")), out);
        }
    }
}

/// `[N, D]` tokens → `[D, rows, cols]` map; token `t` lands at
/// `(t / cols, t % cols)`.
pub fn tokens_to_grid<T: Scalar>(
    tokens: &Tensor<T>,
    rows: usize,
    cols: usize,
) -> Result<Tensor<T>> {
    if tokens.ndim() != 2 || tokens.shape()[0] != rows * cols {
        return Err(Error::Shape(format!(
            "{:?} tokens cannot fill a {rows}x{cols} grid",
            tokens.shape()
        )));
    }
    let d = tokens.shape()[1];
    tokens.transpose()?.reshape(&[d, rows, cols])
}
