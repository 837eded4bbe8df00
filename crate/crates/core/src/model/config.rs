use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    /// Encoder block indices whose outputs feed the decoder, shallow first.
    pub skip_layers: Vec<usize>,
    /// Output channels of each decoder stage. Every stage doubles the
    /// resolution, so `2^len == patch_size`.
    pub decoder_channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    /// Toy configuration that trains on a CPU in minutes.
    fn default() -> Self {
        ModelConfig {
            image_size: (64, 64),
            in_channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            depth: 6,
            mlp_ratio: 4.0,
            skip_layers: vec![1, 3, 5],
            decoder_channels: vec![64, 32, 16],
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by the gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: (32, 32),
            in_channels: 3,
            patch_size: 8,
            embed_dim: 16,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 4.0,
            skip_layers: vec![0, 1],
            decoder_channels: vec![8, 8, 4],
            num_classes: 2,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size,
            self.image_size.1 / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let (h, w) = self.image_size;
        let p = self.patch_size;
        if h == 0 || w == 0 || self.in_channels == 0 {
            return cfg(format!(
                "image extents must be positive, got {h}x{w}x{}",
                self.in_channels
            ));
        }
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Divisibility {
                height: h,
                width: w,
                patch: p,
            });
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return cfg(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 {
            return cfg("depth must be >= 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return cfg(format!(
                "mlp_ratio {} gives an empty hidden layer",
                self.mlp_ratio
            ));
        }
        if self.skip_layers.windows(2).any(|w| w[0] >= w[1]) {
            return cfg(format!(
                "skip_layers {:?} must be strictly increasing",
                self.skip_layers
            ));
        }
        if let Some(&last) = self.skip_layers.last() {
            if last >= self.depth {
                return cfg(format!(
                    "skip layer {last} out of range for depth {}",
                    self.depth
                ));
            }
        }
        let stages = self.decoder_channels.len();
        if stages == 0 || self.decoder_channels.contains(&0) {
            return cfg(format!(
                "decoder_channels {:?} must be non-empty and positive",
                self.decoder_channels
            ));
        }
        if stages >= usize::BITS as usize || 1usize << stages != p {
            return cfg(format!(
                "{stages} decoder stages upsample by {}, but patch_size is {p}",
                1u128 << stages.min(127)
            ));
        }
        if self.skip_layers.len() > stages {
            return cfg(format!(
                "{} skip layers but only {stages} decoder stages",
                self.skip_layers.len()
            ));
        }
        if !(2..=256).contains(&self.num_classes) {
            return cfg(format!(
                "num_classes must be in [2, 256], got {}",
                self.num_classes
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().num_patches(), 64);
        assert_eq!(ModelConfig::default().head_dim(), 16);
    }

    #[test]
    fn rejects_bad_heads() {
        let c = ModelConfig {
            num_heads: 5,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("64") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn rejects_unordered_or_deep_skips() {
        let c = ModelConfig {
            skip_layers: vec![3, 1],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            skip_layers: vec![1, 6],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_indivisible_image() {
        let c = ModelConfig {
            image_size: (60, 64),
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn rejects_stage_count_mismatch() {
        let c = ModelConfig {
            decoder_channels: vec![8, 8],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
