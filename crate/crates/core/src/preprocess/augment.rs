use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{crop_center, flip, grid_distortion, rot90, FlipAxis, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    CenterCrop,
    /// Quarter turns drawn uniformly from {0, 1, 2, 3}.
    RandomRot90,
    /// A fixed number of quarter turns.
    Rot90(u8),
    GridDistortion,
    FlipH,
    FlipV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub transform: Transform,
    pub probability: f64,
}

impl TransformSpec {
    pub fn always(transform: Transform) -> Self {
        TransformSpec {
            transform,
            probability: 1.0,
        }
    }
}

/// Ordered augmentation pipeline. Each transform fires independently with
/// its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub transforms: Vec<TransformSpec>,
    /// Side of the square center crop.
    pub crop_size: usize,
    pub grid_cells: usize,
    pub grid_magnitude: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            transforms: Vec::new(),
            crop_size: 128,
            grid_cells: 4,
            grid_magnitude: 0.3,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for t in &self.transforms {
            if !(0.0..=1.0).contains(&t.probability) {
                return Err(Error::Config(format!(
                    "probability of {:?} must be in [0, 1], got {}",
                    t.transform, t.probability
                )));
            }
        }
        if self.grid_cells == 0 {
            return Err(Error::Config("grid_cells must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.grid_magnitude) {
            return Err(Error::Config(format!(
                "grid_magnitude must be in [0, 1), got {}",
                self.grid_magnitude
            )));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Applies the pipeline in order. Every transform consumes the same number
/// of draws whether or not it fires, so outcomes depend only on the rng state
/// and the configuration.
pub fn augment<T: Scalar>(s: &Sample<T>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Sample<T>> {
    cfg.validate()?;
    let mut out = s.clone();
    for spec in &cfg.transforms {
        let fire = rng.random::<f64>() < spec.probability;
        let k: u8 = rng.random_range(0..4);
        let sub_seed: u64 = rng.random();
        if !fire {
            continue;
        }
        out = match spec.transform {
            Transform::CenterCrop => crop_center(&out, cfg.crop_size, cfg.crop_size)?,
            Transform::RandomRot90 => rot90(&out, k),
            Transform::Rot90(k) => rot90(&out, k),
            Transform::GridDistortion => {
                grid_distortion(&out, cfg.grid_cells, cfg.grid_magnitude, sub_seed)?
            }
            Transform::FlipH => flip(&out, FlipAxis::Horizontal),
            Transform::FlipV => flip(&out, FlipAxis::Vertical),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{Image, Mask};
    use crate::rng::{stream, Purpose};

    fn sample() -> Sample<f64> {
        let img: Vec<f64> = (0..36).map(|i| i as f64 / 35.0).collect();
        let mask: Vec<u8> = (0..36).map(|i| u8::from(i % 5 == 0)).collect();
        Sample::new(
            Image::new(6, 6, 1, img).unwrap(),
            Mask::new(6, 6, mask).unwrap(),
            "a",
        )
        .unwrap()
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let s = sample();
        let mut rng = stream(1, Purpose::Augment);
        assert_eq!(augment(&s, &AugmentConfig::default(), &mut rng).unwrap(), s);
    }

    #[test]
    fn fixed_pipeline_matches_manual_composition() {
        let s = sample();
        let cfg = AugmentConfig {
            transforms: vec![
                TransformSpec::always(Transform::Rot90(1)),
                TransformSpec::always(Transform::FlipH),
            ],
            ..Default::default()
        };
        let mut rng = stream(1, Purpose::Augment);
        let got = augment(&s, &cfg, &mut rng).unwrap();
        let manual = flip(&rot90(&s, 1), FlipAxis::Horizontal);
        assert_eq!(got, manual);
    }

    #[test]
    fn zero_probability_never_fires() {
        let s = sample();
        let cfg = AugmentConfig {
            transforms: vec![TransformSpec {
                transform: Transform::FlipV,
                probability: 0.0,
            }],
            ..Default::default()
        };
        let mut rng = stream(3, Purpose::Augment);
        for _ in 0..10 {
            assert_eq!(augment(&s, &cfg, &mut rng).unwrap(), s);
        }
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let cfg = AugmentConfig {
            transforms: vec![TransformSpec {
                transform: Transform::FlipV,
                probability: 1.5,
            }],
            ..Default::default()
        };
        let mut rng = stream(3, Purpose::Augment);
        assert!(augment(&sample(), &cfg, &mut rng).is_err());
    }
}
