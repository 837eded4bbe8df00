//! Run configuration: the model and schedule fields at the top level of one
//! JSON object, plus data-handling options.

use std::fs;
use std::path::Path;

use mapunetr_core::preprocess::{AugmentConfig, NormStats};
use mapunetr_core::{ModelConfig, Normalization, ScheduleConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    #[default]
    MinMax,
    ZScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub schedule: ScheduleConfig,
    pub normalization: NormKind,
    /// Filled in from the training split when `normalization` is `zscore`.
    pub norm_stats: Option<NormStats>,
    pub augment: AugmentConfig,
    pub val_fraction: f64,
    pub dice_smooth: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            normalization: NormKind::default(),
            norm_stats: None,
            augment: AugmentConfig::default(),
            val_fraction: 0.2,
            dice_smooth: mapunetr_core::metrics::DEFAULT_SMOOTH,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(HarnessError::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(HarnessError::Config(format!(
                "dice_smooth must be > 0, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }

    /// The normalization to apply, once statistics are known.
    pub fn normalization(&self) -> Result<Normalization> {
        Ok(match self.normalization {
            NormKind::None => Normalization::None,
            NormKind::MinMax => Normalization::MinMax,
            NormKind::ZScore => Normalization::ZScore {
                stats: self.norm_stats.clone().ok_or_else(|| {
                    HarnessError::Config("zscore normalization without statistics".into())
                })?,
            },
        })
    }
}
