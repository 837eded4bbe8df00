//! Core of the MAPUNetR segmentation pipeline: a small reverse-mode autodiff
//! tensor engine, image preprocessing and augmentation, patch tokenization,
//! the ViT-encoder / U-Net-decoder model, segmentation metrics and
//! attention-map saliency.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices.

pub mod attnmap;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod patchwork;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use attnmap::{MapSource, Method, Reduction, SaliencyMap};
pub use error::{Error, Result};
pub use metrics::{dice_loss, evaluate, ConfusionCounts, MetricsReport};
pub use model::{predict_mask, AttentionRecord, MapUNetR, ModelConfig};
pub use optim::{count_params, ParamCount, Parameter, ScheduleConfig, Sgd};
pub use patchwork::{patchify, unpatchify, PatchSequence};
pub use preprocess::{Image, Mask, Normalization, Sample};
pub use scalar::{DType, Scalar};
pub use tensor::{no_grad, BatchNormState, Mode, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = MapUNetR<f32>;
pub type Model64 = MapUNetR<f64>;
