//! Everything around the network: synthetic data, dataset files, run
//! configuration, the training loop, checkpoints and the `mapunetr` command
//! line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{NormKind, RunConfig};
pub use error::{HarnessError, Result};
pub use train::{train, EpochLog, TrainOptions, TrainOutcome};
