use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mapunetr_core::metrics::dice_loss;
use mapunetr_core::optim::zero_grads;
use mapunetr_core::preprocess::{augment, resize_sample, NormStats};
use mapunetr_core::rng::{state_bytes, stream, Purpose, Rng};
use mapunetr_core::{no_grad, MapUNetR, Mask, Mode, Sample, Scalar, Sgd, Tensor};
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::{NormKind, RunConfig};
use crate::error::{io_err, HarnessError, Result};

pub const LOG_HEADER: &str = "epoch,accuracy,dice_coef,loss,lr,val_acc,val_dice_coef,val_loss";
pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.json";

/// One row of `log.csv`. `dice_coef` is the soft dice `1 − loss`; the
/// validation columns are NaN when the validation split is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub accuracy: f64,
    pub dice_coef: f64,
    pub loss: f64,
    pub lr: f64,
    pub val_acc: f64,
    pub val_dice_coef: f64,
    pub val_loss: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.accuracy,
            self.dice_coef,
            self.loss,
            self.lr,
            self.val_acc,
            self.val_dice_coef,
            self.val_loss
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Where `log.csv`, `config.json` and the checkpoints go; nothing is
    /// written when `None`.
    pub out_dir: Option<PathBuf>,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: MapUNetR<T>,
    /// The configuration with any data-derived statistics filled in.
    pub config: RunConfig,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Prepared (resized, normalized) samples of each split.
    pub train_set: Vec<Sample<T>>,
    pub val_set: Vec<Sample<T>>,
    pub rng_state: Vec<u8>,
}

/// Deterministic `(train, val)` index split by seeded shuffle. At least one
/// sample always stays in the training split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Purpose::Split));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Brings samples to the configured extents. Only square targets can be
/// resized.
pub fn fit_extents<T: Scalar>(samples: &[Sample<T>], cfg: &RunConfig) -> Result<Vec<Sample<T>>> {
    let (h, w) = cfg.model.image_size;
    samples
        .iter()
        .map(|s| {
            if s.image.channels != cfg.model.in_channels {
                return Err(HarnessError::Config(format!(
                    "sample {} has {} channels, model expects {}",
                    s.id, s.image.channels, cfg.model.in_channels
                )));
            }
            if (s.image.height, s.image.width) == (h, w) {
                return Ok(s.clone());
            }
            if h != w {
                return Err(HarnessError::Config(format!(
                    "sample {} is {}x{}; only square model extents can be resized to",
                    s.id, s.image.height, s.image.width
                )));
            }
            Ok(resize_sample(s, h)?)
        })
        .collect()
}

/// Resize and normalize with the configuration's (already resolved) statistics.
pub fn prepare<T: Scalar>(samples: &[Sample<T>], cfg: &RunConfig) -> Result<Vec<Sample<T>>> {
    let norm = cfg.normalization()?;
    fit_extents(samples, cfg)?
        .into_iter()
        .map(|s| {
            let image = norm.apply(&s.image)?;
            Ok(Sample::new(image, s.mask, s.id)?)
        })
        .collect()
}

#[derive(Default)]
struct Running {
    loss: f64,
    acc: f64,
    count: usize,
}

impl Running {
    fn add(&mut self, loss: f64, acc: f64, n: usize) {
        self.loss += loss * n as f64;
        self.acc += acc * n as f64;
        self.count += n;
    }

    fn means(&self) -> (f64, f64) {
        if self.count == 0 {
            return (f64::NAN, f64::NAN);
        }
        let n = self.count as f64;
        (self.loss / n, self.acc / n)
    }
}

/// Mean per-sample fraction of pixels whose argmax matches the mask.
fn pixel_accuracy<T: Scalar>(probs: &Tensor<T>, masks: &[&Mask]) -> f64 {
    let shape = probs.shape();
    let (k, hw) = (shape[1], shape[2] * shape[3]);
    let p = probs.data();
    let mut total = 0.0;
    for (b, m) in masks.iter().enumerate() {
        let base = b * k * hw;
        let hits = (0..hw)
            .filter(|&i| {
                let mut best = 0;
                for c in 1..k {
                    if p[base + c * hw + i] > p[base + best * hw + i] {
                        best = c;
                    }
                }
                best == m.data[i] as usize
            })
            .count();
        total += hits as f64 / hw as f64;
    }
    total / masks.len() as f64
}

fn run_batch<T: Scalar>(
    model: &MapUNetR<T>,
    batch: &[&Sample<T>],
    mode: Mode,
    smooth: f64,
) -> Result<(Tensor<T>, f64)> {
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let masks: Vec<&Mask> = batch.iter().map(|s| &s.mask).collect();
    let out = model.forward_batch(&images, mode)?;
    let loss = dice_loss(&out.probs, &masks, smooth)?;
    Ok((loss, pixel_accuracy(&out.probs, &masks)))
}

fn evaluate_split<T: Scalar>(
    model: &MapUNetR<T>,
    set: &[Sample<T>],
    batch: usize,
    smooth: f64,
) -> Result<(f64, f64)> {
    let mut acc = Running::default();
    no_grad(|| -> Result<()> {
        for chunk in set.chunks(batch) {
            let refs: Vec<&Sample<T>> = chunk.iter().collect();
            let (loss, a) = run_batch(model, &refs, Mode::Infer, smooth)?;
            acc.add(loss.item()?.as_f64(), a, chunk.len());
        }
        Ok(())
    })?;
    Ok(acc.means())
}

fn write_log(dir: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for row in logs {
        let _ = writeln!(text, "{}", row.csv_row());
    }
    let path = dir.join(LOG_FILE);
    fs::write(&path, text).map_err(io_err(path))
}

/// Trains from scratch. `samples` hold raw images in `[0, 1]`; they are
/// split, resized and normalized here. `on_epoch` sees every log row as it
/// is produced.
pub fn train<T: Scalar>(
    config: &RunConfig,
    samples: &[Sample<T>],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let schedule = &config.schedule;
    if samples.len() < schedule.batch_size {
        return Err(HarnessError::Config(format!(
            "dataset has {} samples, fewer than one batch of {}",
            samples.len(),
            schedule.batch_size
        )));
    }
    for s in samples {
        s.validate_labels(config.model.num_classes)?;
    }

    let (train_idx, val_idx) = split_indices(samples.len(), config.val_fraction, opts.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (raw_train, raw_val) = (pick(&train_idx), pick(&val_idx));

    let mut config = config.clone();
    if config.normalization == NormKind::ZScore && config.norm_stats.is_none() {
        let sized = fit_extents(&raw_train, &config)?;
        let images: Vec<_> = sized.iter().map(|s| &s.image).collect();
        config.norm_stats = Some(NormStats::from_images(&images)?);
    }
    let train_set = prepare(&raw_train, &config)?;
    let val_set = prepare(&raw_val, &config)?;

    let model = MapUNetR::<T>::new(config.model.clone(), opts.seed)?;
    let params = model.trainable_parameters();
    let mut sgd = Sgd::<T>::new(schedule.momentum)?;
    let mut shuffle_rng: Rng = stream(opts.seed, Purpose::Shuffle);
    let mut aug_rng: Rng = stream(opts.seed, Purpose::Augment);

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, config.to_json()).map_err(io_err(path))?;
    }

    let mut logs = Vec::with_capacity(schedule.epochs);
    let mut best = (f64::NEG_INFINITY, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut running = Running::default();
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<Sample<T>> = if config.augment.transforms.is_empty() {
                chunk.iter().map(|&i| train_set[i].clone()).collect()
            } else {
                chunk
                    .iter()
                    .map(|&i| augment(&train_set[i], &config.augment, &mut aug_rng))
                    .collect::<mapunetr_core::Result<_>>()?
            };
            let refs: Vec<&Sample<T>> = batch.iter().collect();
            zero_grads(&params);
            let (loss, acc) = run_batch(&model, &refs, Mode::Train, config.dice_smooth)?;
            loss.backward()?;
            sgd.step(&params, lr)?;
            running.add(loss.item()?.as_f64(), acc, chunk.len());
        }
        let (loss, accuracy) = running.means();
        let (val_loss, val_acc) =
            evaluate_split(&model, &val_set, schedule.batch_size, config.dice_smooth)?;
        let row = EpochLog {
            epoch,
            accuracy,
            dice_coef: 1.0 - loss,
            loss,
            lr,
            val_acc,
            val_dice_coef: 1.0 - val_loss,
            val_loss,
        };
        on_epoch(&row);
        logs.push(row);

        let score = if val_set.is_empty() {
            row.dice_coef
        } else {
            row.val_dice_coef
        };
        if let Some(dir) = &opts.out_dir {
            if score > best.0 {
                Checkpoint::from_model(
                    &model,
                    &config,
                    epoch as u32 + 1,
                    state_bytes(&shuffle_rng),
                )
                .save(&dir.join(BEST_CKPT))?;
            }
            write_log(dir, &logs)?;
        }
        if score > best.0 {
            best = (score, epoch);
        }
    }

    let rng_state = state_bytes(&shuffle_rng);
    if let Some(dir) = &opts.out_dir {
        Checkpoint::from_model(&model, &config, schedule.epochs as u32, rng_state.clone())
            .save(&dir.join(FINAL_CKPT))?;
        write_log(dir, &logs)?;
    }
    Ok(TrainOutcome {
        model,
        config,
        logs,
        best_epoch: best.1,
        train_set,
        val_set,
        rng_state,
    })
}
