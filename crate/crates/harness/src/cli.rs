use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mapunetr_core::attnmap::{self, MapSource, Method, Reduction};
use mapunetr_core::metrics::evaluate;
use mapunetr_core::model::AttentionRecord;
use mapunetr_core::{no_grad, predict_mask, MapUNetR, Mode, Sample};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, load_images, save_dataset, write_image, write_mask};
use crate::error::{io_err, HarnessError, Result};
use crate::synth::synth_dataset;
use crate::train::{fit_extents, prepare, train, TrainOptions};

/// Scalar type used by the command line.
type F = f32;

pub const THREADS_ENV: &str = "MAPUNETR_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "mapunetr",
    version,
    about = "Transformer-encoder U-Net segmentation on CPU"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of bright shapes on a dark background.
    Synth(SynthArgs),
    /// Train a model and write log.csv plus checkpoints.
    Train(TrainArgs),
    /// Report segmentation metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted masks.
    Infer(InferArgs),
    /// Write attention heat maps and overlays.
    Attn(AttnArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Single worker thread.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Single,
    Rollout,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder block to visualize; required with `--method single`.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum, default_value_t = MethodArg::Single)]
    pub method: MethodArg,
    /// Use the attention emitted by this query token instead of the
    /// attention each token receives.
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub deterministic: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(HarnessError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// One worker in deterministic mode, otherwise `MAPUNETR_THREADS` if set.
fn configure_threads(deterministic: bool) -> Result<()> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| {
                        HarnessError::Config(format!(
                            "{THREADS_ENV} must be a positive integer, got {v:?}"
                        ))
                    })?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        // A pool that already exists (e.g. a second call in-process) is kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Attn(a) => cmd_attn(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let samples = synth_dataset::<F>(a.n, a.size, a.seed)?;
    save_dataset(&samples, 2, &a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    configure_threads(a.deterministic)?;
    let mut config = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let (samples, meta) = load_dataset::<F>(&a.data)?;
    if meta.num_classes != config.model.num_classes {
        if a.config.is_some() {
            return Err(HarnessError::Config(format!(
                "config has {} classes, dataset has {}",
                config.model.num_classes, meta.num_classes
            )));
        }
        config.model.num_classes = meta.num_classes;
    }
    let opts = TrainOptions {
        seed: a.seed,
        out_dir: Some(a.out.clone()),
    };
    let outcome = train(&config, &samples, &opts, |row| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  dice {:.5}  acc {:.5}  val_dice {:.5}  lr {}",
            row.epoch, row.loss, row.dice_coef, row.accuracy, row.val_dice_coef, row.lr
        );
    })?;
    println!(
        "trained {} epochs on {} samples ({} validation); best epoch {}; output in {}",
        outcome.logs.len(),
        outcome.train_set.len(),
        outcome.val_set.len(),
        outcome.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(MapUNetR<F>, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.to_model::<F>()?, ckpt.config))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    configure_threads(a.deterministic)?;
    let (model, config) = load_model(&a.ckpt)?;
    let (samples, _) = load_dataset::<F>(&a.data)?;
    let samples = prepare(&samples, &config)?;
    let r = evaluate(&model, &samples)?;
    println!("{:<10} value", "metric");
    for (name, v) in [
        ("dsc", r.dsc),
        ("iou", r.iou),
        ("accuracy", r.accuracy),
        ("precision", r.precision),
        ("recall", r.recall),
    ] {
        println!("{name:<10} {v:.6}");
    }
    println!(
        "metrics samples={} dsc={} iou={} accuracy={} precision={} recall={}",
        samples.len(),
        r.dsc,
        r.iou,
        r.accuracy,
        r.precision,
        r.recall
    );
    Ok(())
}

/// Images of `dir` resized and normalized for `config`, paired with the
/// resized but unnormalized originals.
fn load_for_model(dir: &Path, config: &RunConfig) -> Result<Vec<(Sample<F>, Sample<F>)>> {
    let (h, w) = config.model.image_size;
    let raw: Vec<Sample<F>> = load_images::<F>(dir)?
        .into_iter()
        .map(|(id, img)| {
            let mask = mapunetr_core::Mask::filled(img.height, img.width, 0);
            Ok(Sample::new(img, mask, id)?)
        })
        .collect::<Result<_>>()?;
    let sized = fit_extents(&raw, config)?;
    let ready = prepare(&sized, config)?;
    debug_assert!(ready
        .iter()
        .all(|s| (s.image.height, s.image.width) == (h, w)));
    Ok(sized.into_iter().zip(ready).collect())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    configure_threads(a.deterministic)?;
    let (model, config) = load_model(&a.ckpt)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let pairs = load_for_model(&a.data, &config)?;
    for (_, s) in &pairs {
        let (probs, _) = no_grad(|| model.forward(&s.image, Mode::Infer))?;
        write_mask(
            &a.out.join(format!("pred_{}.pgm", s.id)),
            &predict_mask(&probs)?,
        )?;
    }
    println!("wrote {} masks to {}", pairs.len(), a.out.display());
    Ok(())
}

fn cmd_attn(a: &AttnArgs) -> Result<()> {
    configure_threads(a.deterministic)?;
    let (model, config) = load_model(&a.ckpt)?;
    let depth = config.model.depth;
    let method = match (a.method, a.layer) {
        (MethodArg::Single, None) => {
            return Err(HarnessError::Usage(format!(
                "--method single needs --layer (valid layers are 0..={})",
                depth - 1
            )))
        }
        (MethodArg::Single, Some(l)) if l >= depth => {
            return Err(HarnessError::Usage(format!(
                "--layer {l} is out of range: valid layers are 0..={}",
                depth - 1
            )))
        }
        (MethodArg::Single, Some(layer)) => Method::SingleLayer { layer },
        (MethodArg::Rollout, _) => Method::Rollout,
    };
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(HarnessError::Usage(format!(
            "--alpha must be in [0, 1], got {}",
            a.alpha
        )));
    }
    let n = config.model.num_patches();
    let reduction = match a.query {
        Some(q) if q >= n => {
            return Err(HarnessError::Usage(format!(
                "--query {q} is out of range: valid tokens are 0..={}",
                n - 1
            )))
        }
        Some(query) => Reduction::Emitted { query },
        None => Reduction::Received,
    };
    if method == Method::Rollout && a.query.is_some() {
        return Err(HarnessError::Usage(
            "--query applies to --method single only".into(),
        ));
    }
    let source = MapSource { method, reduction };
    let tag = match method {
        Method::SingleLayer { layer } => format!("layer{layer}"),
        Method::Rollout => "rollout".to_string(),
    };

    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let pairs = load_for_model(&a.data, &config)?;
    for (raw, s) in &pairs {
        let (_, records): (_, Vec<AttentionRecord<F>>) =
            no_grad(|| model.forward(&s.image, Mode::Infer))?;
        let scores = match method {
            Method::SingleLayer { layer } => attnmap::reduce(&records[layer], reduction)?,
            Method::Rollout => attnmap::rollout(&records)?,
        };
        let map = attnmap::to_heatmap(
            &scores,
            config.model.image_size,
            config.model.patch_size,
            source,
        )?;
        write_image(
            &a.out.join(format!("attn_{}_{tag}.pgm", s.id)),
            &attnmap::grayscale(&map),
        )?;
        let over = attnmap::overlay(&map, &raw.image, a.alpha)?;
        write_image(&a.out.join(format!("overlay_{}_{tag}.ppm", s.id)), &over)?;
    }
    println!("wrote {} heat maps to {}", pairs.len(), a.out.display());
    Ok(())
}
