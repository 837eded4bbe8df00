use mapunetr::checkpoint::Checkpoint;
use mapunetr::synth::synth_dataset;
use mapunetr::train::{BEST_CKPT, CONFIG_FILE, FINAL_CKPT, LOG_FILE};
use mapunetr::{train, HarnessError, NormKind, RunConfig, TrainOptions};
use mapunetr_core::ModelConfig;
use proptest::prelude::*;

fn tiny(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::tiny(),
        ..Default::default()
    };
    cfg.schedule.epochs = epochs;
    cfg.schedule.batch_size = 2;
    cfg.schedule.lr0 = 0.1;
    cfg
}

#[test]
fn in_memory_training_is_reproducible() {
    let samples = synth_dataset::<f64>(5, 32, 1).unwrap();
    let run = || {
        train(
            &tiny(2),
            &samples,
            &TrainOptions {
                seed: 3,
                out_dir: None,
            },
            |_| {},
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.rng_state, b.rng_state);
    assert_eq!((a.train_set.len(), a.val_set.len()), (4, 1));
}

#[test]
fn zscore_statistics_are_stored_in_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(1);
    cfg.normalization = NormKind::ZScore;
    let samples = synth_dataset::<f32>(4, 32, 1).unwrap();
    let out = train(
        &cfg,
        &samples,
        &TrainOptions {
            seed: 0,
            out_dir: Some(tmp.path().into()),
        },
        |_| {},
    )
    .unwrap();
    let stats = out.config.norm_stats.clone().unwrap();
    assert_eq!(stats.mean.len(), 3);
    let ckpt = Checkpoint::load(&tmp.path().join(FINAL_CKPT)).unwrap();
    assert_eq!(ckpt.config.norm_stats, Some(stats));
    assert_eq!(
        RunConfig::load(&tmp.path().join(CONFIG_FILE)).unwrap(),
        out.config
    );
    assert_eq!(ckpt.epoch, 1);
}

#[test]
fn best_checkpoint_and_log_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let samples = synth_dataset::<f32>(4, 32, 2).unwrap();
    let mut rows = 0;
    let out = train(
        &tiny(3),
        &samples,
        &TrainOptions {
            seed: 1,
            out_dir: Some(tmp.path().into()),
        },
        |_| rows += 1,
    )
    .unwrap();
    assert_eq!(rows, 3);
    assert!(out.best_epoch < 3);
    let best = Checkpoint::load(&tmp.path().join(BEST_CKPT)).unwrap();
    assert_eq!(best.epoch as usize, out.best_epoch + 1);
    let log = std::fs::read_to_string(tmp.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn too_few_samples_for_a_batch() {
    let samples = synth_dataset::<f32>(1, 32, 0).unwrap();
    let err = train(&tiny(1), &samples, &TrainOptions::default(), |_| {});
    assert!(matches!(err, Err(HarnessError::Config(_))));
}

#[test]
fn checkpoint_rejects_a_different_architecture() {
    let samples = synth_dataset::<f32>(2, 32, 0).unwrap();
    let out = train(&tiny(1), &samples, &TrainOptions::default(), |_| {}).unwrap();
    let mut ckpt = Checkpoint::from_model(&out.model, &out.config, 1, out.rng_state.clone());
    ckpt.config.model.depth = 3;
    ckpt.config.model.skip_layers = vec![0, 2];
    assert!(matches!(
        ckpt.to_model::<f32>(),
        Err(HarnessError::Format(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_truncation_is_rejected(cut in 0usize..1000, seed in 0u64..4) {
        let model = mapunetr_core::MapUNetR::<f32>::new(ModelConfig::tiny(), seed).unwrap();
        let bytes = Checkpoint::from_model(&model, &tiny(1), 0, vec![7; 56]).to_bytes();
        let cut = cut * bytes.len() / 1000;
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}
