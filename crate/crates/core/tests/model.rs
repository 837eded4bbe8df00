use mapunetr_core::attnmap::{grid_value_at, head_mean_map, rollout_matrix, upsample_scores};
use mapunetr_core::metrics::{evaluate, evaluate_per_sample, mask_metrics};
use mapunetr_core::model::{tokens_to_grid, ModelConfig};
use mapunetr_core::rng::{stream, Purpose};
use mapunetr_core::{no_grad, Image, MapUNetR, Mask, MetricsReport, Mode, Sample, Scalar, Tensor};

fn random_image(cfg: &ModelConfig, seed: u64) -> Image<f64> {
    let (h, w) = cfg.image_size;
    let n = h * w * cfg.in_channels;
    let v = Tensor::<f64>::uniform(&[n], 1.0, &mut stream(seed, Purpose::Synth)).to_vec();
    Image::new(h, w, cfg.in_channels, v).unwrap()
}

fn zero_mixers<T: Scalar>(model: &MapUNetR<T>) {
    for p in model.parameters() {
        if p.name.contains(".attn.") || p.name.contains(".mlp.") {
            p.tensor.data_mut().fill(T::zero());
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::tiny();
    let model = MapUNetR::<f64>::new(cfg.clone(), 5).unwrap();
    for seed in 0..10 {
        let (_, records) =
            no_grad(|| model.forward(&random_image(&cfg, seed), Mode::Infer)).unwrap();
        for r in &records {
            assert!(r.max_row_deviation() <= 1e-6);
            assert!(r.weights.iter().all(|&w| w >= 0.0));
            let s: f64 = head_mean_map(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn residual_passthrough_is_bitwise() {
    let cfg = ModelConfig::default();
    let model = MapUNetR::<f32>::new(cfg.clone(), 3).unwrap();
    zero_mixers(&model);
    let img = random_image(&cfg, 1).map(|v| v as f32);
    let out = model.encoder.forward(&img).unwrap();
    assert_eq!(out.bottleneck.to_vec(), out.embedded.to_vec());
    for s in &out.skips {
        assert_eq!(s.to_vec(), out.embedded.to_vec());
    }
}

#[test]
fn zeroed_mixers_keep_uniform_attention_shape() {
    let cfg = ModelConfig::tiny();
    let model = MapUNetR::<f64>::new(cfg.clone(), 4).unwrap();
    zero_mixers(&model);
    let (_, recs) = model.forward(&random_image(&cfg, 2), Mode::Infer).unwrap();
    let n = cfg.num_patches() as f64;
    assert!(recs[0].weights.iter().all(|&w| (w - 1.0 / n).abs() < 1e-15));
}

#[test]
fn infer_forward_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let model = MapUNetR::<f64>::new(cfg.clone(), 6).unwrap();
    let img = random_image(&cfg, 3);
    let (a, ra) = model.forward(&img, Mode::Infer).unwrap();
    let (b, rb) = model.forward(&img, Mode::Infer).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
    assert_eq!(ra, rb);
}

#[test]
fn probabilities_sum_to_one() {
    let cfg = ModelConfig {
        num_classes: 3,
        ..ModelConfig::tiny()
    };
    let model = MapUNetR::<f32>::new(cfg.clone(), 7).unwrap();
    let img = random_image(&cfg, 4).map(|v| v as f32);
    let (p, _) = model.forward(&img, Mode::Train).unwrap();
    let p = p.to_vec();
    let hw = 32 * 32;
    for i in 0..hw {
        let s = p[i] + p[hw + i] + p[2 * hw + i];
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn grid_flatten_roundtrip() {
    let t = Tensor::<f64>::uniform(&[6, 5], 1.0, &mut stream(1, Purpose::Synth));
    let g = tokens_to_grid(&t, 2, 3).unwrap();
    let back = g.reshape(&[5, 6]).unwrap().transpose().unwrap();
    assert_eq!(back.to_vec(), t.to_vec());
}

#[test]
fn rollout_rows_stay_stochastic() {
    let cfg = ModelConfig::default();
    let model = MapUNetR::<f64>::new(cfg.clone(), 8).unwrap();
    let (_, recs) = no_grad(|| model.forward(&random_image(&cfg, 5), Mode::Infer)).unwrap();
    let n = cfg.num_patches();
    for depth in 1..=recs.len() {
        let m = rollout_matrix(&recs[..depth]).unwrap();
        for row in m.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn upsampling_is_monotone_at_token_centers() {
    let scores: Vec<f64> = (0..12).map(|i| ((i * 5) % 12) as f64 / 11.0).collect();
    let grid = (3, 4);
    // token center (r, c) maps back to grid coordinate (r, c) exactly
    let centre = |t: usize| grid_value_at(&scores, grid, (t / 4) as f64, (t % 4) as f64);
    for a in 0..12 {
        for b in 0..12 {
            if scores[a] > scores[b] {
                assert!(centre(a) > centre(b));
            }
        }
    }
    assert_eq!(upsample_scores(&scores, grid, 12, 16).unwrap().len(), 192);
}

fn all_foreground_model(cfg: &ModelConfig) -> MapUNetR<f64> {
    let model = MapUNetR::<f64>::new(cfg.clone(), 9).unwrap();
    model.decoder.head_weight.data_mut().fill(0.0);
    model
        .decoder
        .head_bias
        .data_mut()
        .copy_from_slice(&[-5.0, 5.0]);
    model
}

fn sample_with_mask(cfg: &ModelConfig, labels: Vec<u8>, seed: u64) -> Sample<f64> {
    let (h, w) = cfg.image_size;
    Sample::new(
        random_image(cfg, seed),
        Mask::new(h, w, labels).unwrap(),
        format!("{seed}"),
    )
    .unwrap()
}

#[test]
fn evaluate_examples() {
    let cfg = ModelConfig::tiny();
    let model = all_foreground_model(&cfg);
    let full = sample_with_mask(&cfg, vec![1; 1024], 1);
    assert_eq!(
        evaluate(&model, std::slice::from_ref(&full)).unwrap(),
        MetricsReport::ones()
    );

    // half the pixels positive: dsc = 2·512 / (2·512 + 512) = 2/3
    let half = sample_with_mask(&cfg, (0..1024).map(|i| u8::from(i < 512)).collect(), 2);
    let per = evaluate_per_sample(&model, &[full.clone(), half.clone()]).unwrap();
    let all_one = Mask::new(32, 32, vec![1; 1024]).unwrap();
    assert_eq!(per[1], mask_metrics(&all_one, &half.mask, 2).unwrap());
    let both = evaluate(&model, &[full, half]).unwrap();
    assert!((both.dsc - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!(evaluate::<f64>(&model, &[]).is_err());
}

#[test]
fn extent_mismatch_is_rejected() {
    let model = MapUNetR::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    let img = Image::filled(32, 32, 1, 0.0);
    assert!(model.forward(&img, Mode::Infer).is_err());
}
