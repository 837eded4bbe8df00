use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mapunetr::dataset::{read_image, read_mask};

const TINY: &str = r#"{
    "image_size": [32, 32], "in_channels": 3, "patch_size": 8, "embed_dim": 16,
    "num_heads": 2, "depth": 2, "skip_layers": [0, 1], "decoder_channels": [8, 8, 4],
    "num_classes": 2, "epochs": 2, "batch_size": 2, "lr0": 0.1
}"#;

fn mapunetr(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mapunetr"));
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Synthesizes 4 samples and trains the tiny model on them.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let run = dir.join("run");
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let o = mapunetr(
        &["synth", "--n", "4", "--size", "32", "--seed", "5"],
        &[("--out", &data)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mapunetr(
        &["train"],
        &[("--data", &data), ("--out", &run), ("--config", &cfg)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    (data, run.join("final.ckpt"))
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(mapunetr(&[], &[]).status.code(), Some(2));
    assert_eq!(mapunetr(&["train", "--bogus"], &[]).status.code(), Some(2));
}

#[test]
fn help_succeeds() {
    let o = mapunetr(&["--help"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("attn"));
}

#[test]
fn missing_dataset_fails_with_status_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mapunetr(
        &["train"],
        &[
            ("--data", &tmp.path().join("nope")),
            ("--out", &tmp.path().join("o")),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn train_writes_log_checkpoints_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(tmp.path());
    let run = ckpt.parent().unwrap();
    let log = std::fs::read_to_string(run.join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], mapunetr::train::LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
    for f in ["final.ckpt", "best.ckpt", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn eval_infer_and_attn_on_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());

    let o = mapunetr(
        &["eval", "--deterministic"],
        &[("--ckpt", &ckpt), ("--data", &data)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let line = out.lines().find(|l| l.starts_with("metrics ")).unwrap();
    assert!(line.starts_with("metrics samples=4 dsc="), "{line}");
    for field in line.split_whitespace().skip(2) {
        let v: f64 = field.split('=').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{field}");
    }

    let preds = tmp.path().join("preds");
    let o = mapunetr(
        &["infer"],
        &[("--ckpt", &ckpt), ("--data", &data), ("--out", &preds)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for id in ["0000", "0001", "0002", "0003"] {
        let m = read_mask(&preds.join(format!("pred_{id}.pgm"))).unwrap();
        assert_eq!((m.height, m.width), (32, 32));
        assert!(m.data.iter().all(|&v| v < 2));
    }

    let maps = tmp.path().join("maps");
    let o = mapunetr(
        &["attn", "--layer", "1"],
        &[("--ckpt", &ckpt), ("--data", &data), ("--out", &maps)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let heat = read_image::<f32>(&maps.join("attn_0000_layer1.pgm")).unwrap();
    assert_eq!((heat.height, heat.width, heat.channels), (32, 32, 1));
    let over = read_image::<f32>(&maps.join("overlay_0000_layer1.ppm")).unwrap();
    assert_eq!(over.channels, 3);

    let o = mapunetr(
        &["attn", "--method", "rollout"],
        &[("--ckpt", &ckpt), ("--data", &data), ("--out", &maps)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(maps.join("attn_0003_rollout.pgm").is_file());

    let o = mapunetr(
        &["attn", "--layer", "0", "--query", "5"],
        &[("--ckpt", &ckpt), ("--data", &data), ("--out", &maps)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn attn_argument_errors_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let out = tmp.path().join("maps");
    let paths = [
        ("--ckpt", ckpt.as_path()),
        ("--data", data.as_path()),
        ("--out", out.as_path()),
    ];
    let o = mapunetr(&["attn", "--layer", "99"], &paths);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("valid layers are 0..=1"),
        "{}",
        stderr(&o)
    );
    for bad in [
        &["attn"][..],
        &["attn", "--layer", "0", "--alpha", "1.5"],
        &["attn", "--layer", "0", "--query", "16"],
        &["attn", "--method", "rollout", "--query", "0"],
    ] {
        assert_eq!(mapunetr(bad, &paths).status.code(), Some(2), "{bad:?}");
    }
    assert!(!out.join("attn_0000_layer99.pgm").exists());
}

#[test]
fn corrupt_checkpoint_fails_with_status_1() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let bad = tmp.path().join("bad.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let o = mapunetr(&["eval"], &[("--ckpt", &bad), ("--data", &data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_mapunetr"))
        .env("MAPUNETR_THREADS", "zero")
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MAPUNETR_THREADS"));
}
