use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cir_cli::{RunConfig, CHECKPOINT, CONFIG_ECHO, CROP_CSV, EVAL_JSON, SWEEP_CSV, TRAIN_LOG};
use cir_core::{BackboneConfig, Checkpoint, TrainConfig};

fn debias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = debias(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 16×16 images, 3 classes, a two-block backbone and a few epochs.
fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let mut cfg = RunConfig {
        seed: 5,
        backbone: BackboneConfig::vgg(1, 16, &[4, 8]),
        train: TrainConfig { epochs, batch_size: 16, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    cfg.synthetic.num_classes = 3;
    cfg.synthetic.image_size = 16;
    cfg.synthetic.n_train = 30;
    cfg.synthetic.n_test = 20;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join(EVAL_JSON)).unwrap()).unwrap()
}

#[test]
fn generate_default_spec_writes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["--out", s(&out), "generate"]);
    let rows = read_rows(&out.join("manifest.csv"));
    let count = |split: &str| rows.iter().filter(|r| r[2] == split).count();
    assert_eq!((count("train"), count("test")), (2000, 1000));
    assert!(rows.iter().all(|r| out.join(&r[0]).is_file()));
    assert!(out.join(CONFIG_ECHO).is_file());
}

#[test]
fn generate_with_full_correlation_ties_texture_to_label() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"n_train": 10, "n_test": 5}"#).unwrap();
    let out = dir.path().join("data");
    ok(&["--out", s(&out), "generate", "--spec", s(&spec), "--rho", "1.0"]);
    let labels = read_rows(&out.join("manifest.csv"));
    let meta = read_rows(&out.join("meta.csv"));
    assert_eq!(labels.len(), 60);
    for (l, m) in labels.iter().zip(&meta) {
        assert_eq!(l[0], m[0]);
        assert_eq!(l[1], m[1], "{}", l[0]);
    }
}

#[test]
fn generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"n_train": 4, "n_test": 2}"#).unwrap();
    for name in ["a", "b"] {
        ok(&["--seed", "9", "--out", s(&dir.path().join(name)), "generate", "--spec", s(&spec)]);
    }
    for rel in ["manifest.csv", "meta.csv", "images/train/00003.png", "masks/test/00001.png"] {
        assert_eq!(fs::read(dir.path().join("a").join(rel)).unwrap(), fs::read(dir.path().join("b").join(rel)).unwrap());
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let cases: [&[&str]; 5] = [
        &["--out", out, "generate", "--spec", "missing.json"],
        &["--out", out, "eval", "--checkpoint", "missing.ckpt"],
        &["--out", out, "train", "--lambda", "-1"],
        &["--out", out, "train", "--data", "no_such_dir"],
        &["--out", out, "crop-experiment", "--crops", "8,40"],
    ];
    for args in cases {
        let o = debias(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn train_is_deterministic_and_echo_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["--config", s(&cfg), "--out", s(&a), "train"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "train"]);
    ok(&["--config", s(&a.join(CONFIG_ECHO)), "--out", s(&c), "train"]);
    let eval_a = fs::read(a.join(EVAL_JSON)).unwrap();
    assert_eq!(eval_a, fs::read(b.join(EVAL_JSON)).unwrap());
    assert_eq!(eval_a, fs::read(c.join(EVAL_JSON)).unwrap());
    assert_eq!(fs::read(a.join(CHECKPOINT)).unwrap(), fs::read(c.join(CHECKPOINT)).unwrap());
    for f in [TRAIN_LOG, "confusion.csv", CONFIG_ECHO] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert_eq!(read_rows(&a.join(TRAIN_LOG)).iter().filter(|r| !r[6].is_empty()).count(), 2);
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("o");
    ok(&["--config", s(&cfg), "--seed", "11", "--out", s(&out), "train", "--lambda", "0", "--epochs", "1"]);
    let echo: RunConfig = serde_json::from_slice(&fs::read(out.join(CONFIG_ECHO)).unwrap()).unwrap();
    assert_eq!((echo.seed, echo.train.seed, echo.train.lambda, echo.train.epochs), (11, 11, 0.0, 1));
    assert_eq!(echo.backbone, BackboneConfig::vgg(1, 16, &[4, 8]));
    let ckpt = Checkpoint::load(&out.join(CHECKPOINT)).unwrap();
    assert!(ckpt.model.sam.is_none(), "lambda 0 trains the plain baseline");
    assert_eq!(report(&out)["predict_mode"], "baseline");
}

#[test]
fn eval_modes_features_and_crop_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let data = dir.path().join("data");
    ok(&["--config", s(&cfg), "--out", s(&data), "generate"]);
    let run = dir.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&run), "train", "--data", s(&data)]);
    let ckpt = run.join(CHECKPOINT);

    for mode in ["baseline", "interventional"] {
        let out = dir.path().join(mode);
        ok(&["--out", s(&out), "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--mode", mode]);
        let r = report(&out);
        assert_eq!(r["predict_mode"], mode);
        assert_eq!(r["n_eval"], 60);
    }

    let feat = dir.path().join("feat");
    ok(&["--out", s(&feat), "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--export-features"]);
    let emb = read_rows(&feat.join("embeddings.csv"));
    assert_eq!(emb.len(), 60);
    let disc: serde_json::Value = serde_json::from_slice(&fs::read(feat.join("discriminability.json")).unwrap()).unwrap();
    assert!(disc["ratio"].as_f64().unwrap() > 0.0);

    let crop = dir.path().join("crop");
    ok(&["--out", s(&crop), "crop-experiment", "--checkpoint", s(&ckpt), "--data", s(&data), "--crops", "8,16"]);
    let rows = read_rows(&crop.join(CROP_CSV));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["8", "16"]);
    let full: f64 = rows[1][1].parse().unwrap();
    let reported = report(&feat)["accuracy"].as_f64().unwrap();
    assert_eq!((full * 1000.0).round() / 1000.0, reported, "full-size crop must match eval");
}

#[test]
fn eval_rejects_mismatched_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let run = dir.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&run), "train"]);
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"num_classes": 3, "n_train": 2, "n_test": 2, "image_size": 24}"#).unwrap();
    let data = dir.path().join("data");
    ok(&["--out", s(&data), "generate", "--spec", s(&spec)]);
    let o = debias(&["--out", s(&dir.path().join("e")), "eval", "--checkpoint", s(&run.join(CHECKPOINT)), "--data", s(&data)]);
    assert_ne!(o.status.code(), Some(0));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("16x16x1") && msg.contains("24x24x1"), "{msg}");
}

#[test]
fn sweep_rows_follow_the_sorted_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let (seq, par) = (dir.path().join("seq"), dir.path().join("par"));
    ok(&["--config", s(&cfg), "--out", s(&seq), "sweep", "--lambdas", "0.5,0,0.1"]);
    ok(&["--config", s(&cfg), "--out", s(&par), "sweep", "--lambdas", "0.5,0,0.1", "--parallel", "3"]);
    let rows = read_rows(&seq.join(SWEEP_CSV));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "0.1", "0.5"]);
    assert_eq!(fs::read(seq.join(SWEEP_CSV)).unwrap(), fs::read(par.join(SWEEP_CSV)).unwrap());
}

#[test]
fn crop_experiment_retrains_per_crop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let out = dir.path().join("crop");
    ok(&["--config", s(&cfg), "--out", s(&out), "crop-experiment", "--crops", "4,16", "--lambda", "0"]);
    let rows = read_rows(&out.join(CROP_CSV));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r[1].parse::<f64>().unwrap())));
}

#[test]
fn diverging_training_fails_and_keeps_its_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    let out = dir.path().join("o");
    let o = debias(&["--config", s(&cfg), "--out", s(&out), "train", "--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
    assert!(!read_rows(&out.join(TRAIN_LOG)).is_empty());
    assert!(!out.join(CHECKPOINT).exists());
}

#[test]
fn confounded_run_scores_higher_on_train_than_test() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 8);
    let data = dir.path().join("data");
    ok(&["--config", s(&cfg), "--out", s(&data), "generate"]);
    let run = dir.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&run), "train", "--data", s(&data)]);
    let acc = |split: &str| {
        let out = dir.path().join(split);
        ok(&["--out", s(&out), "eval", "--checkpoint", s(&run.join(CHECKPOINT)), "--data", s(&data), "--split", split]);
        report(&out)["accuracy"].as_f64().unwrap()
    };
    let (train, test) = (acc("train"), acc("test"));
    assert!(train >= test, "train {train} < test {test}");
}
