mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use vitc_unet::cli::main_with_args;
use vitc_unet::config::RunConfig;
use vitc_unet::io::{load_dataset_dir, read_volume};
use vitc_unet::objectives::volume_miou;
use vitc_unet::report::read_history_csv;

use common::{repo_root, validate_file};

/// Shrinks the desk config to something that trains in seconds.
const TINY: &[&str] = &[
    "preprocess.input_size=32",
    "backbone.dim=16",
    "model.decoder.dim=16",
    "model.decoder.blocks=2",
    "model.decoder.heads=2",
    "model.decoder.mlp_ratio=2",
    "model.unet.levels=3",
    "model.unet.base_channels=4",
    "model.unet.max_channels=16",
    "model.unet.fusion_channels=4",
    "train.batch_size=2",
    "train.iters_per_epoch=2",
    "train.max_epochs=2",
];

fn run(args: &[&str]) -> i32 {
    let mut v = vec!["vitc".to_string()];
    v.extend(args.iter().map(|s| s.to_string()));
    main_with_args(v)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn desk() -> PathBuf {
    repo_root().join("configs/desk.toml")
}

fn generate(dir: &Path, classes: usize) {
    let classes = classes.to_string();
    let code = run(&[
        "generate", "--out", p(dir), "--volumes", "4", "--test-volumes", "2", "--classes", &classes, "--shape", "8,32,32",
        "--seed", "7",
    ]);
    assert_eq!(code, 0);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> i32 {
    let desk = desk();
    let mut args = vec!["train", "--config", p(&desk), "--data", p(data), "--out", p(out)];
    for s in TINY {
        args.extend(["--set", s]);
    }
    args.extend(extra);
    run(&args)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "run_manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn generate_defaults_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    assert_eq!(run(&["generate", "--out", p(&a), "--format", "npy"]), 0);
    let ds = load_dataset_dir(&a).unwrap();
    assert_eq!((ds.pool.len(), ds.test.len()), (40, 10));
    assert_eq!(ds.pool[0].intensities.shape(), [12, 96, 96]);
    validate_file(&a.join("manifest.json"), "dataset_manifest.schema.json");
    validate_file(&a.join("run_manifest.json"), "run_manifest.schema.json");

    let b = tmp.path().join("b");
    assert_eq!(run(&["generate", "--out", p(&b), "--format", "npy"]), 0);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn generate_rejects_bad_args() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(run(&["generate", "--out", p(&out), "--classes", "0"]), 2);
    generate(&out, 2);
    // Non-empty directory without --force.
    assert_eq!(run(&["generate", "--out", p(&out), "--volumes", "4", "--shape", "8,32,32"]), 2);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_vitc");
    let tmp = tempfile::tempdir().unwrap();
    let st = Command::new(exe).args(["generate", "--out"]).arg(tmp.path().join("x")).args(["--classes", "0"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = Command::new(exe).args(["frobnicate"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = Command::new(exe)
        .args(["train", "--out"])
        .arg(tmp.path().join("t"))
        .args(["--set", "train.lr=-1"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    let st = Command::new(exe)
        .args(["eval", "--checkpoint"])
        .arg(tmp.path().join("missing.ckpt"))
        .args(["--out"])
        .arg(tmp.path().join("e"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(4));
}

#[test]
fn config_error_names_the_field() {
    let err = RunConfig::load(&desk(), &["train.batch_size=\"eight\"".to_string()]).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("train.batch_size"), "{err}");
}

#[test]
fn default_config_file_matches_defaults() {
    let cfg = RunConfig::load(&repo_root().join("configs/default.toml"), &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn train_seeds_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 2);
    let out = tmp.path().join("train");
    assert_eq!(train(&data, &out, &["--seeds", "0,1"]), 0);
    for s in [0, 1] {
        let dir = out.join(format!("seed_{s}"));
        for f in ["best.ckpt", "last.ckpt", "history.csv", "metrics.json"] {
            assert!(dir.join(f).is_file(), "{f} missing for seed {s}");
        }
        assert_eq!(read_history_csv(&dir.join("history.csv")).unwrap().len(), 2);
        validate_file(&dir.join("metrics.json"), "metrics.schema.json");
    }
    validate_file(&out.join("aggregate.json"), "aggregate.schema.json");
    validate_file(&out.join("run_manifest.json"), "run_manifest.schema.json");
    let agg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"], serde_json::json!([0, 1]));
    assert!(agg["miou_std"].as_f64().unwrap() >= 0.0);
    assert!(RunConfig::load(&out.join("config.toml"), &[]).is_ok());

    let ckpt = out.join("seed_0/best.ckpt");
    let ev = tmp.path().join("eval");
    assert_eq!(run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "test", "--out", p(&ev)]), 0);
    validate_file(&ev.join("eval.json"), "eval.schema.json");
    let e: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["per_volume"].as_array().unwrap().len(), 2);

    let vol = data.join("syn_test_000_image.nii.gz");
    let pr = tmp.path().join("pred");
    let code = run(&[
        "predict", "--checkpoint", p(&ckpt), "--volume", p(&vol), "--structures", "box,ellipsoid", "--out", p(&pr),
    ]);
    assert_eq!(code, 0);
    validate_file(&pr.join("predict.json"), "predict.schema.json");
    let masks: Vec<_> = std::fs::read_dir(&pr)
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().into_string().ok())
        .filter(|n| n.ends_with("_mask.nii.gz"))
        .collect();
    assert_eq!(masks.len(), 2);
    assert!(pr.join("labelmap.nii.gz").is_file());
    let pngs = std::fs::read_dir(pr.join("overlays")).unwrap().count();
    assert_eq!(pngs, 8);
    let lm = read_volume(&pr.join("labelmap.nii.gz")).unwrap();
    assert_eq!(lm.shape, [8, 32, 32]);
    assert!(lm.data.iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));

    let bad = tmp.path().join("pred_bad");
    let code = run(&["predict", "--checkpoint", p(&ckpt), "--volume", p(&vol), "--structures", "liver", "--out", p(&bad)]);
    assert_eq!(code, 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 2);
    let full = tmp.path().join("full");
    assert_eq!(train(&data, &full, &["--set", "train.max_epochs=4"]), 0);
    let half = tmp.path().join("half");
    assert_eq!(train(&data, &half, &[]), 0);
    let resumed = tmp.path().join("resumed");
    let last = half.join("seed_0/last.ckpt");
    let code = run(&["train", "--resume", p(&last), "--data", p(&data), "--out", p(&resumed), "--set", "train.max_epochs=4"]);
    assert_eq!(code, 0);

    let h_half = read_history_csv(&half.join("seed_0/history.csv")).unwrap();
    let h_res = read_history_csv(&resumed.join("seed_0/history.csv")).unwrap();
    let epochs: Vec<usize> = h_res.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);
    assert_eq!(&h_res[..2], &h_half[..]);
    // Concatenated history equals one uninterrupted run, byte for byte.
    assert_eq!(
        std::fs::read(resumed.join("seed_0/history.csv")).unwrap(),
        std::fs::read(full.join("seed_0/history.csv")).unwrap()
    );

    let bad = tmp.path().join("resumed_bad");
    let code = run(&["train", "--resume", p(&last), "--out", p(&bad), "--set", "model.decoder.dim=8"]);
    assert_eq!(code, 2);
}

#[test]
fn expand_reports_old_and_new() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 3);
    let s1 = tmp.path().join("stage1");
    assert_eq!(train(&data, &s1, &["--set", "train.stage=\"stage1\""]), 0);
    let ckpt = s1.join("seed_0/best.ckpt");
    let out = tmp.path().join("expand");
    let code = run(&["expand", "--checkpoint", p(&ckpt), "--new-classes", "tube", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code, 0);
    validate_file(&out.join("expansion.json"), "expansion.schema.json");
    validate_file(&out.join("metrics.json"), "metrics.schema.json");
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("expansion.json")).unwrap()).unwrap();
    assert_eq!(r["old_classes"], serde_json::json!(["ellipsoid", "box"]));
    assert_eq!(r["new_classes"], serde_json::json!(["tube"]));
    assert!(out.join("best.ckpt").is_file());

    let dup = tmp.path().join("dup");
    let code = run(&["expand", "--checkpoint", p(&ckpt), "--new-classes", "box", "--data", p(&data), "--out", p(&dup)]);
    assert_eq!(code, 2);
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 3);
    let ds = load_dataset_dir(&data).unwrap();
    for v in ds.pool.iter().chain(&ds.test) {
        let r = volume_miou(&v.labels, &v.labels, ds.class_names.len()).unwrap();
        assert_eq!(r.mean, 1.0);
    }
}
