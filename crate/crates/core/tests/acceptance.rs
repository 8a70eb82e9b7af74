//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Set `ACCEPTANCE_CRITERIA=1,2,9` to run a subset.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;

use vitc_unet::autograd::Graph;
use vitc_unet::backbone::{build_backbone, slice_features, ImageSlice};
use vitc_unet::checkpoint::{models_bit_identical, Checkpoint};
use vitc_unet::conditioning::koleo;
use vitc_unet::config::{RunConfig, Stage};
use vitc_unet::data::{generate_synthetic_volume, reassemble_volume, slice_volume, synthetic_class_names, LabelSlice};
use vitc_unet::model::{ClassRef, Model, ModelKind};
use vitc_unet::objectives::{combined_loss, dice_loss, focal_loss, LossConfig};
use vitc_unet::optim::Grads;
use vitc_unet::report::write_history_csv;
use vitc_unet::tensor::Tensor;
use vitc_unet::train::{
    early_stop, expand_labels, synthetic_dataset, train_seed, PreparedDataset, PreparedSlice, RunResult, Trainer,
};

use common::*;

// Pinned tolerances.
const LOSS_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];
/// Denominator floor for relative gradient error.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_SAMPLES: usize = 60;
const KOLEO_TOL: f64 = 1e-12;
const E2E_MIOU: f64 = 0.85;
const E2E_MAX_EPOCHS: usize = 20;
const ORDERING_GAP: f64 = 0.02;
const EXPANSION_TOL: f64 = 0.05;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));

    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2} {:<28} {}  ({secs:.1}s)  {}",
            name,
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
        results.push((n, name, out, secs));
    };

    run(1, "loss unit suite", &mut criterion_1);
    run(2, "gradient checks", &mut criterion_2);
    run(3, "structural invariants", &mut criterion_3);
    run(4, "token conditioning", &mut criterion_4);
    run(8, "early stopping oracle", &mut criterion_8);
    run(9, "koleo diagnostic", &mut criterion_9);

    let mut e2e: Option<RunResult> = None;
    let mut vitc_seed0: Option<RunResult> = None;
    if wanted(5) || wanted(6) || wanted(10) {
        let cfg = desk_config();
        let t0 = Instant::now();
        let data = prepare(&cfg);
        println!("prepared 3-class desk dataset in {:.1}s", t0.elapsed().as_secs_f64());
        if wanted(5) {
            run(5, "synthetic end-to-end", &mut || {
                let r = train_seed(&cfg, &data, 0).expect("training");
                let out = criterion_5(&r);
                e2e = Some(r);
                out
            });
        } else {
            e2e = Some(train_seed(&cfg, &data, 0).expect("training"));
        }
        if wanted(6) {
            run(6, "baseline ordering", &mut || {
                let (out, first) = criterion_6(&cfg, &data);
                vitc_seed0 = first;
                out
            });
        } else if wanted(10) {
            vitc_seed0 = Some(train_seed(&cfg, &data, 0).expect("training"));
        }
    }
    run(10, "determinism", &mut || criterion_10(e2e.as_ref(), vitc_seed0.as_ref()));
    run(7, "incremental learning", &mut criterion_7);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    let total: f64 = results.iter().map(|r| r.3).sum();
    println!(
        "acceptance: {} passed, {} failed ({total:.0}s)",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn prepare(cfg: &RunConfig) -> PreparedDataset {
    let backbone = build_backbone(&cfg.backbone).unwrap();
    let ds = synthetic_dataset(&cfg.data.synthetic).unwrap();
    PreparedDataset::new(&ds, backbone.as_ref(), cfg).unwrap()
}

fn criterion_1() -> Outcome {
    let mut fails: Vec<String> = Vec::new();
    let f = focal_loss(&[0.5f64], &[1.0], 2.0).unwrap();
    if (f - 0.25 * 2f64.ln()).abs() > LOSS_TOL {
        fails.push(format!("focal(0.5, 1, 2) = {f}"));
    }
    let mut r = rng(11);
    let mut worst_bce = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..64);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let d = (focal_loss(&p, &y, 0.0).unwrap() - bce_reference(&p, &y)).abs();
        worst_bce = worst_bce.max(d);
    }
    if worst_bce > LOSS_TOL {
        fails.push(format!("focal(γ=0) vs BCE off by {worst_bce:e}"));
    }
    let mask: Vec<f64> = (0..50).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let same = dice_loss(&mask, &mask, 1.0).unwrap();
    if same.abs() > LOSS_TOL {
        fails.push(format!("dice(identical) = {same}"));
    }
    let a: Vec<f64> = (0..200).map(|i| (i < 100) as u8 as f64).collect();
    let b: Vec<f64> = (0..200).map(|i| (i >= 100) as u8 as f64).collect();
    let dj = dice_loss(&a, &b, 1.0).unwrap();
    if (dj - (1.0 - 1.0 / 201.0)).abs() > LOSS_TOL {
        fails.push(format!("dice(disjoint) = {dj}"));
    }
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            format!("worst focal/BCE gap {worst_bce:.1e}")
        } else {
            fails.join("; ")
        },
    )
}

/// Analytic gradients of the training loss against central differences for
/// `GRAD_SAMPLES` entries drawn from parameters matching `filter`.
fn gradcheck_params(
    model: &Model<f64>,
    filter: impl Fn(&str) -> bool,
    inputs: &(vitc_unet::backbone::PreparedImage, vitc_unet::backbone::FeatureGrid, LabelSlice),
    classes: &[ClassRef],
    seed: u64,
) -> (usize, f64) {
    let cfg = LossConfig::default();
    let (img, feats, labels) = inputs;
    let eval = |m: &Model<f64>| {
        let mut g = Graph::new();
        let l = m.loss(&mut g, img, feats, labels, classes, &cfg).unwrap();
        g.scalar(l)
    };
    let mut g = Graph::new();
    let l = model.loss(&mut g, img, feats, labels, classes, &cfg).unwrap();
    g.backward(l).unwrap();
    let grads: Grads<f64> = g
        .param_grads()
        .filter_map(|(n, t)| t.map(|t| (n.to_string(), t.clone())))
        .collect();
    let mut slots = Vec::new();
    model.visit_params(|name, t, trainable| {
        if trainable && filter(name) {
            slots.extend((0..t.len()).map(|i| (name.to_string(), i)));
        }
    });
    assert!(slots.len() >= GRAD_SAMPLES, "only {} candidate entries", slots.len());
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for k in sample(&mut r, slots.len(), GRAD_SAMPLES) {
        let (name, i) = &slots[k];
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*i]);
        let mut m = model.clone();
        let x0 = m.param_entry_mut(name).unwrap().0.data()[*i];
        let numeric = ladder_difference(
            |x| {
                m.param_entry_mut(name).unwrap().0.data_mut()[*i] = x;
                eval(&m)
            },
            x0,
            &GRAD_STEPS,
        );
        worst = worst.max(relative_error(analytic, numeric, GRAD_FLOOR));
    }
    (GRAD_SAMPLES, worst)
}

fn criterion_2() -> Outcome {
    let cfg = toy_model_config(ModelKind::VitcUnet);
    let names = vec!["a".to_string(), "b".to_string()];
    let model: Model<f64> = Model::new(&cfg, TOY_SHAPE, &names, 5).unwrap();
    let mut r = rng(6);
    let inputs = (
        random_image(&mut r, TOY_SHAPE.input_size),
        random_features(&mut r, TOY_SHAPE),
        two_box_labels(TOY_SHAPE.input_size),
    );
    let classes = vec![("a".to_string(), 1u16), ("b".to_string(), 2u16)];
    let (n_dec, dec) = gradcheck_params(
        &model,
        |n| n.starts_with("cond.") || n.starts_with("tokens."),
        &inputs,
        &classes,
        1,
    );
    let (n_fuse, fuse) = gradcheck_params(&model, |n| n.contains(".fuse"), &inputs, &classes, 2);

    // Loss gradient through the graph against differences of the plain
    // implementation.
    let lcfg = LossConfig::default();
    let (h, w) = (10, 10);
    let logits: Vec<f64> = (0..h * w).map(|_| r.random_range(-3.0..3.0)).collect();
    let target: Vec<f64> = (0..h * w).map(|i| ((i % 7) < 3) as u8 as f64).collect();
    let mut g = Graph::new();
    let z = g.param("z", &Tensor::new(vec![1, h, w], logits.clone()).unwrap(), true);
    let l = g.focal_dice_loss(z, &target, &lcfg).unwrap();
    g.backward(l).unwrap();
    let analytic = g.grad(z).unwrap().data().to_vec();
    let mut worst_loss = 0.0f64;
    for i in sample(&mut r, h * w, GRAD_SAMPLES) {
        let mut zz = logits.clone();
        let numeric = ladder_difference(
            |x| {
                zz[i] = x;
                combined_loss(&zz, &target, &lcfg).unwrap()
            },
            logits[i],
            &GRAD_STEPS,
        );
        worst_loss = worst_loss.max(relative_error(analytic[i], numeric, GRAD_FLOOR));
    }
    let pass = dec < GRAD_REL_TOL && fuse < GRAD_REL_TOL && worst_loss < GRAD_REL_TOL;
    outcome(
        pass,
        format!(
            "max rel err: decoder {dec:.1e} ({n_dec} params), fusion {fuse:.1e} ({n_fuse}), loss {worst_loss:.1e} ({GRAD_SAMPLES})"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut fails: Vec<String> = Vec::new();
    let mut r = rng(3);
    let img = random_image(&mut r, TOY_SHAPE.input_size);
    let feats = random_features(&mut r, TOY_SHAPE);
    let s = TOY_SHAPE.input_size;
    for k in [1usize, 3, 7] {
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        for kind in [ModelKind::VitcUnet, ModelKind::Hybrid, ModelKind::Linear] {
            let m: Model<f32> = Model::new(&toy_model_config(kind), TOY_SHAPE, &names, 0).unwrap();
            let mut g = Graph::new();
            let out = m.forward(&mut g, &img, &feats, &names).unwrap();
            let shapes: Vec<Vec<usize>> = out.iter().map(|&v| g.value(v).shape().to_vec()).collect();
            let expected = match kind {
                ModelKind::VitcUnet => vec![vec![1, s, s]; k],
                _ => vec![vec![k + 1, s, s]],
            };
            if shapes != expected {
                fails.push(format!("{} K={k}: {shapes:?}", kind.as_str()));
            }
        }
    }
    for levels in [3usize, 4, 5] {
        let mut cfg = toy_model_config(ModelKind::VitcUnet);
        cfg.unet.levels = levels;
        cfg.decoder.blocks = levels - 1;
        let shape = vitc_unet::model::ModelShape {
            input_size: 32,
            ..TOY_SHAPE
        };
        let m: Model<f32> = Model::new(&cfg, shape, &["a".into()], 0).unwrap();
        let traj = m
            .decoder()
            .unwrap()
            .condition(&m.store, m.tokens().unwrap(), &feats, "a")
            .unwrap();
        if traj.len() != levels - 1 {
            fails.push(format!("trajectory of {} for {levels} levels", traj.len()));
        }
    }
    let vol = generate_synthetic_volume(4, 3, [10, 24, 20]).unwrap();
    for axis in 0..3 {
        let o = vol.oriented(axis).unwrap();
        let labels: Vec<LabelSlice> = slice_volume(&o).unwrap().into_iter().map(|p| p.1).collect();
        let back = reassemble_volume(&labels, o.labels.depth(), o.labels.plane()).unwrap();
        if back != o.labels || back.axis_from_front(axis).unwrap() != vol.labels {
            fails.push(format!("slice/reassemble mismatch on axis {axis}"));
        }
    }

    // Checkpoint round trip after a real optimizer step.
    let cfg = RunConfig {
        model: toy_model_config(ModelKind::VitcUnet),
        ..RunConfig::default()
    };
    let names = vec!["a".to_string(), "b".to_string()];
    let model: Model<f32> = Model::new(&cfg.model, TOY_SHAPE, &names, 1).unwrap();
    let classes = vec![("a".to_string(), 1u16), ("b".to_string(), 2u16)];
    let mut trainer = Trainer::new(cfg.train.clone(), model, classes.clone());
    let slice = PreparedSlice {
        image: img.clone(),
        features: feats.clone(),
        labels: two_box_labels(s),
    };
    trainer.step(&[&slice]).unwrap();
    let _: u64 = trainer.rng.random();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    Checkpoint::of_trainer(&cfg, "toy", 77, &trainer).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bt = back.trainer.as_ref().unwrap();
    if !models_bit_identical(&back.model, &trainer.model) || bt.opt != trainer.opt || bt.rng != trainer.rng {
        fails.push("checkpoint round trip is not bit-exact".into());
    }
    let again = Checkpoint::of_trainer(&cfg, "toy", 77, bt).to_bytes().unwrap();
    if again != std::fs::read(&path).unwrap() {
        fails.push("re-serialised checkpoint differs".into());
    }

    // Frozen backbone across a short training run.
    let mut desk = desk_config();
    desk.data.synthetic.volumes = 3;
    desk.data.synthetic.test_volumes = 1;
    desk.train.max_epochs = 1;
    desk.train.iters_per_epoch = 2;
    desk.train.batch_size = 2;
    let backbone = build_backbone(&desk.backbone).unwrap();
    let fp = backbone.fingerprint();
    let probe = generate_synthetic_volume(99, 3, [12, 96, 96]).unwrap();
    let probe_slice = ImageSlice::new(96, 96, probe.intensities.slice(5).to_vec()).unwrap();
    let before = slice_features(backbone.as_ref(), &probe_slice, &desk.preprocess).unwrap().1;
    let ds = synthetic_dataset(&desk.data.synthetic).unwrap();
    let data = PreparedDataset::new(&ds, backbone.as_ref(), &desk).unwrap();
    let run = train_seed(&desk, &data, 0).unwrap();
    let after = slice_features(backbone.as_ref(), &probe_slice, &desk.preprocess).unwrap().1;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if backbone.fingerprint() != fp || bits(&before.grid) != bits(&after.grid) {
        fails.push("backbone changed during training".into());
    }
    let mut leaked = Vec::new();
    run.trainer.model.visit_params(|n, _, tr| {
        if tr && !(n.starts_with("cond.") || n.starts_with("unet.") || n.starts_with("tokens.")) {
            leaked.push(n.to_string());
        }
    });
    if !leaked.is_empty() {
        fails.push(format!("unexpected trainables {leaked:?}"));
    }
    outcome(fails.is_empty(), if fails.is_empty() { "all hold".into() } else { fails.join("; ") })
}

fn criterion_4() -> Outcome {
    let mut fails: Vec<String> = Vec::new();
    let cfg = toy_model_config(ModelKind::VitcUnet);
    let names = vec!["a".to_string(), "b".to_string()];
    let model: Model<f32> = Model::new(&cfg, TOY_SHAPE, &names, 9).unwrap();
    let mut r = rng(10);
    let img = random_image(&mut r, TOY_SHAPE.input_size);
    let feats = random_features(&mut r, TOY_SHAPE);
    let la = model.class_logits(&img, &feats, "a").unwrap();
    let lb = model.class_logits(&img, &feats, "b").unwrap();
    let diff = la.max_abs_diff(&lb);
    if !(diff > 0.0) {
        fails.push("different tokens gave identical logits".into());
    }
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();

    let mut grown = model.clone();
    grown.add_structure_token("c", &mut r).unwrap();
    if bits(&grown.class_logits(&img, &feats, "a").unwrap()) != bits(&la) {
        fails.push("adding a token changed existing logits".into());
    }
    let mut edited = model.clone();
    {
        let (t, _) = edited.param_entry_mut("tokens.b").unwrap();
        for v in t.data_mut() {
            *v = r.random_range(-5.0..5.0);
        }
    }
    if bits(&edited.class_logits(&img, &feats, "a").unwrap()) != bits(&la) {
        fails.push("editing an unrelated token changed logits".into());
    }
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            format!("token a vs b max |Δlogit| = {diff:.3e}; addition and unrelated edits bit-identical")
        } else {
            fails.join("; ")
        },
    )
}

fn criterion_5(r: &RunResult) -> Outcome {
    let per: Vec<String> = r
        .metrics
        .per_class_iou
        .iter()
        .map(|(k, v)| format!("{k} {v:.3}"))
        .collect();
    let epochs = r.trainer.epoch();
    outcome(
        r.test.miou >= E2E_MIOU && epochs <= E2E_MAX_EPOCHS,
        format!(
            "test mIoU {:.4} (need ≥ {E2E_MIOU}) after {epochs} epochs, best epoch {}; {}",
            r.test.miou,
            r.summary.best_epoch,
            per.join(", ")
        ),
    )
}

fn criterion_6(cfg: &RunConfig, data: &PreparedDataset) -> (Outcome, Option<RunResult>) {
    let mut means = Vec::new();
    let mut first_vitc = None;
    let mut lines = Vec::new();
    for kind in [ModelKind::VitcUnet, ModelKind::Hybrid, ModelKind::Linear] {
        let mut c = cfg.clone();
        c.model.kind = kind;
        let mut scores = Vec::new();
        for seed in SEEDS {
            let r = train_seed(&c, data, seed).expect("training");
            scores.push(r.test.miou);
            if kind == ModelKind::VitcUnet && seed == 0 {
                first_vitc = Some(r);
            }
        }
        let (m, s) = vitc_unet::train::mean_std(&scores);
        lines.push(format!("{} {m:.4}±{s:.4}", kind.as_str()));
        means.push(m);
    }
    let pass = means[0] - means[1] >= ORDERING_GAP && means[1] - means[2] >= ORDERING_GAP;
    (outcome(pass, format!("{} (gaps need ≥ {ORDERING_GAP})", lines.join(", "))), first_vitc)
}

fn criterion_7() -> Outcome {
    let mut cfg = desk_config();
    cfg.data.synthetic.classes = 4;
    let data = prepare(&cfg);
    let names = synthetic_class_names(4);
    let old = names[..2].to_vec();

    let mut s1 = cfg.clone();
    s1.train.stage = Stage::Stage1;
    let stage1 = train_seed(&s1, &data, 0).expect("stage 1");
    let mut s2 = cfg.train.clone();
    s2.stage = Stage::Stage2;
    let (_, report) = expand_labels(stage1.best_model(), &names[2..], &s2, &data).expect("expansion");
    let joint = train_seed(&cfg, &data, 0).expect("joint");
    let joint_old = joint.test.subset_miou(&old).unwrap();
    let delta = (report.old_miou - joint_old).abs();
    outcome(
        delta <= EXPANSION_TOL,
        format!(
            "classes {old:?}: stage-1 {:.4}, after expansion {:.4}, joint {joint_old:.4}, |Δ| {delta:.4} (need ≤ {EXPANSION_TOL}); new classes {:.4} vs joint {:.4}; stage 2 {} epochs in {:.0}s",
            stage1.test.miou,
            report.old_miou,
            report.new_miou,
            joint.test.subset_miou(&names[2..]).unwrap(),
            report.stage2_epochs,
            report.stage2_seconds
        ),
    )
}

/// Twenty hand-built validation histories.
fn stopping_sequences() -> Vec<Vec<f64>> {
    let mut seqs = vec![
        vec![0.5; 11],
        vec![0.5; 10],
        (0..30).map(|i| 0.1 * 1.02f64.powi(i)).collect(),
        (0..30).map(|i| 0.1 * 1.005f64.powi(i)).collect(),
        [vec![0.5; 5], vec![0.505; 10]].concat(),
        [vec![0.5; 5], vec![0.50499; 10]].concat(),
        [vec![0.5; 5], vec![0.5051; 10]].concat(),
        [vec![0.8], vec![0.2; 12]].concat(),
        [vec![0.1, 0.2, 0.3, 0.4], vec![0.4; 9], vec![0.41]].concat(),
        [vec![0.1, 0.2, 0.3, 0.4], vec![0.4; 9], vec![0.404]].concat(),
        [vec![0.3; 10], vec![0.6], vec![0.3; 10]].concat(),
        vec![0.0; 12],
        [vec![0.0; 3], vec![0.01; 10]].concat(),
        (0..25).map(|i| if i % 2 == 0 { 0.5 } else { 0.6 }).collect(),
        (0..25).map(|i| 0.9 - 0.01 * i as f64).collect(),
        [vec![0.2, 0.5, 0.55, 0.6], vec![0.59; 10], vec![0.7], vec![0.69; 10]].concat(),
        [vec![0.9], vec![0.5; 9], vec![0.91]].concat(),
        [vec![0.9], vec![0.5; 9], vec![0.909]].concat(),
        vec![0.7; 3],
    ];
    let mut r = rng(20);
    let mut noisy = Vec::new();
    let mut v = 0.3;
    for _ in 0..40 {
        v = (v + r.random_range(-0.01..0.03f64)).clamp(0.0, 1.0);
        noisy.push(v);
    }
    seqs.push(noisy);
    seqs
}

fn criterion_8() -> Outcome {
    let seqs = stopping_sequences();
    let (patience, min_rel) = (10, 0.01);
    let mut checked = 0;
    let mut stops = 0;
    let mut mismatch = Vec::new();
    for (k, s) in seqs.iter().enumerate() {
        for n in 1..=s.len() {
            let a = early_stop(&s[..n], patience, min_rel);
            let b = early_stop_reference(&s[..n], patience, min_rel);
            checked += 1;
            stops += a as usize;
            if a != b {
                mismatch.push(format!("seq {k} prefix {n}: rule {a}, reference {b}"));
            }
        }
    }
    let hand = early_stop(&[0.5; 11], 10, 0.01) && !early_stop(&[0.5; 10], 10, 0.01);
    outcome(
        mismatch.is_empty() && hand && seqs.len() == 20,
        if mismatch.is_empty() {
            format!("{} sequences, {checked} prefix decisions agree ({stops} stop)", seqs.len())
        } else {
            mismatch.join("; ")
        },
    )
}

fn criterion_9() -> Outcome {
    let mut fails: Vec<String> = Vec::new();
    let two = koleo(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    if two != 0.0 {
        fails.push(format!("two points at distance 1: {two}"));
    }
    let three = koleo(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
    if (three + 2f64.ln() / 3.0).abs() > KOLEO_TOL {
        fails.push(format!("hand case: {three}"));
    }
    let mut r = rng(9);
    let mut violations = 0;
    for _ in 0..100 {
        let pts: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let shrink = r.random_range(0.2..0.95);
        let small: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|x| x * shrink).collect()).collect();
        if !(koleo(&small).unwrap() > koleo(&pts).unwrap()) {
            violations += 1;
        }
    }
    if violations > 0 {
        fails.push(format!("{violations}/100 sets not monotone"));
    }
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            format!("hand cases exact to {KOLEO_TOL:e}; 100/100 shrunk sets increase")
        } else {
            fails.join("; ")
        },
    )
}

fn criterion_10(a: Option<&RunResult>, b: Option<&RunResult>) -> Outcome {
    let (Some(a), Some(b)) = (a, b) else {
        return outcome(false, "needs the seed-0 runs of criteria 5 and 6");
    };
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_history_csv(&pa, &a.trainer.history).unwrap();
    write_history_csv(&pb, &b.trainer.history).unwrap();
    let (ba, bb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let ja = serde_json::to_vec(&a.metrics).unwrap();
    let jb = serde_json::to_vec(&b.metrics).unwrap();
    let same_weights = models_bit_identical(&a.trainer.model, &b.trainer.model);
    outcome(
        ba == bb && ja == jb && same_weights,
        format!(
            "{} epochs; history CSV identical: {}, metrics JSON identical: {}, final weights identical: {same_weights}",
            a.trainer.history.len(),
            ba == bb,
            ja == jb
        ),
    )
}
