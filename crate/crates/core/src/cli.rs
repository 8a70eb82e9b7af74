//! `vitc` command line: generate, train, expand, eval, predict.
//!
//! Log verbosity comes from `VITC_LOG` (env_logger syntax, default `info`).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backbone::{build_backbone, preprocess, Backbone, ImageSlice};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage, SyntheticConfig};
use crate::data::{make_split, LabelSlice, LabeledVolume, Volume, MAX_SYNTHETIC_CLASSES};
use crate::error::{Error, Result};
use crate::io::{load_dataset_dir, read_volume, write_dataset_dir, write_volume, VoxelData};
use crate::model::{ClassRef, Model};
use crate::report::{write_history_csv, write_json, write_overlay_png, RunManifest};
use crate::train::{
    aggregate, class_refs, evaluate, expand_labels, fit_and_test, synthetic_dataset, train_seed, Dataset, EvalReport,
    MetricsReport, PreparedDataset, RunResult, VolumeScore,
};

pub const LOG_ENV: &str = "VITC_LOG";

#[derive(Debug, Parser)]
#[command(name = "vitc", version, about = "Token-conditioned UNet segmentation on frozen ViT features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic volumetric dataset with a manifest.
    Generate(GenerateArgs),
    /// Train one model per seed and aggregate test scores.
    Train(TrainArgs),
    /// Add structure tokens to a trained model and continue training.
    Expand(ExpandArgs),
    /// Volumetric IoU of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Masks, a combined label map and overlays for one volume.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Train/validation pool size.
    #[arg(long, default_value_t = 40)]
    pub volumes: usize,
    #[arg(long, default_value_t = 10)]
    pub test_volumes: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    /// Volume extents as depth,height,width.
    #[arg(long, value_delimiter = ',', default_values_t = [12, 96, 96])]
    pub shape: Vec<usize>,
    #[arg(long, value_enum, default_value_t = VolumeFormat::NiiGz)]
    pub format: VolumeFormat,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VolumeFormat {
    NiiGz,
    Nii,
    Npy,
}

impl VolumeFormat {
    pub fn ext(self) -> &'static str {
        match self {
            VolumeFormat::NiiGz => "nii.gz",
            VolumeFormat::Nii => "nii",
            VolumeFormat::Npy => "npy",
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory with a manifest; synthetic data from the config
    /// when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Continue from a `last.ckpt`; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub new_classes: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image volume (.nii, .nii.gz or .npy).
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub structures: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = VolumeFormat::NiiGz)]
    pub format: VolumeFormat,
    #[arg(long)]
    pub force: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).try_init();
    match run(cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a, args),
        Command::Train(a) => cmd_train(&a, args),
        Command::Expand(a) => cmd_expand(&a, args),
        Command::Eval(a) => cmd_eval(&a, args),
        Command::Predict(a) => cmd_predict(&a, args),
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn finish_manifest(out: &Path, mut manifest: RunManifest, timings: Vec<(String, f64)>) -> Result<()> {
    for (k, v) in timings {
        manifest.timings.insert(k, v);
    }
    write_json(&out.join("run_manifest.json"), &manifest)
}

pub fn cmd_generate(a: &GenerateArgs, args: Vec<String>) -> Result<()> {
    if !(1..=MAX_SYNTHETIC_CLASSES).contains(&a.classes) {
        return Err(Error::Usage(format!("--classes must lie in 1..={MAX_SYNTHETIC_CLASSES}, got {}", a.classes)));
    }
    if a.volumes < 2 {
        return Err(Error::Usage("--volumes must be at least 2 for a train/validation split".into()));
    }
    let shape: [usize; 3] = a
        .shape
        .clone()
        .try_into()
        .map_err(|_| Error::Usage("--shape takes depth,height,width".into()))?;
    if shape.iter().any(|&d| d < 8) {
        return Err(Error::Usage("every --shape extent must be at least 8".into()));
    }
    prepare_out(&a.out, a.force)?;
    let t0 = Instant::now();
    let cfg = SyntheticConfig {
        volumes: a.volumes,
        test_volumes: a.test_volumes,
        classes: a.classes,
        shape,
        seed: a.seed,
    };
    let ds = synthetic_dataset(&cfg)?;
    write_dataset_dir(&a.out, &ds, a.format.ext())?;
    log::info!(
        "wrote {} pool and {} test volumes to {}",
        ds.pool.len(),
        ds.test.len(),
        a.out.display()
    );
    finish_manifest(&a.out, RunManifest::new("generate", args, vec![a.seed]), vec![("generate".to_string(), t0.elapsed().as_secs_f64())])
}

/// Dataset from a directory or, failing that, from the config's synthetic
/// section.
pub fn load_dataset(data: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match data {
        Some(dir) => load_dataset_dir(dir),
        None => synthetic_dataset(&cfg.data.synthetic),
    }
}

fn check_fingerprint(backbone: &dyn Backbone, ck: &Checkpoint) -> Result<()> {
    if backbone.fingerprint() != ck.backbone_fingerprint {
        return Err(Error::Data(format!(
            "backbone fingerprint {:016x} differs from the checkpoint's {:016x}",
            backbone.fingerprint(),
            ck.backbone_fingerprint
        )));
    }
    Ok(())
}

/// The checkpoint's config with command-line overrides applied on top.
fn checkpoint_config(ck: &Checkpoint, overrides: &[String]) -> Result<RunConfig> {
    RunConfig::from_toml_str(&ck.config.to_toml(), overrides, "checkpoint config")
}

fn write_run(dir: &Path, cfg: &RunConfig, data: &PreparedDataset, run: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fp = data.backbone_fingerprint;
    Checkpoint::of_model(cfg, &data.name, fp, run.best_model()).save(&dir.join("best.ckpt"))?;
    Checkpoint::of_trainer(cfg, &data.name, fp, &run.trainer).save(&dir.join("last.ckpt"))?;
    write_history_csv(&dir.join("history.csv"), &run.trainer.history)?;
    write_json(&dir.join("metrics.json"), &run.metrics)
}

pub fn cmd_train(a: &TrainArgs, args: Vec<String>) -> Result<()> {
    let t0 = Instant::now();
    if let Some(resume) = &a.resume {
        return resume_train(a, resume, args);
    }
    let cfg = match &a.config.config {
        Some(p) => RunConfig::load(p, &a.config.overrides)?,
        None => RunConfig::from_toml_str("", &a.config.overrides, "defaults")?,
    };
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![cfg.train.seed]);
    if seeds.is_empty() {
        return Err(Error::Usage("--seeds is empty".into()));
    }
    prepare_out(&a.out, a.force)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&a.out, e))?;
    let ds = load_dataset(a.data.as_deref(), &cfg)?;
    let backbone = build_backbone(&cfg.backbone)?;
    let data = PreparedDataset::new(&ds, backbone.as_ref(), &cfg)?;
    let t_prep = t0.elapsed().as_secs_f64();
    let mut metrics = Vec::new();
    let mut timings = vec![("prepare".to_string(), t_prep)];
    for &seed in &seeds {
        log::info!("seed {seed}");
        let run = train_seed(&cfg, &data, seed)?;
        write_run(&a.out.join(format!("seed_{seed}")), &cfg, &data, &run)?;
        log::info!("seed {seed}: test mIoU {:.4}", run.metrics.miou);
        timings.push((format!("seed_{seed}"), run.summary.wall_seconds));
        metrics.push(run.metrics);
    }
    let agg = aggregate(&metrics)?;
    write_json(&a.out.join("aggregate.json"), &agg)?;
    println!("test mIoU {:.4} ± {:.4} over {} seed(s)", agg.miou_mean, agg.miou_std, seeds.len());
    timings.push(("total".to_string(), t0.elapsed().as_secs_f64()));
    finish_manifest(&a.out, RunManifest::new("train", args, seeds), timings)
}

fn resume_train(a: &TrainArgs, resume: &Path, args: Vec<String>) -> Result<()> {
    let t0 = Instant::now();
    let ck = Checkpoint::load(resume)?;
    let mut trainer = ck
        .trainer
        .clone()
        .ok_or_else(|| Error::Usage(format!("{} holds no trainer state; resume from a last.ckpt", resume.display())))?;
    let overrides = &a.config.overrides;
    if let Some(p) = &a.config.config {
        log::warn!("--config {} ignored when resuming; use --set", p.display());
    }
    if let Some(o) = overrides.iter().find(|o| o.trim_start().starts_with("model.")) {
        return Err(Error::Usage(format!("`{o}`: the architecture is fixed by the checkpoint")));
    }
    let cfg = checkpoint_config(&ck, overrides)?;
    let seed = trainer.cfg.seed;
    trainer.cfg = cfg.train.clone();
    trainer.cfg.seed = seed;
    trainer.cfg.stage = ck.trainer.as_ref().map_or(Stage::Joint, |t| t.cfg.stage);
    trainer.opt.lr = cfg.train.lr;
    trainer.opt.weight_decay = cfg.train.weight_decay;
    let best_path = resume.with_file_name("best.ckpt");
    if let (Some(best), Ok(b)) = (trainer.best.as_mut(), Checkpoint::load(&best_path)) {
        best.model = b.model;
    }
    prepare_out(&a.out, a.force)?;
    let ds = load_dataset(a.data.as_deref(), &cfg)?;
    let backbone = build_backbone(&cfg.backbone)?;
    check_fingerprint(backbone.as_ref(), &ck)?;
    let data = PreparedDataset::new(&ds, backbone.as_ref(), &cfg)?;
    let run = fit_and_test(trainer, &data, seed)?;
    let dir = a.out.join(format!("seed_{seed}"));
    write_run(&dir, &cfg, &data, &run)?;
    write_json(&a.out.join("aggregate.json"), &aggregate(std::slice::from_ref(&run.metrics))?)?;
    println!("resumed to epoch {}: test mIoU {:.4}", run.trainer.epoch(), run.metrics.miou);
    finish_manifest(&a.out, RunManifest::new("train", args, vec![seed]), vec![("total".to_string(), t0.elapsed().as_secs_f64())])
}

pub fn cmd_expand(a: &ExpandArgs, args: Vec<String>) -> Result<()> {
    let t0 = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck, &a.overrides)?;
    prepare_out(&a.out, a.force)?;
    let ds = load_dataset(a.data.as_deref(), &cfg)?;
    let backbone = build_backbone(&cfg.backbone)?;
    check_fingerprint(backbone.as_ref(), &ck)?;
    let data = PreparedDataset::new(&ds, backbone.as_ref(), &cfg)?;
    let (run, report) = expand_labels(&ck.model, &a.new_classes, &cfg.train, &data)?;
    write_run(&a.out, &cfg, &data, &run)?;
    write_json(&a.out.join("expansion.json"), &report)?;
    println!(
        "old classes {:.4}  new classes {:.4}  all {:.4}  ({} stage-2 epochs)",
        report.old_miou, report.new_miou, report.miou, report.stage2_epochs
    );
    finish_manifest(&a.out, RunManifest::new("expand", args, vec![report.seed]), vec![("total".to_string(), t0.elapsed().as_secs_f64())])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub split: String,
    pub per_volume: Vec<VolumeScore>,
}

/// Model classes that the dataset also labels, with the dataset's ids.
pub fn shared_classes(model: &Model<f32>, dataset_classes: &[String]) -> Vec<ClassRef> {
    let own = model.class_names();
    class_refs(dataset_classes).into_iter().filter(|c| own.contains(&c.0)).collect()
}

pub fn cmd_eval(a: &EvalArgs, args: Vec<String>) -> Result<()> {
    let t0 = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.config.clone();
    prepare_out(&a.out, a.force)?;
    let ds = load_dataset(a.data.as_deref(), &cfg)?;
    let backbone = build_backbone(&cfg.backbone)?;
    check_fingerprint(backbone.as_ref(), &ck)?;
    let seed = ck.trainer.as_ref().map_or(cfg.train.seed, |t| t.cfg.seed);
    let vols: Vec<LabeledVolume> = match a.split {
        SplitArg::Test => ds.test.clone(),
        SplitArg::Train | SplitArg::Val => {
            let ids: Vec<String> = ds.pool.iter().map(|v| v.volume_id.clone()).collect();
            let split = make_split(&ids, seed)?;
            let keep = if a.split == SplitArg::Train { split.train_ids } else { split.val_ids };
            ds.pool.iter().filter(|v| keep.contains(&v.volume_id)).cloned().collect()
        }
    };
    let prepared = crate::train::prepare_volumes(&vols, backbone.as_ref(), &cfg.preprocess, cfg.data.slice_axis)?;
    let classes = shared_classes(&ck.model, &ds.class_names);
    if classes.is_empty() {
        return Err(Error::Data("the model and the dataset share no class names".into()));
    }
    let report: EvalReport = evaluate(&ck.model, &prepared, &classes)?;
    let epochs = ck.trainer.as_ref().map_or(0, |t| t.epoch());
    let out = EvalOutput {
        metrics: MetricsReport::from_eval(&ds.name, ck.model.kind().as_str(), seed, epochs, &report),
        split: format!("{:?}", a.split).to_lowercase(),
        per_volume: report.per_volume.clone(),
    };
    write_json(&a.out.join("eval.json"), &out)?;
    println!("{} mIoU {:.4} over {} volume(s)", out.split, report.miou, prepared.len());
    finish_manifest(&a.out, RunManifest::new("eval", args, vec![seed]), vec![("total".to_string(), t0.elapsed().as_secs_f64())])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictOutput {
    pub volume: String,
    /// Label id each structure carries in `labelmap.*`.
    pub labels: Vec<(String, u16)>,
    pub masks: Vec<String>,
    pub labelmap: String,
    pub overlays: usize,
}

pub fn cmd_predict(a: &PredictArgs, args: Vec<String>) -> Result<()> {
    let t0 = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.config.clone();
    let own = ck.model.class_names();
    for s in &a.structures {
        if !own.contains(s) {
            return Err(Error::UnknownStructure {
                name: s.clone(),
                available: own.clone(),
            });
        }
    }
    let raw = read_volume(&a.volume)?;
    let backbone = build_backbone(&cfg.backbone)?;
    check_fingerprint(backbone.as_ref(), &ck)?;
    prepare_out(&a.out, a.force)?;
    let axis = cfg.data.slice_axis;
    let image = raw.to_intensities()?.axis_to_front(axis)?;
    let [d, h, w] = image.shape();
    let size = cfg.preprocess.input_size;
    let ids: Vec<u16> = (1..=a.structures.len() as u16).collect();
    let mut masks = vec![Vec::with_capacity(d * h * w); a.structures.len()];
    let mut labelmap = Vec::with_capacity(d * h * w);
    let overlay_dir = a.out.join("overlays");
    std::fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    for k in 0..d {
        let slice = ImageSlice::new(h, w, image.slice(k).to_vec())?;
        let prepared = preprocess(&slice, &cfg.preprocess, backbone.patch_size())?;
        let feats = backbone.extract_features(&prepared)?;
        let probs = ck.model.predict_probs(&prepared, &feats, &a.structures)?;
        for (m, p) in masks.iter_mut().zip(&probs) {
            let bin: Vec<u16> = p.iter().map(|&v| u16::from(v as f64 > crate::pixel_decoder::DEFAULT_THRESHOLD)).collect();
            m.extend(LabelSlice::new(size, size, bin)?.resized(h, w).labels);
        }
        let lm = crate::pixel_decoder::labelmap_from_probs(&probs, &ids, size * size)?;
        let lm = LabelSlice::new(size, size, lm)?.resized(h, w);
        write_overlay_png(&overlay_dir.join(format!("slice_{k:03}.png")), h, w, slice.pixels(), &lm.labels)?;
        labelmap.extend(lm.labels);
    }
    let ext = a.format.ext();
    let save = |name: &str, data: Vec<u16>| -> Result<String> {
        let vol = Volume::new([d, h, w], data)?.axis_from_front(axis)?;
        let file = format!("{name}.{ext}");
        write_volume(&a.out.join(&file), vol.shape(), &VoxelData::U16(vol.data().to_vec()))?;
        Ok(file)
    };
    let mut mask_files = Vec::new();
    for (name, m) in a.structures.iter().zip(masks) {
        mask_files.push(save(&format!("{name}_mask"), m)?);
    }
    let out = PredictOutput {
        volume: a.volume.display().to_string(),
        labels: a.structures.iter().cloned().zip(ids).collect(),
        masks: mask_files,
        labelmap: save("labelmap", labelmap)?,
        overlays: d,
    };
    write_json(&a.out.join("predict.json"), &out)?;
    println!("wrote {} mask(s), a label map and {d} overlay(s) to {}", out.masks.len(), a.out.display());
    finish_manifest(&a.out, RunManifest::new("predict", args, vec![]), vec![("total".to_string(), t0.elapsed().as_secs_f64())])
}
