//! Training protocol: exhaustive class sampling, AdamW, per-epoch volumetric
//! validation, plateau early stopping, multi-seed runs and two-stage label
//! expansion.

use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{preprocess, Backbone, FeatureGrid, PreparedImage, PreprocessConfig};
use crate::config::{RunConfig, Stage, SyntheticConfig, TrainConfig};
use crate::data::{
    generate_synthetic_volume, make_split, reassemble_volume, slice_volume, synthetic_class_names, DatasetSplit, LabelSlice,
    LabelVolume, LabeledVolume,
};
use crate::error::{Error, Result};
use crate::model::{ClassRef, Model, ModelShape};
use crate::objectives::{volume_miou, LossConfig};
use crate::optim::{clip_global_norm, AdamW, Grads};
use crate::tensor::Tensor;

/// One slice ready for the model: standardised image, cached frozen
/// features and labels at the model input resolution.
#[derive(Clone, Debug)]
pub struct PreparedSlice {
    pub image: PreparedImage,
    pub features: FeatureGrid,
    pub labels: LabelSlice,
}

#[derive(Clone, Debug)]
pub struct PreparedVolume {
    pub volume_id: String,
    pub slices: Vec<PreparedSlice>,
    /// Ground truth at the original resolution, in slicing orientation.
    pub gt: LabelVolume,
}

pub fn prepare_volume(
    vol: &LabeledVolume,
    backbone: &dyn Backbone,
    pre: &PreprocessConfig,
    axis: usize,
) -> Result<PreparedVolume> {
    let oriented = vol.oriented(axis)?;
    let size = pre.input_size;
    let slices = slice_volume(&oriented)?
        .into_iter()
        .map(|(img, lab)| {
            let image = preprocess(&img, pre, backbone.patch_size())?;
            let features = backbone.extract_features(&image)?;
            Ok(PreparedSlice {
                image,
                features,
                labels: lab.resized(size, size),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedVolume {
        volume_id: vol.volume_id.clone(),
        slices,
        gt: oriented.labels,
    })
}

pub fn prepare_volumes(
    vols: &[LabeledVolume],
    backbone: &dyn Backbone,
    pre: &PreprocessConfig,
    axis: usize,
) -> Result<Vec<PreparedVolume>> {
    vols.iter().map(|v| prepare_volume(v, backbone, pre, axis)).collect()
}

pub fn model_shape(backbone: &dyn Backbone, pre: &PreprocessConfig) -> ModelShape {
    let g = pre.input_size / backbone.patch_size();
    ModelShape {
        feat_dim: backbone.dim(),
        grid: (g, g),
        input_size: pre.input_size,
    }
}

/// `(name, label id)` for every dataset class, ids starting at 1.
pub fn class_refs(names: &[String]) -> Vec<ClassRef> {
    names.iter().cloned().zip(1u16..).collect()
}

/// Classes a stage trains on.
pub fn stage_classes(cfg: &TrainConfig, dataset_classes: &[String]) -> Result<Vec<ClassRef>> {
    let all = class_refs(dataset_classes);
    match cfg.stage {
        Stage::Joint | Stage::Stage2 => Ok(all),
        Stage::Stage1 => match &cfg.stage1_classes {
            Some(names) => names
                .iter()
                .map(|n| {
                    all.iter().find(|c| &c.0 == n).cloned().ok_or_else(|| Error::UnknownStructure {
                        name: n.clone(),
                        available: dataset_classes.to_vec(),
                    })
                })
                .collect(),
            None => Ok(all[..all.len().div_ceil(2)].to_vec()),
        },
    }
}

/// Per-volume IoU over `classes` and its mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub volume_id: String,
    pub per_class: Vec<f64>,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_volume: Vec<VolumeScore>,
    /// Mean over volumes, per class.
    pub per_class: Vec<f64>,
    /// Mean over volumes of the per-volume mIoU.
    pub miou: f64,
}

impl EvalReport {
    pub fn class_iou(&self, name: &str) -> Option<f64> {
        self.class_names.iter().position(|n| n == name).map(|i| self.per_class[i])
    }

    /// Mean of the per-class means over a subset of classes.
    pub fn subset_miou(&self, names: &[String]) -> Option<f64> {
        let v: Option<Vec<f64>> = names.iter().map(|n| self.class_iou(n)).collect();
        let v = v?;
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Slice-wise labelmap prediction reassembled to the original plane.
pub fn predict_volume(model: &Model<f32>, vol: &PreparedVolume, classes: &[ClassRef]) -> Result<LabelVolume> {
    let maps = vol
        .slices
        .iter()
        .map(|s| model.predict_labelmap(&s.image, &s.features, classes))
        .collect::<Result<Vec<_>>>()?;
    reassemble_volume(&maps, vol.gt.depth(), vol.gt.plane())
}

/// Volumetric IoU of the listed classes, averaged per volume then over
/// volumes.
pub fn evaluate(model: &Model<f32>, vols: &[PreparedVolume], classes: &[ClassRef]) -> Result<EvalReport> {
    if vols.is_empty() {
        return Err(Error::InvalidInput("evaluation over zero volumes".into()));
    }
    let max_id = classes.iter().map(|c| c.1 as usize).max().unwrap_or(0);
    let mut per_volume = Vec::with_capacity(vols.len());
    for v in vols {
        let pred = predict_volume(model, v, classes)?;
        let k = max_id.max(v.gt.data().iter().copied().max().unwrap_or(0) as usize);
        let r = volume_miou(&pred, &v.gt, k)?;
        let per_class: Vec<f64> = classes.iter().map(|c| r.per_class[c.1 as usize - 1]).collect();
        let miou = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
        per_volume.push(VolumeScore {
            volume_id: v.volume_id.clone(),
            per_class,
            miou,
        });
    }
    let n = per_volume.len() as f64;
    let per_class = (0..classes.len())
        .map(|i| per_volume.iter().map(|s| s.per_class[i]).sum::<f64>() / n)
        .collect();
    let miou = per_volume.iter().map(|s| s.miou).sum::<f64>() / n;
    Ok(EvalReport {
        class_names: classes.iter().map(|c| c.0.clone()).collect(),
        per_volume,
        per_class,
        miou,
    })
}

/// True iff the best of the last `patience` values falls short of
/// `(1 + min_rel)` times the best value before that window.
pub fn early_stop(history: &[f64], patience: usize, min_rel: f64) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let before = history[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let recent = history[split..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    recent < (1.0 + min_rel) * before
}

/// Loss of one batch and one optimizer step. Every image runs every class in
/// `classes`; the loss is the mean over (image, class) pairs.
pub fn training_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    batch: &[&PreparedSlice],
    classes: &[ClassRef],
    loss: &LossConfig,
    grad_clip: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let mut grads: Grads<f32> = IndexMap::new();
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let l = model.loss(&mut g, &s.image, &s.features, &s.labels, classes, loss)?;
        let lv = g.scalar(l);
        if !lv.is_finite() {
            return Err(Error::Numerical(format!(
                "loss {lv} on batch item {i}; classes {:?}; image finite: {}; features finite: {}; \
                 trainable parameters finite: {}",
                classes.iter().map(|c| &c.0).collect::<Vec<_>>(),
                s.image.tensor.is_finite(),
                s.features.grid.is_finite(),
                params_finite(model)
            )));
        }
        total += lv as f64;
        g.backward(l)?;
        for (name, grad) in g.param_grads() {
            let Some(grad) = grad else { continue };
            match grads.get_mut(name) {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += v * scale;
                    }
                }
                None => {
                    grads.insert(name.to_string(), grad.map(|v| v * scale));
                }
            }
        }
    }
    let norm = clip_global_norm(&mut grads, grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm {norm} at optimizer step {}", opt.step + 1)));
    }
    opt.step(model, &grads)?;
    Ok(total / batch.len() as f64)
}

fn params_finite(model: &Model<f32>) -> bool {
    let mut ok = true;
    model.visit_params(|_, t, _| ok &= t.is_finite());
    ok
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
}

/// Serializable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string (JSON numbers are not wide
    /// enough).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Data(format!("bad RNG word position `{}`", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Sampling RNG for a training seed; kept apart from the weight-init stream.
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Mutable training state; everything needed to resume exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub classes: Vec<ClassRef>,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestSnapshot>,
    pub epoch_seconds: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_miou: f64,
    pub model: Model<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub wall_seconds: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model<f32>, classes: Vec<ClassRef>) -> Self {
        Self {
            opt: AdamW::new(cfg.lr, cfg.weight_decay),
            rng: sampling_rng(cfg.seed),
            cfg,
            model,
            classes,
            history: Vec::new(),
            best: None,
            epoch_seconds: Vec::new(),
        }
    }

    pub fn epoch(&self) -> usize {
        self.history.last().map_or(0, |r| r.epoch)
    }

    pub fn step(&mut self, batch: &[&PreparedSlice]) -> Result<f64> {
        training_step(
            &mut self.model,
            &mut self.opt,
            batch,
            &self.classes,
            &self.cfg.loss,
            self.cfg.grad_clip,
        )
    }

    /// One epoch of `iters_per_epoch` uniformly sampled batches followed by
    /// validation. Returns the new record.
    pub fn run_epoch(&mut self, train: &[&PreparedSlice], val: &[PreparedVolume]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::InvalidInput("no training slices".into()));
        }
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        for _ in 0..self.cfg.iters_per_epoch {
            let batch: Vec<&PreparedSlice> = (0..self.cfg.batch_size)
                .map(|_| train[self.rng.random_range(0..train.len())])
                .collect();
            loss_sum += self.step(&batch)?;
        }
        let report = evaluate(&self.model, val, &self.classes)?;
        let rec = EpochRecord {
            epoch: self.epoch() + 1,
            train_loss: loss_sum / self.cfg.iters_per_epoch as f64,
            val_miou: report.miou,
        };
        self.history.push(rec.clone());
        if self.best.as_ref().is_none_or(|b| rec.val_miou > b.val_miou) {
            self.best = Some(BestSnapshot {
                epoch: rec.epoch,
                val_miou: rec.val_miou,
                model: self.model.clone(),
            });
        }
        self.epoch_seconds.push(t0.elapsed().as_secs_f64());
        log::info!(
            "epoch {:>3}  loss {:.4}  val mIoU {:.4}  ({:.1}s)",
            rec.epoch,
            rec.train_loss,
            rec.val_miou,
            t0.elapsed().as_secs_f64()
        );
        Ok(rec)
    }

    /// Epochs until `max_epochs` (counted across resumes) or early stop.
    pub fn fit(&mut self, train: &[&PreparedSlice], val: &[PreparedVolume]) -> Result<FitSummary> {
        let t0 = Instant::now();
        let start_epoch = self.epoch();
        let mut stopped_early = false;
        while self.epoch() < self.cfg.max_epochs {
            self.run_epoch(train, val)?;
            let vals: Vec<f64> = self.history.iter().map(|r| r.val_miou).collect();
            if early_stop(&vals, self.cfg.patience, self.cfg.min_rel_improvement) {
                stopped_early = true;
                log::info!("early stop after epoch {}", self.epoch());
                break;
            }
        }
        let best = self.best.as_ref().ok_or_else(|| Error::InvalidInput("no epochs were run".into()))?;
        Ok(FitSummary {
            epochs_run: self.epoch() - start_epoch,
            stopped_early,
            best_epoch: best.epoch,
            best_val_miou: best.val_miou,
            wall_seconds: t0.elapsed().as_secs_f64(),
        })
    }
}

/// A dataset split into a train/validation pool and a held-out test set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub pool: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
}

/// Offset between pool and test volume seeds, so the two never overlap.
pub const TEST_SEED_OFFSET: u64 = 10_000;

/// Synthetic pool (`syn_000`, ...) and held-out test set (`syn_test_000`, ...).
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    let gen = |prefix: &str, base: u64, n: usize| -> Result<Vec<LabeledVolume>> {
        (0..n)
            .map(|i| {
                let mut v = generate_synthetic_volume(base + i as u64, cfg.classes, cfg.shape)?;
                v.volume_id = format!("{prefix}{i:03}");
                Ok(v)
            })
            .collect()
    };
    Ok(Dataset {
        name: "synthetic".into(),
        class_names: synthetic_class_names(cfg.classes),
        pool: gen("syn_", cfg.seed, cfg.volumes)?,
        test: gen("syn_test_", cfg.seed + TEST_SEED_OFFSET, cfg.test_volumes)?,
    })
}

/// A dataset with frozen features already extracted.
pub struct PreparedDataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub shape: ModelShape,
    pub backbone_fingerprint: u64,
    pub pool: Vec<PreparedVolume>,
    pub test: Vec<PreparedVolume>,
}

impl PreparedDataset {
    pub fn new(ds: &Dataset, backbone: &dyn Backbone, cfg: &RunConfig) -> Result<Self> {
        let axis = cfg.data.slice_axis;
        Ok(Self {
            name: ds.name.clone(),
            class_names: ds.class_names.clone(),
            shape: model_shape(backbone, &cfg.preprocess),
            backbone_fingerprint: backbone.fingerprint(),
            pool: prepare_volumes(&ds.pool, backbone, &cfg.preprocess, axis)?,
            test: prepare_volumes(&ds.test, backbone, &cfg.preprocess, axis)?,
        })
    }

    pub fn split(&self, seed: u64) -> Result<DatasetSplit> {
        let ids: Vec<String> = self.pool.iter().map(|v| v.volume_id.clone()).collect();
        make_split(&ids, seed)
    }

    /// Training slices and validation volumes for a split.
    pub fn partition(&self, split: &DatasetSplit) -> (Vec<&PreparedSlice>, Vec<PreparedVolume>) {
        let train = self
            .pool
            .iter()
            .filter(|v| split.train_ids.contains(&v.volume_id))
            .flat_map(|v| v.slices.iter())
            .collect();
        let val = self
            .pool
            .iter()
            .filter(|v| split.val_ids.contains(&v.volume_id))
            .cloned()
            .collect();
        (train, val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model_kind: String,
    pub seed: u64,
    pub per_class_iou: IndexMap<String, f64>,
    pub miou: f64,
    pub epochs_run: usize,
}

impl MetricsReport {
    pub fn from_eval(dataset: &str, model_kind: &str, seed: u64, epochs_run: usize, r: &EvalReport) -> Self {
        Self {
            dataset: dataset.to_string(),
            model_kind: model_kind.to_string(),
            seed,
            per_class_iou: r.class_names.iter().cloned().zip(r.per_class.iter().copied()).collect(),
            miou: r.miou,
            epochs_run,
        }
    }
}

/// Outcome of one seeded run.
pub struct RunResult {
    pub seed: u64,
    pub split: DatasetSplit,
    pub trainer: Trainer,
    pub summary: FitSummary,
    /// Test-set evaluation of the best-validation weights.
    pub test: EvalReport,
    pub metrics: MetricsReport,
}

impl RunResult {
    pub fn best_model(&self) -> &Model<f32> {
        &self.trainer.best.as_ref().expect("fit ran at least one epoch").model
    }
}

/// Builds a fresh model and trains it with seed `seed` (weights, split and
/// sampling all derive from it).
pub fn train_seed(cfg: &RunConfig, data: &PreparedDataset, seed: u64) -> Result<RunResult> {
    if cfg.train.stage == Stage::Stage2 {
        return Err(Error::config("train.stage", "stage2 runs start from a checkpoint via label expansion"));
    }
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let classes = stage_classes(&tcfg, &data.class_names)?;
    let names: Vec<String> = classes.iter().map(|c| c.0.clone()).collect();
    let model = Model::new(&cfg.model, data.shape, &names, seed)?;
    let trainer = Trainer::new(tcfg, model, classes);
    fit_and_test(trainer, data, seed)
}

/// Continues `trainer` on the split for `seed` and evaluates the best
/// weights on the test set.
pub fn fit_and_test(mut trainer: Trainer, data: &PreparedDataset, seed: u64) -> Result<RunResult> {
    let split = data.split(seed)?;
    let (train, val) = data.partition(&split);
    let summary = trainer.fit(&train, &val)?;
    let best = &trainer.best.as_ref().expect("fit ran").model;
    let test = evaluate(best, &data.test, &trainer.classes)?;
    let metrics = MetricsReport::from_eval(
        &data.name,
        trainer.model.kind().as_str(),
        seed,
        trainer.epoch(),
        &test,
    );
    Ok(RunResult {
        seed,
        split,
        trainer,
        summary,
        test,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dataset: String,
    pub model_kind: String,
    pub seeds: Vec<u64>,
    pub miou_mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub miou_std: f64,
    pub per_class_mean: IndexMap<String, f64>,
    pub per_class_std: IndexMap<String, f64>,
    pub runs: Vec<MetricsReport>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn aggregate(runs: &[MetricsReport]) -> Result<AggregateReport> {
    let first = runs.first().ok_or_else(|| Error::InvalidInput("aggregate of zero runs".into()))?;
    let mious: Vec<f64> = runs.iter().map(|r| r.miou).collect();
    let (miou_mean, miou_std) = mean_std(&mious);
    let mut per_class_mean = IndexMap::new();
    let mut per_class_std = IndexMap::new();
    for name in first.per_class_iou.keys() {
        let v: Vec<f64> = runs.iter().filter_map(|r| r.per_class_iou.get(name).copied()).collect();
        let (m, s) = mean_std(&v);
        per_class_mean.insert(name.clone(), m);
        per_class_std.insert(name.clone(), s);
    }
    Ok(AggregateReport {
        dataset: first.dataset.clone(),
        model_kind: first.model_kind.clone(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        miou_mean,
        miou_std,
        per_class_mean,
        per_class_std,
        runs: runs.to_vec(),
    })
}

/// Seeded runs, one after another.
pub fn train_seeds(cfg: &RunConfig, data: &PreparedDataset, seeds: &[u64]) -> Result<(Vec<RunResult>, AggregateReport)> {
    let runs = seeds
        .iter()
        .map(|&s| train_seed(cfg, data, s))
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<MetricsReport> = runs.iter().map(|r| r.metrics.clone()).collect();
    let agg = aggregate(&metrics)?;
    Ok((runs, agg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub dataset: String,
    pub seed: u64,
    pub old_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub per_class_iou: IndexMap<String, f64>,
    pub old_miou: f64,
    pub new_miou: f64,
    pub miou: f64,
    pub stage2_epochs: usize,
    pub stage2_seconds: f64,
}

/// Adds one token per new class to a trained conditioned model, makes every
/// parameter trainable and continues on the full label set with a fresh
/// optimizer.
pub fn expand_labels(
    model: &Model<f32>,
    new_class_names: &[String],
    stage2: &TrainConfig,
    data: &PreparedDataset,
) -> Result<(RunResult, ExpansionReport)> {
    let mut model = model.clone();
    let old = model.class_names();
    if new_class_names.is_empty() {
        return Err(Error::InvalidInput("expansion needs at least one new class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage2.seed);
    rng.set_stream(2);
    for name in new_class_names {
        if old.contains(name) {
            return Err(Error::DuplicateStructure(name.clone()));
        }
        if !data.class_names.contains(name) {
            return Err(Error::UnknownStructure {
                name: name.clone(),
                available: data.class_names.clone(),
            });
        }
        model.add_structure_token(name, &mut rng)?;
    }
    model.set_all_trainable(true);
    let mut cfg = stage2.clone();
    cfg.stage = Stage::Stage2;
    let all = model.class_names();
    let refs = class_refs(&data.class_names);
    let classes: Vec<ClassRef> = refs.into_iter().filter(|c| all.contains(&c.0)).collect();
    let trainer = Trainer::new(cfg, model, classes);
    let seed = stage2.seed;
    let run = fit_and_test(trainer, data, seed)?;
    let subset = |names: &[String]| run.test.subset_miou(names).unwrap_or(f64::NAN);
    let report = ExpansionReport {
        dataset: data.name.clone(),
        seed,
        old_classes: old.clone(),
        new_classes: new_class_names.to_vec(),
        per_class_iou: run.metrics.per_class_iou.clone(),
        old_miou: subset(&old),
        new_miou: subset(new_class_names),
        miou: run.test.miou,
        stage2_epochs: run.summary.epochs_run,
        stage2_seconds: run.summary.wall_seconds,
    };
    Ok((run, report))
}

/// Flattened `[H·W]` mask for a class, for callers that want raw tensors.
pub fn class_target(labels: &LabelSlice, id: u16) -> Tensor<f32> {
    Tensor::new(vec![labels.height, labels.width], labels.binary_mask(id)).expect("mask shape")
}
