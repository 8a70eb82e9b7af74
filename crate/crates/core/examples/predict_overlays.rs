//! Trains briefly, round-trips the model through a checkpoint, predicts a
//! test volume and writes a label map volume plus one overlay PNG per slice.
//!
//! cargo run --release --example predict_overlays -- /tmp/overlays

use std::path::{Path, PathBuf};

use vitc_unet::backbone::build_backbone;
use vitc_unet::checkpoint::Checkpoint;
use vitc_unet::config::RunConfig;
use vitc_unet::io::{write_volume, VoxelData};
use vitc_unet::objectives::volume_miou;
use vitc_unet::report::write_overlay_png;
use vitc_unet::train::{class_refs, predict_volume, synthetic_dataset, train_seed, PreparedDataset};

fn main() -> vitc_unet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("overlays"));
    std::fs::create_dir_all(&out).map_err(|e| vitc_unet::Error::io(&out, e))?;
    let overrides = ["train.max_epochs=3".to_string()];
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"), &overrides)?;
    let backbone = build_backbone(&cfg.backbone)?;
    let ds = synthetic_dataset(&cfg.data.synthetic)?;
    let data = PreparedDataset::new(&ds, backbone.as_ref(), &cfg)?;
    let run = train_seed(&cfg, &data, 0)?;

    let ckpt = out.join("model.ckpt");
    Checkpoint::of_model(&cfg, &data.name, data.backbone_fingerprint, run.best_model()).save(&ckpt)?;
    let model = Checkpoint::load(&ckpt)?.model;

    let (vol, raw) = (&data.test[0], &ds.test[0]);
    let classes = class_refs(&data.class_names);
    let pred = predict_volume(&model, vol, &classes)?;
    let score = volume_miou(&pred, &vol.gt, classes.len())?;
    println!("{}: mIoU {:.4} per class {:?}", vol.volume_id, score.mean, score.per_class);

    write_volume(&out.join("labelmap.nii.gz"), pred.shape(), &VoxelData::U16(pred.data().to_vec()))?;
    let [d, h, w] = pred.shape();
    for k in 0..d {
        write_overlay_png(&out.join(format!("slice_{k:03}.png")), h, w, raw.intensities.slice(k), pred.slice(k))?;
    }
    println!("wrote labelmap.nii.gz and {d} overlays to {}", out.display());
    Ok(())
}
