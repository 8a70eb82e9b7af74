//! Trains on the first half of a 4-class task, adds tokens for the rest and
//! fine-tunes, then reports old and new class scores separately.
//!
//! cargo run --release --example expand_labels -- train.max_epochs=6

use std::path::Path;

use vitc_unet::backbone::build_backbone;
use vitc_unet::config::{RunConfig, Stage};
use vitc_unet::train::{expand_labels, synthetic_dataset, train_seed, PreparedDataset};

fn main() -> vitc_unet::Result<()> {
    let mut overrides = vec!["data.synthetic.classes=4".to_string()];
    overrides.extend(std::env::args().skip(1));
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"), &overrides)?;
    let backbone = build_backbone(&cfg.backbone)?;
    let data = PreparedDataset::new(&synthetic_dataset(&cfg.data.synthetic)?, backbone.as_ref(), &cfg)?;

    let mut stage1 = cfg.clone();
    stage1.train.stage = Stage::Stage1;
    let run = train_seed(&stage1, &data, cfg.train.seed)?;
    let old = run.best_model().class_names();
    println!("stage 1 on {old:?}: test mIoU {:.4}", run.test.miou);

    let new: Vec<String> = data.class_names.iter().filter(|n| !old.contains(n)).cloned().collect();
    let (_, report) = expand_labels(run.best_model(), &new, &cfg.train, &data)?;
    println!("stage 2 added {new:?} in {} epochs", report.stage2_epochs);
    for (name, iou) in &report.per_class_iou {
        println!("{name:>10}  {iou:.4}");
    }
    println!("old {:.4}  new {:.4}  all {:.4}", report.old_miou, report.new_miou, report.miou);
    Ok(())
}
