//! Trains on the synthetic dataset and prints the per-epoch history and the
//! held-out test scores.
//!
//! cargo run --release --example train_synthetic -- configs/desk.toml train.max_epochs=5

use std::path::Path;

use vitc_unet::backbone::build_backbone;
use vitc_unet::config::RunConfig;
use vitc_unet::train::{synthetic_dataset, train_seed, PreparedDataset};

fn main() -> vitc_unet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let path = args.first().map(Path::new).unwrap_or(&desk);
    let cfg = RunConfig::load(path, &args[1.min(args.len())..])?;
    let backbone = build_backbone(&cfg.backbone)?;
    let t0 = std::time::Instant::now();
    let data = PreparedDataset::new(&synthetic_dataset(&cfg.data.synthetic)?, backbone.as_ref(), &cfg)?;
    println!("features cached in {:.1}s", t0.elapsed().as_secs_f64());
    let run = train_seed(&cfg, &data, cfg.train.seed)?;
    for r in &run.trainer.history {
        println!("epoch {:>3}  loss {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_miou);
    }
    for (name, iou) in &run.metrics.per_class_iou {
        println!("{name:>10}  {iou:.4}");
    }
    println!("test mIoU {:.4}  best epoch {}  {:.0}s", run.test.miou, run.summary.best_epoch, run.summary.wall_seconds);
    Ok(())
}
