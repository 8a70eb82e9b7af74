//! Trains the conditioned model and both baselines on the same prepared data
//! and seeds, then prints mean ± std test mIoU for each.
//!
//! cargo run --release --example compare_baselines -- 0,1 train.max_epochs=5

use std::path::Path;

use vitc_unet::backbone::build_backbone;
use vitc_unet::config::RunConfig;
use vitc_unet::model::ModelKind;
use vitc_unet::train::{synthetic_dataset, train_seeds, PreparedDataset};

fn main() -> vitc_unet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: Vec<u64> = args
        .first()
        .map(|s| s.split(',').map(|x| x.trim().parse().expect("seed list like 0,1,2")).collect())
        .unwrap_or_else(|| vec![0]);
    let overrides = args.get(1..).unwrap_or(&[]).to_vec();
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"), &overrides)?;
    let backbone = build_backbone(&cfg.backbone)?;
    let data = PreparedDataset::new(&synthetic_dataset(&cfg.data.synthetic)?, backbone.as_ref(), &cfg)?;
    for kind in [ModelKind::Linear, ModelKind::Hybrid, ModelKind::VitcUnet] {
        let mut c = cfg.clone();
        c.model.kind = kind;
        let (runs, agg) = train_seeds(&c, &data, &seeds)?;
        let secs: f64 = runs.iter().map(|r| r.summary.wall_seconds).sum();
        println!("{:>10}  mIoU {:.4} ± {:.4}  ({:.0}s)", kind.as_str(), agg.miou_mean, agg.miou_std, secs);
        for (name, m) in &agg.per_class_mean {
            println!("{:>22}  {m:.4}", name);
        }
    }
    Ok(())
}
