//! KoLeo spread of the conditioned trajectory at each decoder level, for a
//! freshly initialised model and for hand-placed point sets.
//!
//! cargo run --release --example koleo_diagnostic

use std::path::Path;

use vitc_unet::backbone::{build_backbone, preprocess};
use vitc_unet::conditioning::{koleo, trajectory_koleo};
use vitc_unet::config::RunConfig;
use vitc_unet::data::{generate_synthetic_volume, slice_volume};
use vitc_unet::model::Model;
use vitc_unet::train::model_shape;

fn main() -> vitc_unet::Result<()> {
    println!("two points at distance 1: {}", koleo(&[vec![0.0], vec![1.0]])? + 0.0);
    println!("points 0, 1, 3 on a line: {:.6}", koleo(&[vec![0.0], vec![1.0], vec![3.0]])?);
    println!("collapsed pair:           {:.3}", koleo(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]])?);

    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"), &[])?;
    let backbone = build_backbone(&cfg.backbone)?;
    let names = vec!["ellipsoid".to_string(), "box".to_string()];
    let model: Model<f32> = Model::new(&cfg.model, model_shape(backbone.as_ref(), &cfg.preprocess), &names, 0)?;
    let vol = generate_synthetic_volume(3, 2, [12, 96, 96])?;
    let (slice, _) = &slice_volume(&vol)?[6];
    let feats = backbone.extract_features(&preprocess(slice, &cfg.preprocess, backbone.patch_size())?)?;
    let (decoder, tokens) = (model.decoder().unwrap(), model.tokens().unwrap());
    for name in &names {
        let traj = decoder.condition(&model.store, tokens, &feats, name)?;
        let k: Vec<String> = trajectory_koleo(&traj)?.iter().map(|v| format!("{v:.3}")).collect();
        println!("{name:>10}  koleo per level {}", k.join("  "));
    }
    Ok(())
}
