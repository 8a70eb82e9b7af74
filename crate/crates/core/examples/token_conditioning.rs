//! Queries one image with several structure tokens, then adds a token and
//! checks that the existing tokens' masks do not move.
//!
//! cargo run --release --example token_conditioning

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitc_unet::backbone::{build_backbone, preprocess};
use vitc_unet::config::RunConfig;
use vitc_unet::data::{generate_synthetic_volume, slice_volume};
use vitc_unet::model::Model;
use vitc_unet::train::model_shape;

fn main() -> vitc_unet::Result<()> {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"), &[])?;
    let backbone = build_backbone(&cfg.backbone)?;
    let names: Vec<String> = ["ellipsoid", "box", "tube"].map(String::from).to_vec();
    let mut model: Model<f32> = Model::new(&cfg.model, model_shape(backbone.as_ref(), &cfg.preprocess), &names, 0)?;
    println!("{} output channel(s) for {} classes", model.output_channels(), names.len());

    let vol = generate_synthetic_volume(5, 3, [12, 96, 96])?;
    let (slice, _) = &slice_volume(&vol)?[6];
    let image = preprocess(slice, &cfg.preprocess, backbone.patch_size())?;
    let feats = backbone.extract_features(&image)?;

    let before: Vec<_> = names.iter().map(|n| model.class_logits(&image, &feats, n)).collect::<Result<_, _>>()?;
    for (n, l) in names.iter().zip(&before) {
        let mean = l.data().iter().sum::<f32>() / l.data().len() as f32;
        println!("{n:>10}  mean logit {mean:+.4}");
    }
    let gap = before[0].data().iter().zip(before[1].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("max |ellipsoid - box| logit gap {gap:.4}");

    model.add_structure_token("shell", &mut ChaCha8Rng::seed_from_u64(9))?;
    for (n, l) in names.iter().zip(&before) {
        let after = model.class_logits(&image, &feats, n)?;
        println!("{n:>10}  unchanged after adding `shell`: {}", after.data() == l.data());
    }
    let shell = model.class_logits(&image, &feats, "shell")?;
    println!("     shell  {} logits from the same decoder", shell.data().len());
    Ok(())
}
