//! Writes a synthetic phantom dataset to disk as NIfTI, reads it back and
//! prints per-class voxel counts.
//!
//! cargo run --release --example generate_dataset -- /tmp/phantoms

use std::path::PathBuf;

use vitc_unet::config::SyntheticConfig;
use vitc_unet::io::{load_dataset_dir, write_dataset_dir};
use vitc_unet::train::synthetic_dataset;

fn main() -> vitc_unet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("phantoms"));
    let cfg = SyntheticConfig {
        volumes: 6,
        test_volumes: 2,
        classes: 4,
        shape: [12, 64, 64],
        seed: 1000,
    };
    let ds = synthetic_dataset(&cfg)?;
    let manifest = write_dataset_dir(&out, &ds, "nii.gz")?;
    println!("manifest at {}", manifest.display());

    let back = load_dataset_dir(&out)?;
    println!("classes {:?}", back.class_names);
    for v in back.pool.iter().chain(&back.test) {
        let mut counts = vec![0usize; back.class_names.len() + 1];
        for &l in v.labels.data() {
            counts[l as usize] += 1;
        }
        println!("{:>14}  {:?}  voxels per label {:?}", v.volume_id, v.labels.shape(), counts);
    }
    Ok(())
}
