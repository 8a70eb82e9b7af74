//! Prints the full default run configuration, or a config file with
//! overrides applied.
//!
//! cargo run --example show_config -- configs/desk.toml train.lr=3e-4

use std::path::Path;

use vitc_unet::config::RunConfig;

fn main() -> vitc_unet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.split_first() {
        Some((path, overrides)) => RunConfig::load(Path::new(path), overrides)?,
        None => RunConfig::default(),
    };
    print!("{}", cfg.to_toml());
    Ok(())
}
