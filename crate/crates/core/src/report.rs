//! Artifacts: JSON reports, history CSV, run manifests and PNG overlays.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::EpochRecord;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// `epoch,train_loss,val_miou`, one row per epoch.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seeds: Vec<u64>,
    pub git_hash: Option<String>,
    pub crate_version: String,
    pub started_unix: u64,
    /// Seconds per named phase.
    pub timings: IndexMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            args,
            seeds,
            git_hash: git_hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            timings: IndexMap::new(),
        }
    }
}

/// HEAD of the enclosing git checkout, if there is one.
pub fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Overlay colours by label id; id 0 is never drawn and ids past the end
/// wrap around from 1.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn label_color(id: u16) -> Option<[u8; 3]> {
    (id > 0).then(|| PALETTE[(id as usize - 1) % PALETTE.len()])
}

pub const OVERLAY_ALPHA: f32 = 0.5;

/// Min-max scaled grayscale slice with labelled pixels blended in colour.
pub fn overlay_rgb(height: usize, width: usize, pixels: &[f32], labels: &[u16]) -> Result<image::RgbImage> {
    let n = height * width;
    if pixels.len() != n || labels.len() != n {
        return Err(Error::shape(format!(
            "overlay of {height}x{width} with {} pixels and {} labels",
            pixels.len(),
            labels.len()
        )));
    }
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let g = ((pixels[i] - lo) / span * 255.0).clamp(0.0, 255.0);
        let rgb = match label_color(labels[i]) {
            Some(c) => c.map(|c| ((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * c as f32).round() as u8),
            None => [g.round() as u8; 3],
        };
        *px = image::Rgb(rgb);
    }
    Ok(img)
}

pub fn write_overlay_png(path: &Path, height: usize, width: usize, pixels: &[f32], labels: &[u16]) -> Result<()> {
    overlay_rgb(height, width, pixels, labels)?
        .save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
