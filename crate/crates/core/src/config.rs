//! Run configuration: TOML on disk, dotted-key overrides from the command
//! line, and validation that reports the offending field path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PreprocessConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::objectives::LossConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// All dataset classes from the start.
    #[default]
    Joint,
    /// Only the first half of the classes (or `stage1_classes`).
    Stage1,
    /// Continuation after label expansion; only reachable through `expand`.
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub iters_per_epoch: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub stage: Stage,
    /// Explicit stage-1 class subset; defaults to the first half.
    pub stage1_classes: Option<Vec<String>>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 8,
            max_epochs: 100,
            iters_per_epoch: 50,
            patience: 10,
            min_rel_improvement: 0.01,
            seed: 0,
            grad_clip: 1.0,
            stage: Stage::Joint,
            stage1_classes: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let pos = |ok: bool, field: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{prefix}.{field}"), "must be positive"))
            }
        };
        pos(self.lr > 0.0 && self.lr.is_finite(), "lr")?;
        pos(self.batch_size > 0, "batch_size")?;
        pos(self.max_epochs > 0, "max_epochs")?;
        pos(self.iters_per_epoch > 0, "iters_per_epoch")?;
        pos(self.patience >= 1, "patience")?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{prefix}.weight_decay"), "must be non-negative"));
        }
        if !(self.min_rel_improvement >= 0.0) {
            return Err(Error::config(format!("{prefix}.min_rel_improvement"), "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config(format!("{prefix}.grad_clip"), "must be non-negative (0 disables)"));
        }
        self.loss.validate(&format!("{prefix}.loss"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Train + validation pool size.
    pub volumes: usize,
    pub test_volumes: usize,
    pub classes: usize,
    /// `[depth, height, width]`.
    pub shape: [usize; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            volumes: 40,
            test_volumes: 10,
            classes: 3,
            shape: [12, 96, 96],
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Axis the volumes are sliced along.
    pub slice_axis: usize,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.slice_axis > 2 {
            return Err(Error::config("data.slice_axis", "must be 0, 1 or 2"));
        }
        let s = &self.data.synthetic;
        if !(1..=crate::data::MAX_SYNTHETIC_CLASSES).contains(&s.classes) {
            return Err(Error::config("data.synthetic.classes", "must lie in 1..=8"));
        }
        if s.volumes < 2 {
            return Err(Error::config("data.synthetic.volumes", "at least 2 are needed for a split"));
        }
        if s.shape.iter().any(|&d| d < 8) {
            return Err(Error::config("data.synthetic.shape", "every extent must be at least 8"));
        }
        self.backbone.validate("backbone")?;
        let size = self.preprocess.input_size;
        if size == 0 || size % self.backbone.patch_size != 0 {
            return Err(Error::config(
                "preprocess.input_size",
                format!("must be a positive multiple of backbone.patch_size = {}", self.backbone.patch_size),
            ));
        }
        if let Some([lo, hi]) = self.preprocess.window {
            if !(lo < hi) {
                return Err(Error::config("preprocess.window", "lower bound must be below upper bound"));
            }
        }
        self.model.validate("model")?;
        let m = self.model.unet.size_multiple();
        if self.model.kind != ModelKind::Linear && size % m != 0 {
            return Err(Error::config(
                "preprocess.input_size",
                format!("must be divisible by {m} for {} UNet levels", self.model.unet.levels),
            ));
        }
        self.train.validate("train")
    }

    /// Parses TOML, applies `key.path=value` overrides, deserializes and
    /// validates. `origin` only labels error messages.
    pub fn from_toml_str(text: &str, overrides: &[String], origin: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(origin, e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(table).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`, where value is parsed as a TOML value when possible and as
/// a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{item}` is not of the form key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key.trim(), format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
