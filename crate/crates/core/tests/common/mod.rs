//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vitc_unet::backbone::{FeatureGrid, PreparedImage};
use vitc_unet::config::RunConfig;
use vitc_unet::data::LabelSlice;
use vitc_unet::model::{ModelConfig, ModelKind, ModelShape};
use vitc_unet::tensor::Tensor;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn desk_config() -> RunConfig {
    RunConfig::load(&repo_root().join("configs/desk.toml"), &[]).expect("desk config")
}

/// Small geometry for gradient and structure checks.
pub fn toy_model_config(kind: ModelKind) -> ModelConfig {
    let mut cfg = ModelConfig {
        kind,
        ..ModelConfig::default()
    };
    cfg.decoder.dim = 8;
    cfg.decoder.heads = 2;
    cfg.decoder.blocks = 2;
    cfg.decoder.mlp_ratio = 2;
    cfg.unet.levels = 3;
    cfg.unet.base_channels = 3;
    cfg.unet.max_channels = 8;
    cfg.unet.fusion_channels = 4;
    cfg
}

pub const TOY_SHAPE: ModelShape = ModelShape {
    feat_dim: 6,
    grid: (4, 4),
    input_size: 16,
};

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> PreparedImage {
    let plane: Vec<f32> = (0..size * size).map(|_| rng.random_range(-1.5f32..1.5)).collect();
    let mut data = plane.clone();
    data.extend_from_slice(&plane);
    data.extend_from_slice(&plane);
    PreparedImage {
        tensor: Tensor::new(vec![3, size, size], data).unwrap(),
    }
}

pub fn random_features(rng: &mut ChaCha8Rng, shape: ModelShape) -> FeatureGrid {
    let (gh, gw) = shape.grid;
    let n = gh * gw * shape.feat_dim;
    FeatureGrid {
        grid: Tensor::new(vec![gh, gw, shape.feat_dim], (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .unwrap(),
        patch_size: shape.input_size / gh,
        backbone_id: "test".into(),
    }
}

/// Labels with two rectangles, ids 1 and 2.
pub fn two_box_labels(size: usize) -> LabelSlice {
    let mut l = vec![0u16; size * size];
    for y in 0..size {
        for x in 0..size {
            if (2..7).contains(&y) && (3..9).contains(&x) {
                l[y * size + x] = 1;
            } else if (9..14).contains(&y) && (8..14).contains(&x) {
                l[y * size + x] = 2;
            }
        }
    }
    LabelSlice::new(size, size, l).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central differences over a ladder of steps, returning the estimate from
/// the adjacent pair that agrees best. A step that straddles a kink (leaky
/// ReLU) disagrees with its neighbours and is passed over.
pub fn ladder_difference(mut f: impl FnMut(f64) -> f64, x: f64, steps: &[f64]) -> f64 {
    let d: Vec<f64> = steps.iter().map(|&h| central_difference(&mut f, x, h)).collect();
    let k = (0..d.len() - 1)
        .min_by(|&a, &b| (d[a] - d[a + 1]).abs().total_cmp(&(d[b] - d[b + 1]).abs()))
        .expect("at least two steps");
    d[k + 1]
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Reference for "relative improvement of `min_rel` over a `patience`
/// epoch plateau": training continues while some value in the last
/// `patience` epochs beats every earlier value by the relative margin.
pub fn early_stop_reference(history: &[f64], patience: usize, min_rel: f64) -> bool {
    let n = history.len();
    if n <= patience {
        return false;
    }
    let window_start = n - patience;
    for i in window_start..n {
        let mut beats_all = true;
        for j in 0..window_start {
            if history[i] < (1.0 + min_rel) * history[j] {
                beats_all = false;
                break;
            }
        }
        if beats_all {
            return false;
        }
    }
    true
}

/// Plain binary cross-entropy, no clamping, for probabilities in (0, 1).
pub fn bce_reference(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum::<f64>()
        / n
}

/// Validates `value` against the subset of JSON Schema used by the files in
/// `schemas/`: type, enum, required, properties, additionalProperties,
/// items, prefixItems, minItems, maxItems, minimum, maximum and relative
/// file `$ref`s.
pub fn validate_schema(value: &Value, schema_path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(schema_path).map_err(|e| format!("{}: {e}", schema_path.display()))?;
    let schema: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    check(value, &schema, schema_path.parent().unwrap(), "$")
}

fn type_ok(v: &Value, t: &str) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "integer" => v.is_i64() || v.is_u64(),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        _ => false,
    }
}

fn check(v: &Value, s: &Value, dir: &Path, at: &str) -> Result<(), String> {
    if let Some(r) = s.get("$ref").and_then(Value::as_str) {
        return validate_schema(v, &dir.join(r)).map_err(|e| format!("{at}: {e}"));
    }
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_ok(v, t),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_ok(v, t)),
            _ => false,
        };
        if !ok {
            return Err(format!("{at}: {v} is not of type {t}"));
        }
    }
    if let Some(e) = s.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{at}: {v} not in {e:?}"));
        }
    }
    if let Some(x) = v.as_f64() {
        if s.get("minimum").and_then(Value::as_f64).is_some_and(|m| x < m) {
            return Err(format!("{at}: {x} below minimum"));
        }
        if s.get("maximum").and_then(Value::as_f64).is_some_and(|m| x > m) {
            return Err(format!("{at}: {x} above maximum"));
        }
    }
    if let Some(obj) = v.as_object() {
        for r in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = r.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{at}: missing `{key}`"));
            }
        }
        let props = s.get("properties").and_then(Value::as_object);
        for (k, child) in obj {
            let path = format!("{at}.{k}");
            match props.and_then(|p| p.get(k)) {
                Some(ps) => check(child, ps, dir, &path)?,
                None => match s.get("additionalProperties") {
                    Some(Value::Bool(false)) => return Err(format!("{at}: unexpected `{k}`")),
                    Some(ap @ Value::Object(_)) => check(child, ap, dir, &path)?,
                    _ => {}
                },
            }
        }
    }
    if let Some(arr) = v.as_array() {
        if s.get("minItems").and_then(Value::as_u64).is_some_and(|m| (arr.len() as u64) < m) {
            return Err(format!("{at}: fewer than minItems"));
        }
        if s.get("maxItems").and_then(Value::as_u64).is_some_and(|m| (arr.len() as u64) > m) {
            return Err(format!("{at}: more than maxItems"));
        }
        let prefix = s.get("prefixItems").and_then(Value::as_array);
        for (i, child) in arr.iter().enumerate() {
            let path = format!("{at}[{i}]");
            match prefix.and_then(|p| p.get(i)) {
                Some(ps) => check(child, ps, dir, &path)?,
                None => {
                    if let Some(items) = s.get("items") {
                        check(child, items, dir, &path)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn schema(name: &str) -> PathBuf {
    repo_root().join("schemas").join(name)
}

pub fn validate_file(json_path: &Path, schema_name: &str) {
    let text = std::fs::read_to_string(json_path).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    if let Err(e) = validate_schema(&v, &schema(schema_name)) {
        panic!("{} against {schema_name}: {e}", json_path.display());
    }
}
