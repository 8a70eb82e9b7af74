//! Frozen patch-feature extractors and the image preprocessing they expect.
//!
//! The only bundled extractor is [`SyntheticBackbone`], a small fixed-weight
//! transformer whose weights are drawn from a seed. Real pretrained encoders
//! plug in by implementing [`Backbone`].

use std::hash::{DefaultHasher, Hasher};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::{Linear, Norm, ParamStore};
use crate::tensor::{resize_bilinear, Tensor};

/// Added to the standard deviation during per-slice standardisation.
pub const STANDARDIZE_EPS: f32 = 1e-6;

/// One 2D intensity slice, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    pub height: usize,
    pub width: usize,
    pixels: Vec<f32>,
    pub spacing: Option<[f64; 2]>,
}

impl ImageSlice {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(format!(
                "image slice {height}x{width} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            spacing: None,
        })
    }

    pub fn with_spacing(mut self, spacing: [f64; 2]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

/// Three-channel standardised image at the model input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub tensor: Tensor<f32>,
}

impl PreparedImage {
    pub fn size(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Square side length fed to the backbone and the UNet.
    pub input_size: usize,
    /// Optional intensity window `[lo, hi]` applied before standardisation.
    #[serde(default)]
    pub window: Option<[f32; 2]>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            window: None,
        }
    }
}

/// Window, standardise to zero mean and unit variance, resize bilinearly to
/// `input_size²` and replicate to three channels.
pub fn preprocess(slice: &ImageSlice, cfg: &PreprocessConfig, patch_size: usize) -> Result<PreparedImage> {
    let size = cfg.input_size;
    if patch_size == 0 || size == 0 || size % patch_size != 0 {
        return Err(Error::InvalidInput(format!(
            "input size {size} is not a positive multiple of the patch size {patch_size}"
        )));
    }
    if let Some(i) = slice.pixels.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite intensity at pixel {i}")));
    }
    let mut px: Vec<f64> = slice.pixels.iter().map(|&p| p as f64).collect();
    if let Some([lo, hi]) = cfg.window {
        for p in px.iter_mut() {
            *p = p.clamp(lo as f64, hi as f64);
        }
    }
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let var = px.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + STANDARDIZE_EPS as f64;
    let std: Vec<f32> = px.iter().map(|p| ((p - mean) / denom) as f32).collect();
    let resized = resize_bilinear(&std, 1, slice.height, slice.width, size, size);
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend_from_slice(&resized);
    }
    Ok(PreparedImage {
        tensor: Tensor::new(vec![3, size, size], data)?,
    })
}

/// Patch features, `[gh, gw, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub grid: Tensor<f32>,
    pub patch_size: usize,
    pub backbone_id: String,
}

impl FeatureGrid {
    pub fn gh(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn gw(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.grid.shape()[2]
    }

    /// Row-major `[gh·gw, D]` view.
    pub fn as_rows(&self) -> Tensor<f32> {
        self.grid
            .clone()
            .reshape(&[self.gh() * self.gw(), self.dim()])
            .expect("grid reshape")
    }
}

pub trait Backbone: Send + Sync {
    fn id(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn dim(&self) -> usize;
    fn extract_features(&self, image: &PreparedImage) -> Result<FeatureGrid>;
    /// Hash of every weight; equal before and after training when frozen.
    fn fingerprint(&self) -> u64;
    fn num_parameters(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Synthetic,
    Dinov2S,
    Sam2S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default)]
    pub seed: u64,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Synthetic,
            seed: 0,
            patch_size: 16,
            dim: 384,
            depth: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config(format!("{prefix}.patch_size"), "must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::config(format!("{prefix}.dim"), "must be positive"));
        }
        Ok(())
    }
}

pub fn build_backbone(cfg: &BackboneConfig) -> Result<Arc<dyn Backbone>> {
    cfg.validate("backbone")?;
    match cfg.kind {
        BackboneKind::Synthetic => Ok(Arc::new(SyntheticBackbone::new(
            cfg.seed,
            cfg.patch_size,
            cfg.depth,
            cfg.dim,
        )?)),
        other => Err(Error::config(
            "backbone.kind",
            format!("{other:?} weights are not bundled; provide an implementation of the Backbone trait"),
        )),
    }
}

fn attention_heads(dim: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|h| dim % h == 0).unwrap_or(1)
}

struct MixLayer {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Fixed random patch transformer: linear patch embedding plus 2D sinusoidal
/// positions, then `depth` pre-norm attention/MLP blocks.
pub struct SyntheticBackbone {
    id: String,
    patch: usize,
    dim: usize,
    heads: usize,
    store: ParamStore<f32>,
    embed: Linear,
    layers: Vec<MixLayer>,
    final_norm: Norm,
}

impl SyntheticBackbone {
    pub fn new(seed: u64, patch: usize, depth: usize, dim: usize) -> Result<Self> {
        if patch == 0 || dim == 0 {
            return Err(Error::InvalidInput("backbone patch size and width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, &mut rng, "embed", 3 * patch * patch, dim)?;
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let p = format!("layer{i}");
            layers.push(MixLayer {
                norm1: Norm::new(&mut store, &format!("{p}.norm1"), dim)?,
                q: Linear::new(&mut store, &mut rng, &format!("{p}.q"), dim, dim)?,
                k: Linear::new(&mut store, &mut rng, &format!("{p}.k"), dim, dim)?,
                v: Linear::new(&mut store, &mut rng, &format!("{p}.v"), dim, dim)?,
                o: Linear::new(&mut store, &mut rng, &format!("{p}.o"), dim, dim)?,
                norm2: Norm::new(&mut store, &format!("{p}.norm2"), dim)?,
                fc1: Linear::new(&mut store, &mut rng, &format!("{p}.fc1"), dim, 2 * dim)?,
                fc2: Linear::new(&mut store, &mut rng, &format!("{p}.fc2"), 2 * dim, dim)?,
            });
        }
        let final_norm = Norm::new(&mut store, "final_norm", dim)?;
        for (_, p) in store.iter_mut() {
            p.trainable = false;
        }
        Ok(Self {
            id: format!("synthetic-p{patch}-d{dim}-l{depth}-s{seed}"),
            patch,
            dim,
            heads: attention_heads(dim),
            store,
            embed,
            layers,
            final_norm,
        })
    }

    fn patches(&self, image: &PreparedImage) -> Result<(usize, usize, Tensor<f32>)> {
        let (c, h, w) = match image.tensor.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("prepared image of shape {s:?}"))),
        };
        let p = self.patch;
        if c != 3 || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "image {c}x{h}x{w} does not tile into {p}x{p} patches of 3 channels"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let src = image.tensor.data();
        let row = 3 * p * p;
        let mut out = vec![0.0f32; gh * gw * row];
        for gy in 0..gh {
            for gx in 0..gw {
                let dst = &mut out[(gy * gw + gx) * row..][..row];
                let mut i = 0;
                for ch in 0..3 {
                    for dy in 0..p {
                        let base = ch * h * w + (gy * p + dy) * w + gx * p;
                        dst[i..i + p].copy_from_slice(&src[base..base + p]);
                        i += p;
                    }
                }
            }
        }
        Ok((gh, gw, Tensor::new(vec![gh * gw, row], out)?))
    }
}

/// 2D sinusoidal position code: the first half of the channels encodes the
/// row, the second half the column.
pub fn sinusoidal_positions(gh: usize, gw: usize, dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let freq = |i: usize, width: usize| 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width.max(1) as f64);
    Tensor::from_fn(&[gh * gw, dim], |idx| {
        let (cell, ch) = (idx / dim, idx % dim);
        let (y, x) = ((cell / gw) as f64, (cell % gw) as f64);
        let (pos, i, width) = if ch < half { (y, ch, half) } else { (x, ch - half, dim - half) };
        let a = pos * freq(i, width);
        (if i % 2 == 0 { a.sin() } else { a.cos() }) as f32
    })
}

impl Backbone for SyntheticBackbone {
    fn id(&self) -> &str {
        &self.id
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract_features(&self, image: &PreparedImage) -> Result<FeatureGrid> {
        let (gh, gw, patches) = self.patches(image)?;
        let s = &self.store;
        let mut g = Graph::<f32>::new();
        let x = g.constant(patches);
        let x = self.embed.forward(&mut g, s, x)?;
        let pos = g.constant(sinusoidal_positions(gh, gw, self.dim));
        let mut x = g.add(x, pos)?;
        for l in &self.layers {
            let h = l.norm1.layer(&mut g, s, x)?;
            let q = l.q.forward(&mut g, s, h)?;
            let k = l.k.forward(&mut g, s, h)?;
            let v = l.v.forward(&mut g, s, h)?;
            let a = g.attention(q, k, v, self.heads)?;
            let a = l.o.forward(&mut g, s, a)?;
            x = g.add(x, a)?;
            let h = l.norm2.layer(&mut g, s, x)?;
            let h = l.fc1.forward(&mut g, s, h)?;
            let h = g.gelu(h);
            let h = l.fc2.forward(&mut g, s, h)?;
            x = g.add(x, h)?;
        }
        let x = self.final_norm.layer(&mut g, s, x)?;
        let grid = g.value(x).clone().reshape(&[gh, gw, self.dim])?;
        Ok(FeatureGrid {
            grid,
            patch_size: self.patch,
            backbone_id: self.id.clone(),
        })
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, p) in self.store.iter() {
            h.write(name.as_bytes());
            for v in p.value.data() {
                h.write_u32(v.to_bits());
            }
        }
        h.finish()
    }

    fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }
}

/// Feature extraction for a raw slice in one call.
pub fn slice_features(backbone: &dyn Backbone, slice: &ImageSlice, cfg: &PreprocessConfig) -> Result<(PreparedImage, FeatureGrid)> {
    let img = preprocess(slice, cfg, backbone.patch_size())?;
    let feats = backbone.extract_features(&img)?;
    Ok((img, feats))
}
