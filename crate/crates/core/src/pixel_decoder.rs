//! 2D UNet pixel decoder. The conditioned variant fuses trajectory state n
//! into the n-th shallowest skip connection and emits one logit channel; the
//! same skeleton, with bottleneck fusion instead, serves the hybrid baseline.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::PreparedImage;
use crate::conditioning::ConditionedTrajectory;
use crate::error::{Error, Result};
use crate::nn::{self, ConvBlock, Linear, ParamStore, UpConv};
use crate::tensor::{sigmoid, Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Which trajectory state each skip level receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// State 1 at the shallowest skip, state N at the deepest.
    #[default]
    ShallowFirst,
    DeepFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub fusion_channels: usize,
    pub negative_slope: f64,
    #[serde(default)]
    pub fusion_order: FusionOrder,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            base_channels: 16,
            max_channels: 256,
            fusion_channels: 32,
            negative_slope: 0.01,
            fusion_order: FusionOrder::ShallowFirst,
        }
    }
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(20)).min(self.max_channels)
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels.saturating_sub(1))
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!("{prefix}.levels"), "at least 2 levels are required"));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config(
                format!("{prefix}.base_channels"),
                "must be positive and no larger than max_channels",
            ));
        }
        if self.fusion_channels == 0 {
            return Err(Error::config(format!("{prefix}.fusion_channels"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.negative_slope) {
            return Err(Error::config(format!("{prefix}.negative_slope"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How external latents enter the UNet.
#[derive(Clone, Debug)]
pub enum Fusion {
    /// One D→F projection per skip level.
    Trajectory(Vec<Linear>),
    /// A single D→c_bottleneck projection concatenated at the bottleneck.
    Bottleneck(Linear),
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub out_channels: usize,
    encoder: Vec<ConvBlock>,
    ups: Vec<UpConv>,
    decoder: Vec<ConvBlock>,
    fusion: Fusion,
    head: Linear,
}

impl UNet {
    /// Conditioned decoder: single output channel, trajectory fusion at every
    /// skip.
    pub fn conditioned<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &UNetConfig,
        state_dim: usize,
    ) -> Result<Self> {
        cfg.validate("model.unet")?;
        let fuse = (0..cfg.levels - 1)
            .map(|i| Linear::new(store, rng, &format!("{prefix}.fuse{i}"), state_dim, cfg.fusion_channels))
            .collect::<Result<Vec<_>>>()?;
        Self::build(store, rng, prefix, cfg, 1, Fusion::Trajectory(fuse))
    }

    /// Bottleneck-fusion decoder with `out_channels` outputs.
    pub fn bottleneck_fused<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &UNetConfig,
        feat_dim: usize,
        out_channels: usize,
    ) -> Result<Self> {
        cfg.validate("model.unet")?;
        let cb = cfg.channels(cfg.levels - 1);
        let proj = Linear::new(store, rng, &format!("{prefix}.feat_proj"), feat_dim, cb)?;
        Self::build(store, rng, prefix, cfg, out_channels, Fusion::Bottleneck(proj))
    }

    fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &UNetConfig,
        out_channels: usize,
        fusion: Fusion,
    ) -> Result<Self> {
        let l = cfg.levels;
        let slope = cfg.negative_slope;
        let mut encoder = Vec::with_capacity(l);
        for i in 0..l {
            let cin = if i == 0 { 3 } else { cfg.channels(i - 1) };
            let stride = if i == 0 { 1 } else { 2 };
            encoder.push(ConvBlock::new(store, rng, &format!("{prefix}.enc{i}"), cin, cfg.channels(i), stride, slope)?);
        }
        let mut ups = Vec::with_capacity(l - 1);
        let mut decoder = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let mut cin = cfg.channels(i + 1);
            if i == l - 2 && matches!(fusion, Fusion::Bottleneck(_)) {
                cin *= 2;
            }
            ups.push(UpConv::new(store, rng, &format!("{prefix}.up{i}"), cin, cfg.channels(i))?);
            let extra = match fusion {
                Fusion::Trajectory(_) => cfg.fusion_channels,
                Fusion::Bottleneck(_) => 0,
            };
            decoder.push(ConvBlock::new(
                store,
                rng,
                &format!("{prefix}.dec{i}"),
                2 * cfg.channels(i) + extra,
                cfg.channels(i),
                1,
                slope,
            )?);
        }
        let head = Linear::new(store, rng, &format!("{prefix}.head"), cfg.channels(0), out_channels)?;
        Ok(Self {
            cfg: cfg.clone(),
            out_channels,
            encoder,
            ups,
            decoder,
            fusion,
            head,
        })
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn bottleneck_input_channels(&self) -> usize {
        let cb = self.cfg.channels(self.cfg.levels - 1);
        match self.fusion {
            Fusion::Bottleneck(_) => 2 * cb,
            Fusion::Trajectory(_) => cb,
        }
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.cfg.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} must be divisible by {m} for {} levels",
                self.cfg.levels
            )));
        }
        Ok(())
    }

    /// Encoder activations, shallowest first; the last entry is the
    /// bottleneck.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("UNet input of shape {shape:?}")));
        }
        self.check_input(shape[1], shape[2])?;
        let mut out = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for block in &self.encoder {
            x = block.forward(g, s, x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Projects a `[gh·gw, D]` state to F channels, resizes it to the skip
    /// and concatenates. Projecting before the bilinear resize equals the
    /// reverse order because bilinear weights sum to one.
    pub fn fuse_state<T: Real>(
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        proj: &Linear,
        state: Var,
        grid: (usize, usize),
        skip: Var,
    ) -> Result<Var> {
        let (hs, ws) = match g.value(skip).shape() {
            [_, h, w] => (*h, *w),
            sh => return Err(Error::shape(format!("skip of shape {sh:?}"))),
        };
        let p = proj.forward(g, s, state)?;
        let p = nn::rows_to_chw(g, p, grid.0, grid.1)?;
        let p = g.resize_bilinear(p, hs, ws)?;
        g.concat(&[skip, p])
    }

    fn state_for_level(&self, level: usize, n: usize) -> usize {
        match self.cfg.fusion_order {
            FusionOrder::ShallowFirst => level,
            FusionOrder::DeepFirst => n - 1 - level,
        }
    }

    /// Decoder path. `states` are the trajectory rows for the conditioned
    /// variant; `features` the `[gh·gw, D]` backbone rows for the hybrid.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        skips: &[Var],
        latents: &[Var],
        grid: (usize, usize),
    ) -> Result<Var> {
        let l = self.cfg.levels;
        if skips.len() != l {
            return Err(Error::shape(format!("{} skips for {l} levels", skips.len())));
        }
        let mut x = skips[l - 1];
        match &self.fusion {
            Fusion::Trajectory(_) => {
                if latents.len() != l - 1 {
                    return Err(Error::config(
                        "model.decoder.blocks",
                        format!(
                            "trajectory of {} states for a {l}-level UNet (needs {})",
                            latents.len(),
                            l - 1
                        ),
                    ));
                }
            }
            Fusion::Bottleneck(proj) => {
                let [feats] = latents else {
                    return Err(Error::shape("bottleneck fusion takes exactly one feature grid"));
                };
                let (hb, wb) = (g.value(x).shape()[1], g.value(x).shape()[2]);
                let p = proj.forward(g, s, *feats)?;
                let p = nn::rows_to_chw(g, p, grid.0, grid.1)?;
                let p = g.resize_bilinear(p, hb, wb)?;
                x = g.concat(&[x, p])?;
            }
        }
        for i in (0..l - 1).rev() {
            let up = self.ups[i].forward(g, s, x)?;
            let merged = match &self.fusion {
                Fusion::Trajectory(projs) => {
                    let state = latents[self.state_for_level(i, l - 1)];
                    let fused = Self::fuse_state(g, s, &projs[i], state, grid, skips[i])?;
                    g.concat(&[up, fused])?
                }
                Fusion::Bottleneck(_) => g.concat(&[up, skips[i]])?,
            };
            x = self.decoder[i].forward(g, s, merged)?;
        }
        self.head.forward_chw(g, s, x)
    }
}

/// Full forward for one image and one trajectory: `[1, H, W]` logits.
pub fn segment<T: Real>(
    unet: &UNet,
    store: &ParamStore<T>,
    image: &PreparedImage,
    traj: &ConditionedTrajectory<T>,
) -> Result<Tensor<T>> {
    if traj.len() != unet.cfg.levels - 1 {
        return Err(Error::config(
            "model.decoder.blocks",
            format!(
                "trajectory of {} states for a {}-level UNet",
                traj.len(),
                unet.cfg.levels
            ),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(image.tensor.cast());
    let skips = unet.encode(&mut g, store, x)?;
    let shape = traj.states[0].shape().to_vec();
    let (gh, gw, d) = (shape[0], shape[1], shape[2]);
    let states: Vec<Var> = traj
        .states
        .iter()
        .map(|st| g.constant(st.clone().reshape(&[gh * gw, d]).expect("state reshape")))
        .collect();
    let out = unet.decode(&mut g, store, &skips, &states, (gh, gw))?;
    Ok(g.value(out).clone())
}

/// `sigmoid(z) > threshold`, strictly.
pub fn predict_mask<T: Real>(logits: &[T], threshold: f64) -> Vec<bool> {
    logits.iter().map(|&z| sigmoid(z).as_f64() > threshold).collect()
}

/// Per-pixel argmax over classes whose probability exceeds 0.5; background
/// where none does. `probs[c]` belongs to label `ids[c]`.
pub fn labelmap_from_probs<T: Real>(probs: &[Vec<T>], ids: &[u16], pixels: usize) -> Result<Vec<u16>> {
    if probs.len() != ids.len() || probs.iter().any(|p| p.len() != pixels) {
        return Err(Error::shape("probability maps and label ids disagree"));
    }
    let half = T::lit(DEFAULT_THRESHOLD);
    Ok((0..pixels)
        .map(|i| {
            let mut best: Option<(T, u16)> = None;
            for (p, &id) in probs.iter().zip(ids) {
                let v = p[i];
                if v > half && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, id));
                }
            }
            best.map_or(0, |(_, id)| id)
        })
        .collect())
}
