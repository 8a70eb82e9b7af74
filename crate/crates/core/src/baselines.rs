//! Fixed-head comparison decoders: a per-patch linear classifier and the
//! bottleneck-fusion UNet hybrid. Both predict K+1 channels, background
//! included.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{FeatureGrid, PreparedImage};
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamStore};
use crate::pixel_decoder::UNet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct LinearHead {
    pub proj: Linear,
    pub num_classes: usize,
}

impl LinearHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, feat_dim: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, rng, &format!("{prefix}.proj"), feat_dim, num_classes + 1)?,
            num_classes,
        })
    }

    /// `[K+1, H, W]` logits from `[gh·gw, D]` feature rows.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        features: Var,
        grid: (usize, usize),
        out: (usize, usize),
    ) -> Result<Var> {
        let z = self.proj.forward(g, s, features)?;
        let z = nn::rows_to_chw(g, z, grid.0, grid.1)?;
        g.resize_bilinear(z, out.0, out.1)
    }
}

/// Channel-wise softmax of a `[C, H, W]` map.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, n) = match logits.shape() {
        [c, h, w] => (*c, h * w),
        s => return Err(Error::shape(format!("softmax over {s:?}"))),
    };
    let z = logits.data();
    let mut out = vec![T::zero(); c * n];
    for i in 0..n {
        let mx = (0..c).fold(T::neg_infinity(), |m, k| m.max(z[k * n + i]));
        let mut sum = T::zero();
        for k in 0..c {
            let e = (z[k * n + i] - mx).exp();
            out[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * n + i] /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Probabilities `[K+1, H, W]` of the linear baseline.
pub fn linear_head_forward<T: Real>(
    head: &LinearHead,
    store: &ParamStore<T>,
    features: &FeatureGrid,
    out: (usize, usize),
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.as_rows().cast());
    let z = head.forward(&mut g, store, f, (features.gh(), features.gw()), out)?;
    softmax_channels(g.value(z))
}

/// Logits `[K+1, H, W]` of the hybrid baseline.
pub fn hybrid_forward<T: Real>(
    unet: &UNet,
    store: &ParamStore<T>,
    image: &PreparedImage,
    features: &FeatureGrid,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(image.tensor.cast());
    let skips = unet.encode(&mut g, store, x)?;
    let f = g.constant(features.as_rows().cast());
    let z = unet.decode(&mut g, store, &skips, &[f], (features.gh(), features.gw()))?;
    Ok(g.value(z).clone())
}
