//! AdamW with decoupled weight decay, keyed by parameter name so that tokens
//! added mid-training simply start with fresh moments.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Accumulated gradients by parameter name.
pub type Grads<T> = IndexMap<String, Tensor<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments.
    pub moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Grads<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (lr, wd, eps) = (T::lit(self.lr), T::lit(self.weight_decay), T::lit(ADAM_EPS));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for (name, g) in grads {
            let Some((p, trainable)) = model.param_mut(name) else {
                return Err(Error::InvalidInput(format!("gradient for unknown parameter `{name}`")));
            };
            if !trainable {
                continue;
            }
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Real>(grads: &Grads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
