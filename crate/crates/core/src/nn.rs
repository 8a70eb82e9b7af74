//! Named parameter storage and the small set of layers shared by the
//! conditioning decoder, the UNet and the baselines. Layers only remember
//! parameter names; values live in a [`ParamStore`].

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Graph leaf for a stored parameter.
    pub fn leaf(&self, g: &mut Graph<T>, name: &str) -> Var {
        let p = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        g.param(name, &p.value, p.trainable)
    }
}

pub fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// Fully connected layer acting on the rows of an `m×in` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, uniform(rng, &[dout, din], bound), true)?;
        store.insert(&bias, Tensor::zeros(&[dout]), true)?;
        Ok(Self { weight, bias, din, dout })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.leaf(g, &self.weight);
        let b = store.leaf(g, &self.bias);
        let y = g.matmul(x, false, w, true)?;
        g.add_row(y, b)
    }

    /// Pointwise projection of a CHW map (a 1×1 convolution).
    pub fn forward_chw<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, h, w) = match g.value(x).shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("forward_chw on {s:?}"))),
        };
        if c != self.din {
            return Err(Error::shape(format!("1x1 projection expects {} channels, got {c}", self.din)));
        }
        let wv = store.leaf(g, &self.weight);
        let bv = store.leaf(g, &self.bias);
        let flat = g.reshape(x, &[c, h * w])?;
        let y = g.matmul(wv, false, flat, false)?;
        let y = g.add_channel(y, bv)?;
        g.reshape(y, &[self.dout, h, w])
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: String,
    pub beta: String,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, Tensor::full(&[width], T::one()), true)?;
        store.insert(&beta, Tensor::zeros(&[width]), true)?;
        Ok(Self { gamma, beta })
    }

    pub fn layer<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (ga, be) = (store.leaf(g, &self.gamma), store.leaf(g, &self.beta));
        g.layer_norm(x, ga, be)
    }

    pub fn instance<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (ga, be) = (store.leaf(g, &self.gamma), store.leaf(g, &self.beta));
        g.instance_norm(x, ga, be)
    }
}

/// conv → instance norm → leaky ReLU, twice; the first conv may be strided.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv1: String,
    norm1: Norm,
    conv2: String,
    norm2: Norm,
    stride: usize,
    slope: f64,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        slope: f64,
    ) -> Result<Self> {
        let he = |fan_in: usize| (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        let conv1 = format!("{name}.conv1.weight");
        let conv2 = format!("{name}.conv2.weight");
        store.insert(&conv1, normal(rng, &[cout, cin, 3, 3], he(cin * 9)), true)?;
        let norm1 = Norm::new(store, &format!("{name}.norm1"), cout)?;
        store.insert(&conv2, normal(rng, &[cout, cout, 3, 3], he(cout * 9)), true)?;
        let norm2 = Norm::new(store, &format!("{name}.norm2"), cout)?;
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            stride,
            slope,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w1 = store.leaf(g, &self.conv1);
        let y = g.conv2d(x, w1, self.stride, 1)?;
        let y = self.norm1.instance(g, store, y)?;
        let y = g.leaky_relu(y, T::lit(self.slope));
        let w2 = store.leaf(g, &self.conv2);
        let y = g.conv2d(y, w2, 1, 1)?;
        let y = self.norm2.instance(g, store, y)?;
        Ok(g.leaky_relu(y, T::lit(self.slope)))
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct UpConv {
    weight: String,
    bias: String,
}

impl UpConv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let bound = 1.0 / ((cout * 4) as f64).sqrt();
        store.insert(&weight, uniform(rng, &[cin, cout, 2, 2], bound), true)?;
        store.insert(&bias, Tensor::zeros(&[cout]), true)?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.leaf(g, &self.weight);
        let b = store.leaf(g, &self.bias);
        g.conv_transpose2(x, w, b)
    }
}

/// Token-grid layout helpers: `[G, D]` rows ↔ `[D, gh, gw]` channel maps.
pub fn rows_to_chw<T: Real>(g: &mut Graph<T>, x: Var, gh: usize, gw: usize) -> Result<Var> {
    let d = g.value(x).shape()[1];
    let t = g.transpose(x)?;
    g.reshape(t, &[d, gh, gw])
}

pub fn chw_to_rows<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (c, h, w) = match g.value(x).shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("chw_to_rows on {s:?}"))),
    };
    let flat = g.reshape(x, &[c, h * w])?;
    g.transpose(flat)
}
