//! Trainable segmentation models over a frozen backbone: the token-conditioned
//! UNet and the two fixed-head baselines behind one interface.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{FeatureGrid, PreparedImage};
use crate::baselines::{softmax_channels, LinearHead};
use crate::conditioning::{ConditioningDecoder, DecoderConfig, StructureTokenTable, POS_KEY};
use crate::data::LabelSlice;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::objectives::LossConfig;
use crate::pixel_decoder::{labelmap_from_probs, UNet, UNetConfig};
use crate::tensor::{sigmoid, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    VitcUnet,
    Hybrid,
    Linear,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::VitcUnet => "vitc_unet",
            ModelKind::Hybrid => "hybrid",
            ModelKind::Linear => "linear",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub unet: UNetConfig,
}

impl ModelConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        self.unet.validate(&format!("{prefix}.unet"))?;
        if self.kind == ModelKind::VitcUnet {
            self.decoder.validate(&format!("{prefix}.decoder"))?;
            if self.decoder.blocks != self.unet.levels - 1 {
                return Err(Error::config(
                    format!("{prefix}.decoder.blocks"),
                    format!(
                        "must equal unet.levels - 1 = {} (one state per skip level)",
                        self.unet.levels - 1
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Geometry a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub feat_dim: usize,
    pub grid: (usize, usize),
    pub input_size: usize,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Arch<T: Real> {
    Vitc {
        decoder: ConditioningDecoder,
        unet: UNet,
        tokens: StructureTokenTable<T>,
    },
    Hybrid {
        unet: UNet,
        classes: Vec<String>,
    },
    Linear {
        head: LinearHead,
        classes: Vec<String>,
    },
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub store: ParamStore<T>,
    arch: Arch<T>,
}

/// Class name with the label id it carries in a dataset.
pub type ClassRef = (String, u16);

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, shape: ModelShape, class_names: &[String], seed: u64) -> Result<Self> {
        config.validate("model")?;
        if class_names.is_empty() {
            return Err(Error::InvalidInput("a model needs at least one class".into()));
        }
        let m = config.unet.size_multiple();
        if shape.input_size % m != 0 {
            return Err(Error::config(
                "preprocess.input_size",
                format!("{} is not divisible by {m} for {} UNet levels", shape.input_size, config.unet.levels),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = class_names.len();
        let arch = match config.kind {
            ModelKind::VitcUnet => {
                let decoder = ConditioningDecoder::new(&mut store, &mut rng, "cond", shape.feat_dim, &config.decoder)?;
                let unet = UNet::conditioned(&mut store, &mut rng, "unet", &config.unet, config.decoder.dim)?;
                let mut tokens = StructureTokenTable::new(config.decoder.dim, shape.grid, &mut rng);
                for name in class_names {
                    tokens.add_structure_token(name, &mut rng)?;
                }
                Arch::Vitc { decoder, unet, tokens }
            }
            ModelKind::Hybrid => Arch::Hybrid {
                unet: UNet::bottleneck_fused(&mut store, &mut rng, "hybrid", &config.unet, shape.feat_dim, k + 1)?,
                classes: class_names.to_vec(),
            },
            ModelKind::Linear => Arch::Linear {
                head: LinearHead::new(&mut store, &mut rng, "linear", shape.feat_dim, k)?,
                classes: class_names.to_vec(),
            },
        };
        Ok(Self {
            config: config.clone(),
            shape,
            store,
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn class_names(&self) -> Vec<String> {
        match &self.arch {
            Arch::Vitc { tokens, .. } => tokens.names(),
            Arch::Hybrid { classes, .. } | Arch::Linear { classes, .. } => classes.clone(),
        }
    }

    /// Channels the pixel decoder emits per forward pass.
    pub fn output_channels(&self) -> usize {
        match &self.arch {
            Arch::Vitc { unet, .. } => unet.out_channels,
            Arch::Hybrid { unet, .. } => unet.out_channels,
            Arch::Linear { head, .. } => head.num_classes + 1,
        }
    }

    pub fn tokens(&self) -> Option<&StructureTokenTable<T>> {
        match &self.arch {
            Arch::Vitc { tokens, .. } => Some(tokens),
            _ => None,
        }
    }

    pub fn tokens_mut(&mut self) -> Option<&mut StructureTokenTable<T>> {
        match &mut self.arch {
            Arch::Vitc { tokens, .. } => Some(tokens),
            _ => None,
        }
    }

    pub fn decoder(&self) -> Option<&ConditioningDecoder> {
        match &self.arch {
            Arch::Vitc { decoder, .. } => Some(decoder),
            _ => None,
        }
    }

    pub fn unet(&self) -> Option<&UNet> {
        match &self.arch {
            Arch::Vitc { unet, .. } | Arch::Hybrid { unet, .. } => Some(unet),
            Arch::Linear { .. } => None,
        }
    }

    pub fn unet_mut(&mut self) -> Option<&mut UNet> {
        match &mut self.arch {
            Arch::Vitc { unet, .. } | Arch::Hybrid { unet, .. } => Some(unet),
            Arch::Linear { .. } => None,
        }
    }

    pub fn add_structure_token(&mut self, name: &str, rng: &mut ChaCha8Rng) -> Result<usize> {
        match &mut self.arch {
            Arch::Vitc { tokens, .. } => tokens.add_structure_token(name, rng),
            _ => Err(Error::InvalidInput(format!(
                "{} has a fixed output head; adding `{name}` requires rebuilding it",
                self.config.kind.as_str()
            ))),
        }
    }

    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t, trainable| {
            if trainable {
                n += t.len();
            }
        });
        n
    }

    /// Every parameter: store entries first, then the positional grid and
    /// tokens in table order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<T>, bool)) {
        for (name, p) in self.store.iter() {
            f(name, &p.value, p.trainable);
        }
        if let Some(t) = self.tokens() {
            f(POS_KEY, &t.pos, t.pos_trainable);
            for e in t.entries() {
                f(&crate::conditioning::token_key(&e.name), &e.vector, e.trainable);
            }
        }
    }

    /// Mutable access by graph name.
    pub fn param_mut(&mut self, name: &str) -> Option<(&mut Tensor<T>, bool)> {
        self.param_entry_mut(name).map(|(t, tr)| (t, *tr))
    }

    /// Value and trainable flag by graph name.
    pub fn param_entry_mut(&mut self, name: &str) -> Option<(&mut Tensor<T>, &mut bool)> {
        if let Arch::Vitc { tokens, .. } = &mut self.arch {
            if name == POS_KEY {
                return Some((&mut tokens.pos, &mut tokens.pos_trainable));
            }
            if let Some(tok) = name.strip_prefix("tokens.") {
                return tokens
                    .entries_mut()
                    .iter_mut()
                    .find(|e| e.name == tok)
                    .map(|e| (&mut e.vector, &mut e.trainable));
            }
        }
        self.store.get_mut(name).map(|p| (&mut p.value, &mut p.trainable))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for (_, p) in self.store.iter_mut() {
            p.trainable = trainable;
        }
        if let Some(t) = self.tokens_mut() {
            t.pos_trainable = trainable;
            for e in t.entries_mut() {
                e.trainable = trainable;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let arch = match &self.arch {
            Arch::Vitc { decoder, unet, tokens } => Arch::Vitc {
                decoder: decoder.clone(),
                unet: unet.clone(),
                tokens: tokens.cast(),
            },
            Arch::Hybrid { unet, classes } => Arch::Hybrid {
                unet: unet.clone(),
                classes: classes.clone(),
            },
            Arch::Linear { head, classes } => Arch::Linear {
                head: head.clone(),
                classes: classes.clone(),
            },
        };
        Model {
            config: self.config.clone(),
            shape: self.shape,
            store: self.store.cast(),
            arch,
        }
    }

    fn check_inputs(&self, image: &PreparedImage, features: &FeatureGrid) -> Result<()> {
        let (h, w) = image.size();
        if (h, w) != (self.shape.input_size, self.shape.input_size) {
            return Err(Error::shape(format!(
                "image {h}x{w} for a model built at {}",
                self.shape.input_size
            )));
        }
        if features.dim() != self.shape.feat_dim {
            return Err(Error::shape(format!(
                "features of width {} for a model expecting {}",
                features.dim(),
                self.shape.feat_dim
            )));
        }
        Ok(())
    }

    /// Logit maps: one `[1, H, W]` per requested class for the conditioned
    /// model, or a single `[K+1, H, W]` map for the baselines (the class list
    /// is then ignored). The UNet encoder and the feature projection are
    /// computed once and shared by all classes.
    pub fn forward(&self, g: &mut Graph<T>, image: &PreparedImage, features: &FeatureGrid, classes: &[String]) -> Result<Vec<Var>> {
        self.check_inputs(image, features)?;
        let grid = (features.gh(), features.gw());
        let s = &self.store;
        match &self.arch {
            Arch::Vitc { decoder, unet, tokens } => {
                for c in classes {
                    tokens.get(c)?;
                }
                let x = g.constant(image.tensor.cast());
                let skips = unet.encode(g, s, x)?;
                let f = decoder.features_leaf(g, features);
                let p = decoder.project(g, s, f)?;
                classes
                    .iter()
                    .map(|c| {
                        let tr = decoder.condition_projected(g, s, tokens, p, grid, c)?;
                        unet.decode(g, s, &skips, &tr.states, grid)
                    })
                    .collect()
            }
            Arch::Hybrid { unet, .. } => {
                let x = g.constant(image.tensor.cast());
                let skips = unet.encode(g, s, x)?;
                let f = g.constant(features.as_rows().cast());
                Ok(vec![unet.decode(g, s, &skips, &[f], grid)?])
            }
            Arch::Linear { head, .. } => {
                let f = g.constant(features.as_rows().cast());
                let out = (self.shape.input_size, self.shape.input_size);
                Ok(vec![head.forward(g, s, f, grid, out)?])
            }
        }
    }

    /// Training loss for one image. The conditioned model averages focal plus
    /// Dice over `classes` (absent classes included with an all-zero target).
    /// Baselines use softmax cross-entropy plus Dice over their fixed
    /// channels, with labels outside `classes` treated as background.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        image: &PreparedImage,
        features: &FeatureGrid,
        labels: &LabelSlice,
        classes: &[ClassRef],
        cfg: &LossConfig,
    ) -> Result<Var> {
        let (h, w) = image.size();
        if (labels.height, labels.width) != (h, w) {
            return Err(Error::shape(format!(
                "labels {}x{} for an image of {h}x{w}",
                labels.height, labels.width
            )));
        }
        if classes.is_empty() {
            return Err(Error::InvalidInput("loss over zero classes".into()));
        }
        match &self.arch {
            Arch::Vitc { .. } => {
                let names: Vec<String> = classes.iter().map(|c| c.0.clone()).collect();
                let logits = self.forward(g, image, features, &names)?;
                let mut total: Option<Var> = None;
                for (z, (_, id)) in logits.into_iter().zip(classes) {
                    let target: Vec<T> = labels.labels.iter().map(|&l| if l == *id { T::one() } else { T::zero() }).collect();
                    let l = g.focal_dice_loss(z, &target, cfg)?;
                    total = Some(match total {
                        None => l,
                        Some(t) => g.add(t, l)?,
                    });
                }
                let total = total.expect("nonempty classes");
                Ok(g.scale(total, T::lit(1.0 / classes.len() as f64)))
            }
            _ => {
                let own = self.class_names();
                let mut to_channel = std::collections::HashMap::new();
                for (name, id) in classes {
                    let ch = own.iter().position(|n| n == name).ok_or_else(|| Error::UnknownStructure {
                        name: name.clone(),
                        available: own.clone(),
                    })?;
                    to_channel.insert(*id, ch + 1);
                }
                let target: Vec<usize> = labels.labels.iter().map(|l| *to_channel.get(l).unwrap_or(&0)).collect();
                let z = self.forward(g, image, features, &[])?[0];
                g.softmax_ce_dice_loss(z, &target, cfg.dice_smooth)
            }
        }
    }

    /// Foreground probability maps (flattened `H·W`), one per class.
    pub fn predict_probs(&self, image: &PreparedImage, features: &FeatureGrid, classes: &[String]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        match &self.arch {
            Arch::Vitc { .. } => {
                let z = self.forward(&mut g, image, features, classes)?;
                Ok(z.iter().map(|&v| g.value(v).data().iter().map(|&x| sigmoid(x)).collect()).collect())
            }
            _ => {
                let own = self.class_names();
                let z = self.forward(&mut g, image, features, &[])?[0];
                let p = softmax_channels(g.value(z))?;
                let n = p.len() / p.shape()[0];
                classes
                    .iter()
                    .map(|c| {
                        let ch = own.iter().position(|n| n == c).ok_or_else(|| Error::UnknownStructure {
                            name: c.clone(),
                            available: own.clone(),
                        })? + 1;
                        Ok(p.data()[ch * n..(ch + 1) * n].to_vec())
                    })
                    .collect()
            }
        }
    }

    /// Raw logits for one class (conditioned model) as a `[1, H, W]` tensor.
    pub fn class_logits(&self, image: &PreparedImage, features: &FeatureGrid, class: &str) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = self.forward(&mut g, image, features, &[class.to_string()])?;
        Ok(g.value(z[0]).clone())
    }

    /// Label map at the model input resolution.
    pub fn predict_labelmap(&self, image: &PreparedImage, features: &FeatureGrid, classes: &[ClassRef]) -> Result<LabelSlice> {
        let (h, w) = image.size();
        let names: Vec<String> = classes.iter().map(|c| c.0.clone()).collect();
        let ids: Vec<u16> = classes.iter().map(|c| c.1).collect();
        let labels = match &self.arch {
            Arch::Vitc { tokens, .. } => {
                for n in &names {
                    tokens.get(n)?;
                }
                if names.is_empty() {
                    vec![0; h * w]
                } else {
                    let probs = self.predict_probs(image, features, &names)?;
                    labelmap_from_probs(&probs, &ids, h * w)?
                }
            }
            _ => {
                let own = self.class_names();
                let mut channel_id = vec![0u16; own.len() + 1];
                for (name, id) in classes {
                    let ch = own.iter().position(|n| n == name).ok_or_else(|| Error::UnknownStructure {
                        name: name.clone(),
                        available: own.clone(),
                    })?;
                    channel_id[ch + 1] = *id;
                }
                let mut g = Graph::new();
                let z = self.forward(&mut g, image, features, &[])?[0];
                let zt = g.value(z);
                let n = h * w;
                let c = zt.shape()[0];
                (0..n)
                    .map(|i| {
                        let mut best = 0;
                        for k in 1..c {
                            if zt.data()[k * n + i] > zt.data()[best * n + i] {
                                best = k;
                            }
                        }
                        channel_id[best]
                    })
                    .collect()
            }
        };
        LabelSlice::new(h, w, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;

    pub(crate) fn toy_config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            decoder: DecoderConfig {
                dim: 8,
                blocks: 2,
                heads: 2,
                mlp_ratio: 2,
            },
            unet: UNetConfig {
                levels: 3,
                base_channels: 2,
                max_channels: 8,
                fusion_channels: 2,
                ..UNetConfig::default()
            },
        }
    }

    fn inputs(seed: u64) -> (PreparedImage, FeatureGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            PreparedImage {
                tensor: nn::normal(&mut rng, &[3, 8, 8], 1.0),
            },
            FeatureGrid {
                grid: nn::normal(&mut rng, &[2, 2, 6], 1.0),
                patch_size: 4,
                backbone_id: "t".into(),
            },
        )
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    const SHAPE: ModelShape = ModelShape {
        feat_dim: 6,
        grid: (2, 2),
        input_size: 8,
    };

    #[test]
    fn output_channel_contract() {
        let (img, f) = inputs(0);
        for k in [1, 3, 7] {
            let v = Model::<f64>::new(&toy_config(ModelKind::VitcUnet), SHAPE, &names(k), 0).unwrap();
            assert_eq!(v.output_channels(), 1);
            let mut g = Graph::new();
            let outs = v.forward(&mut g, &img, &f, &names(k)).unwrap();
            assert_eq!(outs.len(), k);
            assert!(outs.iter().all(|&o| g.value(o).shape() == [1, 8, 8]));
            for kind in [ModelKind::Hybrid, ModelKind::Linear] {
                let b = Model::<f64>::new(&toy_config(kind), SHAPE, &names(k), 0).unwrap();
                assert_eq!(b.output_channels(), k + 1);
                let mut g = Graph::new();
                let z = b.forward(&mut g, &img, &f, &[]).unwrap();
                assert_eq!(g.value(z[0]).shape(), &[k + 1, 8, 8]);
            }
        }
    }

    #[test]
    fn blocks_must_match_levels() {
        let mut c = toy_config(ModelKind::VitcUnet);
        c.decoder.blocks = 3;
        match Model::<f32>::new(&c, SHAPE, &names(2), 0) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.decoder.blocks"),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn tokens_give_different_logits_and_addition_is_inert() {
        let (img, f) = inputs(1);
        let mut m = Model::<f64>::new(&toy_config(ModelKind::VitcUnet), SHAPE, &names(2), 3).unwrap();
        let a = m.class_logits(&img, &f, "c0").unwrap();
        let b = m.class_logits(&img, &f, "c1").unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        m.add_structure_token("c2", &mut rng).unwrap();
        assert_eq!(m.class_logits(&img, &f, "c0").unwrap(), a);
        let mut lin = Model::<f64>::new(&toy_config(ModelKind::Linear), SHAPE, &names(2), 3).unwrap();
        assert!(lin.add_structure_token("c2", &mut rng).is_err());
    }

    #[test]
    fn loss_touches_every_token() {
        let (img, f) = inputs(2);
        let m = Model::<f64>::new(&toy_config(ModelKind::VitcUnet), SHAPE, &names(3), 0).unwrap();
        let labels = LabelSlice::new(8, 8, (0..64).map(|i| (i % 3) as u16).collect()).unwrap();
        let classes: Vec<ClassRef> = names(3).into_iter().zip(1..).collect();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &img, &f, &labels, &classes, &LossConfig::default()).unwrap();
        g.backward(l).unwrap();
        let grads: Vec<_> = g.param_grads().collect();
        for n in names(3) {
            let key = crate::conditioning::token_key(&n);
            let (_, gr) = grads.iter().find(|(k, _)| *k == key).unwrap();
            assert!(gr.unwrap().data().iter().any(|v| *v != 0.0), "{key}");
        }
    }

    #[test]
    fn baseline_loss_and_labelmap() {
        let (img, f) = inputs(3);
        for kind in [ModelKind::Hybrid, ModelKind::Linear] {
            let m = Model::<f64>::new(&toy_config(kind), SHAPE, &names(2), 0).unwrap();
            let labels = LabelSlice::new(8, 8, vec![1; 64]).unwrap();
            let classes: Vec<ClassRef> = names(2).into_iter().zip(1..).collect();
            let mut g = Graph::new();
            let l = m.loss(&mut g, &img, &f, &labels, &classes, &LossConfig::default()).unwrap();
            assert!(g.scalar(l) > 0.0);
            let lm = m.predict_labelmap(&img, &f, &classes).unwrap();
            assert!(lm.labels.iter().all(|&v| v <= 2));
        }
    }

    #[test]
    fn unknown_class_is_reported() {
        let (img, f) = inputs(4);
        let m = Model::<f64>::new(&toy_config(ModelKind::VitcUnet), SHAPE, &names(2), 0).unwrap();
        let r = m.predict_labelmap(&img, &f, &[("heart".into(), 1)]);
        assert!(matches!(r, Err(Error::UnknownStructure { .. })));
        let empty = m.predict_labelmap(&img, &f, &[]).unwrap();
        assert!(empty.labels.iter().all(|&v| v == 0));
    }
}
