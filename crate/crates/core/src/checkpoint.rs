//! Binary checkpoints: `VITCUNET`, a little-endian u32 format version, a u64
//! header length, a JSON header and the raw little-endian f32 payload.
//! Weights, tokens, optimizer moments and the sampling RNG position all
//! round-trip bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ClassRef, Model, ModelShape};
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::train::{BestSnapshot, EpochRecord, RngState, Trainer};

pub const MAGIC: &[u8; 8] = b"VITCUNET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    len: usize,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    train: TrainConfig,
    classes: Vec<ClassRef>,
    step: u64,
    rng: RngState,
    history: Vec<EpochRecord>,
    epoch_seconds: Vec<f64>,
    moments: Vec<MomentEntry>,
    best_epoch: Option<usize>,
    best_val_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    shape: ModelShape,
    class_names: Vec<String>,
    backbone_fingerprint: u64,
    dataset: String,
    tensors: Vec<TensorEntry>,
    trainer: Option<TrainerState>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub dataset: String,
    pub backbone_fingerprint: u64,
    pub model: Model<f32>,
    pub trainer: Option<Trainer>,
}

impl Checkpoint {
    pub fn of_model(config: &RunConfig, dataset: &str, backbone_fingerprint: u64, model: &Model<f32>) -> Self {
        Self {
            config: config.clone(),
            dataset: dataset.to_string(),
            backbone_fingerprint,
            model: model.clone(),
            trainer: None,
        }
    }

    pub fn of_trainer(config: &RunConfig, dataset: &str, backbone_fingerprint: u64, trainer: &Trainer) -> Self {
        Self {
            config: config.clone(),
            dataset: dataset.to_string(),
            backbone_fingerprint,
            model: trainer.model.clone(),
            trainer: Some(trainer.clone()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<f32> = Vec::new();
        let mut tensors = Vec::new();
        self.model.visit_params(|name, t, trainable| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable,
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        });
        let trainer = self.trainer.as_ref().map(|tr| {
            let mut moments = Vec::new();
            for (name, (m, v)) in &tr.opt.moments {
                moments.push(MomentEntry {
                    name: name.clone(),
                    len: m.len(),
                    offset: payload.len(),
                });
                payload.extend_from_slice(m);
                payload.extend_from_slice(v);
            }
            TrainerState {
                train: tr.cfg.clone(),
                classes: tr.classes.clone(),
                step: tr.opt.step,
                rng: RngState::capture(&tr.rng),
                history: tr.history.clone(),
                epoch_seconds: tr.epoch_seconds.clone(),
                moments,
                best_epoch: tr.best.as_ref().map(|b| b.epoch),
                best_val_miou: tr.best.as_ref().map(|b| b.val_miou),
            }
        });
        let header = Header {
            config: self.config.clone(),
            shape: self.model.shape,
            class_names: self.model.class_names(),
            backbone_fingerprint: self.backbone_fingerprint,
            dataset: self.dataset.clone(),
            tensors,
            trainer,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen || (body.len() - hlen) % 4 != 0 {
            return Err(bad("truncated header or payload"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
        let payload: Vec<f32> = body[hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let slice = |off: usize, len: usize| -> Result<&[f32]> {
            payload.get(off..off + len).ok_or_else(|| bad("tensor extends past the payload"))
        };

        let mut model: Model<f32> = Model::new(&header.config.model, header.shape, &header.class_names, 0)?;
        let mut expected = Vec::new();
        model.visit_params(|n, _, _| expected.push(n.to_string()));
        let stored: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if expected != stored {
            return Err(bad("parameter list does not match the stored architecture"));
        }
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let (value, trainable) = model.param_entry_mut(&t.name).expect("name checked above");
            if value.shape() != t.shape.as_slice() {
                return Err(bad(&format!("`{}` has shape {:?}, expected {:?}", t.name, t.shape, value.shape())));
            }
            value.data_mut().copy_from_slice(slice(t.offset, n)?);
            *trainable = t.trainable;
        }

        let trainer = match header.trainer {
            None => None,
            Some(st) => {
                let mut opt = AdamW::new(st.train.lr, st.train.weight_decay);
                opt.step = st.step;
                for m in &st.moments {
                    let both = slice(m.offset, 2 * m.len)?;
                    opt.moments
                        .insert(m.name.clone(), (both[..m.len].to_vec(), both[m.len..].to_vec()));
                }
                // Best weights are stored in their own file; until a caller
                // swaps them in, the snapshot holds the current weights.
                let best = match (st.best_epoch, st.best_val_miou) {
                    (Some(epoch), Some(val_miou)) => Some(BestSnapshot {
                        epoch,
                        val_miou,
                        model: model.clone(),
                    }),
                    _ => None,
                };
                Some(Trainer {
                    cfg: st.train,
                    model: model.clone(),
                    opt,
                    rng: st.rng.restore()?,
                    classes: st.classes,
                    history: st.history,
                    best,
                    epoch_seconds: st.epoch_seconds,
                })
            }
        };
        Ok(Self {
            config: header.config,
            dataset: header.dataset,
            backbone_fingerprint: header.backbone_fingerprint,
            model,
            trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Bitwise equality of every parameter, trainable flag and name.
pub fn models_bit_identical(a: &Model<f32>, b: &Model<f32>) -> bool {
    let dump = |m: &Model<f32>| {
        let mut v: Vec<(String, Vec<usize>, bool, Vec<u32>)> = Vec::new();
        m.visit_params(|n, t: &Tensor<f32>, tr| {
            v.push((n.to_string(), t.shape().to_vec(), tr, t.data().iter().map(|x| x.to_bits()).collect()))
        });
        v
    };
    a.shape == b.shape && a.config == b.config && dump(a) == dump(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Grads;
    use crate::train::{sampling_rng, Trainer};
    use rand::Rng;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.decoder.dim = 8;
        cfg.model.decoder.heads = 2;
        cfg.model.decoder.blocks = 2;
        cfg.model.unet.levels = 3;
        cfg.model.unet.base_channels = 2;
        cfg.model.unet.fusion_channels = 2;
        cfg
    }

    fn tiny_model(cfg: &RunConfig) -> Model<f32> {
        let shape = ModelShape {
            feat_dim: 4,
            grid: (2, 2),
            input_size: 8,
        };
        Model::new(&cfg.model, shape, &["a".into(), "b".into()], 3).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let cfg = tiny_config();
        let mut m = tiny_model(&cfg);
        if let Some((t, tr)) = m.param_entry_mut("tokens.b") {
            t.data_mut()[0] = f32::from_bits(0x3f80_0001);
            *tr = false;
        }
        let ck = Checkpoint::of_model(&cfg, "toy", 42, &m);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(models_bit_identical(&m, &back.model));
        assert_eq!(back.backbone_fingerprint, 42);
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn trainer_state_round_trips() {
        let cfg = tiny_config();
        let m = tiny_model(&cfg);
        let mut tr = Trainer::new(cfg.train.clone(), m, vec![("a".into(), 1), ("b".into(), 2)]);
        let mut grads = Grads::new();
        grads.insert("tokens.a".into(), Tensor::full(&[8], 0.25f32));
        tr.opt.step(&mut tr.model, &grads).unwrap();
        let _: u64 = tr.rng.random();
        let ck = Checkpoint::of_trainer(&cfg, "toy", 1, &tr);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().trainer.unwrap();
        assert_eq!(back.opt, tr.opt);
        assert!(models_bit_identical(&back.model, &tr.model));
        let mut r1 = tr.rng.clone();
        let mut r2 = back.rng.clone();
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        assert_ne!(back.rng, sampling_rng(0));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let cfg = tiny_config();
        let bytes = Checkpoint::of_model(&cfg, "toy", 0, &tiny_model(&cfg)).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
