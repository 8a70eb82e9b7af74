//! Structure tokens and the two-way attention decoder that turns a frozen
//! feature grid into a token-conditioned trajectory of latent states.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::FeatureGrid;
use crate::error::{Error, Result};
use crate::nn::{self, Linear, Norm, ParamStore};
use crate::tensor::{Real, Tensor};

pub const TOKEN_INIT_STD: f64 = 0.02;
pub const POS_INIT_STD: f64 = 0.02;
/// Lower clamp on nearest-neighbour distances inside [`koleo`].
pub const KOLEO_EPS: f64 = 1e-12;

pub const POS_KEY: &str = "tokens.pos";

pub fn token_key(name: &str) -> String {
    format!("tokens.{name}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEntry<T> {
    pub name: String,
    pub vector: Tensor<T>,
    pub trainable: bool,
}

/// Ordered dictionary of structure tokens plus the positional grid they share.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureTokenTable<T> {
    dim: usize,
    grid: (usize, usize),
    /// `[gh·gw, D]`
    pub pos: Tensor<T>,
    pub pos_trainable: bool,
    entries: Vec<TokenEntry<T>>,
}

impl<T: Real> StructureTokenTable<T> {
    pub fn new(dim: usize, grid: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        Self {
            dim,
            grid,
            pos: nn::normal(rng, &[grid.0 * grid.1, dim], POS_INIT_STD),
            pos_trainable: true,
            entries: Vec::new(),
        }
    }

    /// Rebuilds a table from stored parts.
    pub fn from_parts(dim: usize, grid: (usize, usize), pos: Tensor<T>, entries: Vec<TokenEntry<T>>) -> Result<Self> {
        if pos.shape() != [grid.0 * grid.1, dim] {
            return Err(Error::shape(format!(
                "positional grid {:?} for a {}x{}x{dim} table",
                pos.shape(),
                grid.0,
                grid.1
            )));
        }
        let mut t = Self {
            dim,
            grid,
            pos,
            pos_trainable: true,
            entries: Vec::new(),
        };
        for e in entries {
            t.insert(e)?;
        }
        Ok(t)
    }

    fn insert(&mut self, entry: TokenEntry<T>) -> Result<usize> {
        if entry.name.is_empty() || entry.name.eq_ignore_ascii_case("background") {
            return Err(Error::InvalidInput(format!("`{}` cannot name a structure token", entry.name)));
        }
        if self.index_of(&entry.name).is_some() {
            return Err(Error::DuplicateStructure(entry.name));
        }
        if entry.vector.shape() != [self.dim] {
            return Err(Error::shape(format!(
                "token `{}` has shape {:?}, table width is {}",
                entry.name,
                entry.vector.shape(),
                self.dim
            )));
        }
        self.entries.push(entry);
        Ok(self.entries.len() - 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn entries(&self) -> &[TokenEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [TokenEntry<T>] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&TokenEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownStructure {
                name: name.to_string(),
                available: self.names(),
            })
    }

    /// Appends a freshly initialised trainable token and returns its id.
    pub fn add_structure_token(&mut self, name: &str, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::DuplicateStructure(name.to_string()));
        }
        self.insert(TokenEntry {
            name: name.to_string(),
            vector: nn::normal(rng, &[self.dim], TOKEN_INIT_STD),
            trainable: true,
        })
    }

    pub fn remove(&mut self, name: &str) -> Result<TokenEntry<T>> {
        let i = self.index_of(name).ok_or_else(|| Error::UnknownStructure {
            name: name.to_string(),
            available: self.names(),
        })?;
        Ok(self.entries.remove(i))
    }

    pub fn cast<U: Real>(&self) -> StructureTokenTable<U> {
        StructureTokenTable {
            dim: self.dim,
            grid: self.grid,
            pos: self.pos.cast(),
            pos_trainable: self.pos_trainable,
            entries: self
                .entries
                .iter()
                .map(|e| TokenEntry {
                    name: e.name.clone(),
                    vector: e.vector.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    fn token_leaf(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let e = self.get(name)?;
        Ok(g.param(&token_key(name), &e.vector, e.trainable))
    }

    /// Positional grid as `[gh·gw, D]` rows, bilinearly resampled when the
    /// feature grid differs from the stored one.
    fn pos_leaf(&self, g: &mut Graph<T>, gh: usize, gw: usize) -> Result<Var> {
        let p = g.param(POS_KEY, &self.pos, self.pos_trainable);
        if (gh, gw) == self.grid {
            return Ok(p);
        }
        let chw = nn::rows_to_chw(g, p, self.grid.0, self.grid.1)?;
        let r = g.resize_bilinear(chw, gh, gw)?;
        nn::chw_to_rows(g, r)
    }
}

/// Every cell of the `gh×gw` grid holds a copy of `token`.
pub fn replicate_token<T: Real>(token: &[T], shape: (usize, usize), dim: usize) -> Result<Tensor<T>> {
    if token.len() != dim {
        return Err(Error::shape(format!(
            "token of length {} for a decoder of width {dim}",
            token.len()
        )));
    }
    let mut data = Vec::with_capacity(shape.0 * shape.1 * dim);
    for _ in 0..shape.0 * shape.1 {
        data.extend_from_slice(token);
    }
    Tensor::new(vec![shape.0, shape.1, dim], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Latent width D of tokens, states and the positional grid.
    pub dim: usize,
    /// Number N of two-way blocks, i.e. the trajectory length.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 384,
            blocks: 4,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config(format!("{prefix}.dim"), "must be positive"));
        }
        if self.blocks == 0 {
            return Err(Error::config(format!("{prefix}.blocks"), "must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(
                format!("{prefix}.heads"),
                format!("must divide dim {}", self.dim),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(format!("{prefix}.mlp_ratio"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttention {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d, d)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        heads: usize,
    ) -> Result<Var> {
        let q = self.q.forward(g, s, q_in)?;
        let k = self.k.forward(g, s, k_in)?;
        let v = self.v.forward(g, s, v_in)?;
        let a = g.attention(q, k, v, heads)?;
        self.o.forward(g, s, a)
    }
}

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    token_to_image: CrossAttention,
    norm1: Norm,
    mlp1: Linear,
    mlp2: Linear,
    norm2: Norm,
    image_to_token: CrossAttention,
    norm3: Norm,
}

/// Graph handles for one conditioning pass.
#[derive(Clone, Debug)]
pub struct TrajectoryVars {
    /// Image states as `[gh·gw, D]` rows, one per block.
    pub states: Vec<Var>,
    /// Token states as `[1, D]`.
    pub token_states: Vec<Var>,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedTrajectory<T> {
    /// Each `[gh, gw, D]`.
    pub states: Vec<Tensor<T>>,
    pub token_states: Vec<Tensor<T>>,
    pub token_name: String,
}

impl<T: Real> ConditionedTrajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn check_finite<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    if let Some(i) = t.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "{what}: non-finite value at flat index {i} of tensor {:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ConditioningDecoder {
    pub cfg: DecoderConfig,
    pub feat_dim: usize,
    mlp_in: Linear,
    mlp_out: Linear,
    blocks: Vec<TwoWayBlock>,
}

impl ConditioningDecoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        feat_dim: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate("model.decoder")?;
        let d = cfg.dim;
        let mlp_in = Linear::new(store, rng, &format!("{prefix}.mlp_in"), feat_dim, d)?;
        let mlp_out = Linear::new(store, rng, &format!("{prefix}.mlp_out"), d, d)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let p = format!("{prefix}.block{i}");
            blocks.push(TwoWayBlock {
                token_to_image: CrossAttention::new(store, rng, &format!("{p}.t2i"), d)?,
                norm1: Norm::new(store, &format!("{p}.norm1"), d)?,
                mlp1: Linear::new(store, rng, &format!("{p}.mlp1"), d, d * cfg.mlp_ratio)?,
                mlp2: Linear::new(store, rng, &format!("{p}.mlp2"), d * cfg.mlp_ratio, d)?,
                norm2: Norm::new(store, &format!("{p}.norm2"), d)?,
                image_to_token: CrossAttention::new(store, rng, &format!("{p}.i2t"), d)?,
                norm3: Norm::new(store, &format!("{p}.norm3"), d)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            feat_dim,
            mlp_in,
            mlp_out,
            blocks,
        })
    }

    /// Names of the final projection layer, for tests that zero it.
    pub fn projection_output(&self) -> &Linear {
        &self.mlp_out
    }

    /// MLP projection of `[gh·gw, feat_dim]` rows into the decoder space.
    pub fn project<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, features: Var) -> Result<Var> {
        let w = g.value(features).shape()[1];
        if w != self.feat_dim {
            return Err(Error::shape(format!(
                "feature width {w} does not match the decoder input width {}",
                self.feat_dim
            )));
        }
        let h = self.mlp_in.forward(g, s, features)?;
        let h = g.gelu(h);
        self.mlp_out.forward(g, s, h)
    }

    pub fn features_leaf<T: Real>(&self, g: &mut Graph<T>, features: &FeatureGrid) -> Var {
        g.constant(features.as_rows().cast())
    }

    /// One block: token→image attention, token MLP, image→token attention,
    /// each followed by residual addition and layer normalisation. `pos` is
    /// added to the image side of queries and keys.
    #[allow(clippy::too_many_arguments)]
    pub fn two_way_block<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        index: usize,
        state: Var,
        token: Var,
        pos: Var,
    ) -> Result<(Var, Var)> {
        let b = self.blocks.get(index).ok_or_else(|| {
            Error::InvalidInput(format!("block {index} of {}", self.blocks.len()))
        })?;
        let heads = self.cfg.heads;
        let keyed = g.add(state, pos)?;

        let a = b.token_to_image.forward(g, s, token, keyed, state, heads)?;
        let t = g.add(token, a)?;
        let t = b.norm1.layer(g, s, t)?;

        let m = b.mlp1.forward(g, s, t)?;
        let m = g.gelu(m);
        let m = b.mlp2.forward(g, s, m)?;
        let t = g.add(t, m)?;
        let t = b.norm2.layer(g, s, t)?;

        let a = b.image_to_token.forward(g, s, keyed, t, t, heads)?;
        let x = g.add(state, a)?;
        let x = b.norm3.layer(g, s, x)?;

        check_finite(g, x, &format!("two-way block {index} image state"))?;
        check_finite(g, t, &format!("two-way block {index} token state"))?;
        Ok((x, t))
    }

    /// Conditions an already projected grid on one token.
    pub fn condition_projected<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        table: &StructureTokenTable<T>,
        projected: Var,
        grid: (usize, usize),
        token_name: &str,
    ) -> Result<TrajectoryVars> {
        if table.dim() != self.cfg.dim {
            return Err(Error::shape(format!(
                "token width {} for a decoder of width {}",
                table.dim(),
                self.cfg.dim
            )));
        }
        let tok = table.token_leaf(g, token_name)?;
        let pos = table.pos_leaf(g, grid.0, grid.1)?;
        let token = g.reshape(tok, &[1, self.cfg.dim])?;
        let replicated = g.broadcast_rows(tok, grid.0 * grid.1);
        let mut x = g.add(projected, replicated)?;
        let mut t = token;
        let mut out = TrajectoryVars {
            states: Vec::with_capacity(self.blocks.len()),
            token_states: Vec::with_capacity(self.blocks.len()),
            grid,
        };
        for i in 0..self.blocks.len() {
            (x, t) = self.two_way_block(g, s, i, x, t, pos)?;
            out.states.push(x);
            out.token_states.push(t);
        }
        Ok(out)
    }

    pub fn condition_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        table: &StructureTokenTable<T>,
        features: &FeatureGrid,
        token_name: &str,
    ) -> Result<TrajectoryVars> {
        table.get(token_name)?;
        let f = self.features_leaf(g, features);
        let p = self.project(g, s, f)?;
        self.condition_projected(g, s, table, p, (features.gh(), features.gw()), token_name)
    }

    /// Value-level conditioning pass.
    pub fn condition<T: Real>(
        &self,
        s: &ParamStore<T>,
        table: &StructureTokenTable<T>,
        features: &FeatureGrid,
        token_name: &str,
    ) -> Result<ConditionedTrajectory<T>> {
        let mut g = Graph::new();
        let tv = self.condition_graph(&mut g, s, table, features, token_name)?;
        let (gh, gw) = tv.grid;
        let d = self.cfg.dim;
        Ok(ConditionedTrajectory {
            states: tv
                .states
                .iter()
                .map(|&v| g.value(v).clone().reshape(&[gh, gw, d]))
                .collect::<Result<_>>()?,
            token_states: tv
                .token_states
                .iter()
                .map(|&v| g.value(v).clone().reshape(&[d]))
                .collect::<Result<_>>()?,
            token_name: token_name.to_string(),
        })
    }
}

/// `−(1/M) Σ_i log min_{j≠i} ‖x_i − x_j‖`, distances clamped below at
/// [`KOLEO_EPS`]. Diagnostic only.
pub fn koleo(points: &[Vec<f64>]) -> Result<f64> {
    let m = points.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!("koleo needs at least 2 points, got {m}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("koleo points differ in dimension"));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let dist = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                best = best.min(dist);
            }
        }
        total += best.max(KOLEO_EPS).ln();
    }
    Ok(-total / m as f64)
}

/// KoLeo of the per-cell vectors of each trajectory state.
pub fn trajectory_koleo<T: Real>(traj: &ConditionedTrajectory<T>) -> Result<Vec<f64>> {
    traj.states
        .iter()
        .map(|s| {
            let d = *s.shape().last().unwrap_or(&1);
            let pts: Vec<Vec<f64>> = s
                .data()
                .chunks(d)
                .map(|c| c.iter().map(|v| v.as_f64()).collect())
                .collect();
            koleo(&pts)
        })
        .collect()
}
