//! Tape-based reverse-mode differentiation over single-image CHW tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as named leaves (memoised per name), frozen inputs as constants.
//! [`Graph::backward`] walks the tape in reverse and leaves one gradient per
//! node that requires it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::objectives::{self, LossConfig};
use crate::tensor::{self, ConvGeom, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow { x: Var, v: Var },
    AddChannel { x: Var, v: Var },
    BroadcastRows { v: Var },
    Transpose { x: Var, m: usize, n: usize },
    Reshape(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cout: usize },
    ConvTranspose2 { x: Var, w: Var, b: Var, cin: usize, cout: usize, h: usize, w_in: usize },
    Resize { x: Var, c: usize, h: usize, w: usize },
    Concat { parts: Vec<Var> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    LossOnLogits { logits: Var, dlogits: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn dims3<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(format!("expected a CHW tensor, got shape {s:?}"))),
    }
}

fn grad_buf<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Named parameter leaf. Repeated calls with the same name return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2(self.value(a))?;
        let (br, bc) = dims2(self.value(b))?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                self.value(a).shape(),
                if ta { "ᵀ" } else { "" },
                self.value(b).shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let out = tensor::matmul(self.value(a).data(), ta, self.value(b).data(), tb, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb, m, k, n }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// `x[m,n] + v[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x))?;
        if self.value(v).len() != n {
            return Err(Error::shape(format!(
                "add_row: row vector of {} for width {n}",
                self.value(v).len()
            )));
        }
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(vv) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow { x, v }, ng))
    }

    /// `x[C,...] + v[C]` broadcast over everything but the leading axis.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = shape[0];
        if self.value(v).len() != c {
            return Err(Error::shape(format!(
                "add_channel: {} biases for {c} channels",
                self.value(v).len()
            )));
        }
        let plane = self.value(x).len() / c.max(1);
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (ch, chunk) in out.chunks_mut(plane.max(1)).enumerate().take(c) {
            for o in chunk.iter_mut() {
                *o += vv[ch];
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddChannel { x, v }, ng))
    }

    /// Replicates a length-`n` vector into an `m×n` matrix.
    pub fn broadcast_rows(&mut self, v: Var, m: usize) -> Var {
        let row = self.value(v).data().to_vec();
        let n = row.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        let ng = self.ng(v);
        self.push(
            Tensor::new(vec![m, n], out).expect("broadcast shape"),
            Op::BroadcastRows { v },
            ng,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { x, m, n }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_value);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu(x, slope), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm: affine width mismatch"));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let (out, stats) = normalize_groups(
            self.value(x).data(),
            m,
            n,
            eps,
            |_, j| self.value(gamma).data()[j],
            |_, j| self.value(beta).data()[j],
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { x, gamma, beta, stats },
            ng,
        ))
    }

    /// Per-channel normalisation over the spatial plane of a CHW tensor.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("instance_norm: affine width mismatch"));
        }
        let eps = T::lit(INSTANCE_NORM_EPS);
        let (out, stats) = normalize_groups(
            self.value(x).data(),
            c,
            h * w,
            eps,
            |i, _| self.value(gamma).data()[i],
            |i, _| self.value(beta).data()[i],
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::InstanceNorm { x, gamma, beta, stats },
            ng,
        ))
    }

    /// Square-kernel convolution without bias: `w` is `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = dims3(self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d: weight {ws:?} for {cin} input channels")));
        }
        let geom = ConvGeom { cin, h, w: wd, kernel: ws[2], stride, pad };
        if h + 2 * pad < geom.kernel || wd + 2 * pad < geom.kernel {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        let (ho, wo) = geom.out_hw();
        let cout = ws[0];
        let col = tensor::im2col(self.value(x).data(), &geom);
        let out = tensor::matmul(self.value(w).data(), false, &col, false, cout, geom.col_rows(), ho * wo);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(vec![cout, ho, wo], out)?, Op::Conv2d { x, w, geom, cout }, ng))
    }

    /// Stride-2, kernel-2 transposed convolution: `w` is `[cin, cout, 2, 2]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, h, wd) = dims3(self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != cin || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::shape(format!("conv_transpose2: weight {ws:?} for {cin} channels")));
        }
        let cout = ws[1];
        if self.value(b).len() != cout {
            return Err(Error::shape("conv_transpose2: bias width"));
        }
        // z[co*4 + tap, pixel] = sum_ci w[ci, co*4 + tap] * x[ci, pixel]
        let z = tensor::matmul(self.value(w).data(), true, self.value(x).data(), false, cout * 4, cin, h * wd);
        let bias = self.value(b).data();
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); cout * ho * wo];
        for co in 0..cout {
            for tap in 0..4 {
                let (dy, dx) = (tap / 2, tap % 2);
                let zrow = &z[(co * 4 + tap) * h * wd..(co * 4 + tap + 1) * h * wd];
                for i in 0..h {
                    for j in 0..wd {
                        out[(co * ho + 2 * i + dy) * wo + 2 * j + dx] = zrow[i * wd + j] + bias[co];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![cout, ho, wo], out)?,
            Op::ConvTranspose2 { x, w, b, cin, cout, h, w_in: wd },
            ng,
        ))
    }

    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x))?;
        let out = tensor::resize_bilinear(self.value(x).data(), c, h, w, ho, wo);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, ho, wo], out)?, Op::Resize { x, c, h, w }, ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != first[1..] {
                return Err(Error::shape(format!("concat: {s:?} vs {first:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// Multi-head scaled dot-product attention (projections excluded):
    /// `q[lq,d]`, `k[lk,d]`, `v[lk,d]` to `[lq,d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (lq, d) = dims2(self.value(q))?;
        let (lk, dk) = dims2(self.value(k))?;
        let (lv, dv) = dims2(self.value(v))?;
        if dk != d || dv != d || lv != lk || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "attention: q {:?} k {:?} v {:?} heads {heads}",
                [lq, d],
                [lk, dk],
                [lv, dv]
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            let off = h * dh;
            // S = Q_h K_hᵀ
            strided_gemm(lq, dh, lk, (qd, off, d, 1), (kd, off, 1, d), T::zero(), (p, 0, lk, 1));
            for row in p.chunks_mut(lk) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s * scale - mx).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            strided_gemm(lq, lk, dh, (&*p, 0, lk, 1), (vd, off, d, 1), T::zero(), (&mut out, off, d, 1));
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Tensor::new(vec![lq, d], out)?, Op::Attention { q, k, v, heads, probs }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.value(x).sum() / T::lit(n as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Weighted focal + Dice loss of a single-channel logit map against a
    /// binary target.
    pub fn focal_dice_loss(&mut self, logits: Var, target: &[T], cfg: &LossConfig) -> Result<Var> {
        let (loss, dlogits) = objectives::combined_loss_with_grad(self.value(logits).data(), target, cfg)?;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::LossOnLogits { logits, dlogits }, ng))
    }

    /// Cross-entropy + mean soft Dice over a `(K+1)`-channel softmax.
    pub fn softmax_ce_dice_loss(&mut self, logits: Var, labels: &[usize], smooth: f64) -> Result<Var> {
        let (c, h, w) = dims3(self.value(logits))?;
        let (loss, dlogits) =
            objectives::softmax_ce_dice_with_grad(self.value(logits).data(), c, h * w, labels, smooth)?;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::LossOnLogits { logits, dlogits }, ng))
    }

    // ------------------------------------------------------------------
    // reverse pass

    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![T::one()])?);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter leaf touched by the pass, in
    /// first-use order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.param_order
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, v)| (name.as_str(), self.grad(*v)))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let shape = self.value(*a).shape().to_vec();
                    let buf = grad_buf(grads, *a, &shape);
                    if *ta {
                        // dA[k,m] = B · dCᵀ  (B is k×n, or its transpose)
                        tensor::gemm(k, n, m, bv, *tb, gd, true, T::one(), buf);
                    } else {
                        // dA[m,k] = dC · Bᵀ
                        tensor::gemm(m, n, k, gd, false, bv, !*tb, T::one(), buf);
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let shape = self.value(*b).shape().to_vec();
                    let buf = grad_buf(grads, *b, &shape);
                    if *tb {
                        // dB[n,k] = dCᵀ · A
                        tensor::gemm(n, m, k, gd, true, av, *ta, T::one(), buf);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        tensor::gemm(k, m, n, av, !*ta, gd, false, T::one(), buf);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        let buf = grad_buf(grads, v, g.shape());
                        for (o, &x) in buf.iter_mut().zip(gd) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.ng(v) {
                        let ov = self.value(other).data();
                        let buf = grad_buf(grads, v, g.shape());
                        for ((o, &x), &y) in buf.iter_mut().zip(gd).zip(ov) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, g.shape());
                    for (o, &x) in buf.iter_mut().zip(gd) {
                        *o += x * *s;
                    }
                }
            }
            Op::AddRow { x, v } => {
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, g.shape());
                    for (o, &d) in buf.iter_mut().zip(gd) {
                        *o += d;
                    }
                }
                if self.ng(*v) {
                    let n = self.value(*v).len();
                    let buf = grad_buf(grads, *v, &[n]);
                    for row in gd.chunks(n) {
                        for (o, &d) in buf.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                }
            }
            Op::AddChannel { x, v } => {
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, g.shape());
                    for (o, &d) in buf.iter_mut().zip(gd) {
                        *o += d;
                    }
                }
                if self.ng(*v) {
                    let c = self.value(*v).len();
                    let plane = gd.len() / c.max(1);
                    let buf = grad_buf(grads, *v, &[c]);
                    for (ch, chunk) in gd.chunks(plane.max(1)).enumerate().take(c) {
                        buf[ch] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::BroadcastRows { v } => {
                if self.ng(*v) {
                    let n = self.value(*v).len();
                    let shape = self.value(*v).shape().to_vec();
                    let buf = grad_buf(grads, *v, &shape);
                    for row in gd.chunks(n) {
                        for (o, &d) in buf.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Transpose { x, m, n } => {
                if self.ng(*x) {
                    let (m, n) = (*m, *n);
                    let buf = grad_buf(grads, *x, &[m, n]);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += gd[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let buf = grad_buf(grads, *x, &shape);
                    for (o, &d) in buf.iter_mut().zip(gd) {
                        *o += d;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x).data();
                    let buf = grad_buf(grads, *x, g.shape());
                    for ((o, &d), &xi) in buf.iter_mut().zip(gd).zip(xv) {
                        *o += d * gelu_grad(xi);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.ng(*x) {
                    let xv = self.value(*x).data();
                    let buf = grad_buf(grads, *x, g.shape());
                    for ((o, &d), &xi) in buf.iter_mut().zip(gd).zip(xv) {
                        *o += if xi > T::zero() { d } else { d * *slope };
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (m, n) = dims2(self.value(*x)).expect("checked at forward");
                let gam = self.value(*gamma).data().to_vec();
                self.normalize_backward(
                    *x,
                    *gamma,
                    *beta,
                    stats,
                    m,
                    n,
                    gd,
                    grads,
                    |_, j| gam[j],
                    |_, j| j,
                );
            }
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let (c, h, w) = dims3(self.value(*x)).expect("checked at forward");
                let gam = self.value(*gamma).data().to_vec();
                self.normalize_backward(
                    *x,
                    *gamma,
                    *beta,
                    stats,
                    c,
                    h * w,
                    gd,
                    grads,
                    |i, _| gam[i],
                    |i, _| i,
                );
            }
            Op::Conv2d { x, w, geom, cout } => {
                let (ho, wo) = geom.out_hw();
                let cols = ho * wo;
                let rows = geom.col_rows();
                let xv = self.value(*x).data();
                if self.ng(*w) {
                    let col = tensor::im2col(xv, geom);
                    let shape = self.value(*w).shape().to_vec();
                    let buf = grad_buf(grads, *w, &shape);
                    tensor::gemm(*cout, cols, rows, gd, false, &col, true, T::one(), buf);
                }
                if self.ng(*x) {
                    let dcol = tensor::matmul(self.value(*w).data(), true, gd, false, rows, *cout, cols);
                    let shape = self.value(*x).shape().to_vec();
                    let buf = grad_buf(grads, *x, &shape);
                    tensor::col2im(&dcol, geom, buf);
                }
            }
            Op::ConvTranspose2 { x, w, b, cin, cout, h, w_in } => {
                let (h, wd, cin, cout) = (*h, *w_in, *cin, *cout);
                let (ho, wo) = (2 * h, 2 * wd);
                let mut dz = vec![T::zero(); cout * 4 * h * wd];
                for co in 0..cout {
                    for tap in 0..4 {
                        let (dy, dx) = (tap / 2, tap % 2);
                        let zrow = &mut dz[(co * 4 + tap) * h * wd..(co * 4 + tap + 1) * h * wd];
                        for i in 0..h {
                            for j in 0..wd {
                                zrow[i * wd + j] = gd[(co * ho + 2 * i + dy) * wo + 2 * j + dx];
                            }
                        }
                    }
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, &[cout]);
                    for co in 0..cout {
                        buf[co] += dz[co * 4 * h * wd..(co + 1) * 4 * h * wd].iter().copied().sum::<T>();
                    }
                }
                if self.ng(*w) {
                    let xv = self.value(*x).data();
                    let shape = self.value(*w).shape().to_vec();
                    let buf = grad_buf(grads, *w, &shape);
                    // dW[ci, co*4+tap] = sum_p x[ci,p] dz[co*4+tap,p]
                    tensor::gemm(cin, h * wd, cout * 4, xv, false, &dz, true, T::one(), buf);
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let shape = self.value(*x).shape().to_vec();
                    let buf = grad_buf(grads, *x, &shape);
                    tensor::gemm(cin, cout * 4, h * wd, wv, false, &dz, false, T::one(), buf);
                }
            }
            Op::Resize { x, c, h, w } => {
                if self.ng(*x) {
                    let (ho, wo) = (g.shape()[1], g.shape()[2]);
                    let back = tensor::resize_bilinear_backward(gd, *c, *h, *w, ho, wo);
                    let buf = grad_buf(grads, *x, &[*c, *h, *w]);
                    for (o, d) in buf.iter_mut().zip(back) {
                        *o += d;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let shape = self.value(p).shape().to_vec();
                        let buf = grad_buf(grads, p, &shape);
                        for (o, &d) in buf.iter_mut().zip(&gd[offset..offset + len]) {
                            *o += d;
                        }
                    }
                    offset += len;
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gd, grads);
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let scale = match node.op {
                        Op::Mean(_) => gd[0] / T::lit(n as f64),
                        _ => gd[0],
                    };
                    let shape = self.value(*x).shape().to_vec();
                    let buf = grad_buf(grads, *x, &shape);
                    for o in buf.iter_mut() {
                        *o += scale;
                    }
                }
            }
            Op::LossOnLogits { logits, dlogits } => {
                if self.ng(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let buf = grad_buf(grads, *logits, &shape);
                    for (o, &d) in buf.iter_mut().zip(dlogits) {
                        *o += d * gd[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &[(T, T)],
        groups: usize,
        size: usize,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
        gamma_at: impl Fn(usize, usize) -> T,
        affine_index: impl Fn(usize, usize) -> usize,
    ) {
        let xv = self.value(x).data();
        let aff_len = self.value(gamma).len();
        let mut dgamma = vec![T::zero(); aff_len];
        let mut dbeta = vec![T::zero(); aff_len];
        let mut dx = vec![T::zero(); xv.len()];
        let nf = T::lit(size as f64);
        for gi in 0..groups {
            let (mean, rstd) = stats[gi];
            let xs = &xv[gi * size..(gi + 1) * size];
            let gs = &gd[gi * size..(gi + 1) * size];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for j in 0..size {
                let xhat = (xs[j] - mean) * rstd;
                let a = affine_index(gi, j);
                dgamma[a] += gs[j] * xhat;
                dbeta[a] += gs[j];
                let dxhat = gs[j] * gamma_at(gi, j);
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for j in 0..size {
                let xhat = (xs[j] - mean) * rstd;
                let dxhat = gs[j] * gamma_at(gi, j);
                dx[gi * size + j] = rstd / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
        for (v, d) in [(x, dx), (gamma, dgamma), (beta, dbeta)] {
            if self.ng(v) {
                let shape = self.value(v).shape().to_vec();
                let buf = grad_buf(grads, v, &shape);
                for (o, di) in buf.iter_mut().zip(d) {
                    *o += di;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (lq, d) = dims2(self.value(q)).expect("checked");
        let lk = self.value(k).shape()[0];
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut dp = vec![T::zero(); lq * lk];
        for h in 0..heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            let off = h * dh;
            // dV_h = Pᵀ dO_h
            strided_gemm(lk, lq, dh, (p, 0, 1, lk), (gd, off, d, 1), T::one(), (&mut dv, off, d, 1));
            // dP = dO_h V_hᵀ
            strided_gemm(lq, dh, lk, (gd, off, d, 1), (vd, off, 1, d), T::zero(), (&mut dp, 0, lk, 1));
            for i in 0..lq {
                let prow = &p[i * lk..(i + 1) * lk];
                let drow = &mut dp[i * lk..(i + 1) * lk];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (ds, &pp) in drow.iter_mut().zip(prow) {
                    *ds = pp * (*ds - dot) * scale;
                }
            }
            // dQ_h = dS K_h ; dK_h = dSᵀ Q_h
            strided_gemm(lq, lk, dh, (&dp, 0, lk, 1), (kd, off, d, 1), T::one(), (&mut dq, off, d, 1));
            strided_gemm(lk, lq, dh, (&dp, 0, 1, lk), (qd, off, d, 1), T::one(), (&mut dk, off, d, 1));
        }
        for (var, dvec) in [(q, dq), (k, dk), (v, dv)] {
            if self.ng(var) {
                let shape = self.value(var).shape().to_vec();
                let buf = grad_buf(grads, var, &shape);
                for (o, di) in buf.iter_mut().zip(dvec) {
                    *o += di;
                }
            }
        }
    }
}

type View<'a, T> = (&'a [T], usize, usize, usize);
type ViewMut<'a, T> = (&'a mut [T], usize, usize, usize);

fn view_span(m: usize, n: usize, off: usize, rs: usize, cs: usize) -> usize {
    if m == 0 || n == 0 {
        return 0;
    }
    off + (m - 1) * rs + (n - 1) * cs + 1
}

/// gemm over (buffer, offset, row stride, col stride) views.
fn strided_gemm<T: Real>(m: usize, k: usize, n: usize, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert!(view_span(m, k, a.1, a.2, a.3) <= a.0.len());
    assert!(view_span(k, n, b.1, b.2, b.3) <= b.0.len());
    assert!(view_span(m, n, c.1, c.2, c.3) <= c.0.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: spans checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr().add(a.1),
            a.2 as isize,
            a.3 as isize,
            b.0.as_ptr().add(b.1),
            b.2 as isize,
            b.3 as isize,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2 as isize,
            c.3 as isize,
        );
    }
}

fn normalize_groups<T: Real>(
    x: &[T],
    groups: usize,
    size: usize,
    eps: T,
    gamma: impl Fn(usize, usize) -> T,
    beta: impl Fn(usize, usize) -> T,
) -> (Vec<T>, Vec<(T, T)>) {
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(groups);
    let nf = T::lit(size as f64);
    for gi in 0..groups {
        let xs = &x[gi * size..(gi + 1) * size];
        let mean = xs.iter().copied().sum::<T>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..size {
            out[gi * size + j] = (xs[j] - mean) * rstd * gamma(gi, j) + beta(gi, j);
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

fn gelu_value<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
