//! Reverse-mode automatic differentiation over coarse tensor ops.
//!
//! A [`Graph`] records every op of one forward pass. Ops are deliberately
//! coarse (a whole linear layer, a whole attention call) so the tape stays
//! short and each backward rule is written by hand against its forward.
//!
//! Every op also feeds an [`OpCounter`] so analytic cost formulas can be
//! checked against what was actually executed.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// FLOPs charged per element of a softmax or an RMS normalization.
pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;
pub const NORM_FLOPS_PER_ELEM: u64 = 5;

/// Executed work, under the convention 1 multiply-accumulate = 2 FLOPs.
///
/// Linear layers, attention products, softmax and normalization are charged;
/// elementwise glue (residual adds, activations, rotary rotations, lerps) is not.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub flops: u64,
    /// Query-key pairs scored, summed over batch and heads.
    pub key_comparisons: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Attention span of one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnSpan {
    /// `k × k` window around the query, shifted inward at borders so it
    /// always covers `min(k, H) × min(k, W)` tokens.
    Neighborhood(usize),
    Global,
}

impl AttnSpan {
    /// First index and length of the window along an axis of `len` tokens.
    pub fn window(self, pos: usize, len: usize) -> (usize, usize) {
        match self {
            AttnSpan::Global => (0, len),
            AttnSpan::Neighborhood(k) if k >= len => (0, len),
            AttnSpan::Neighborhood(k) => {
                let r = k / 2;
                let start = pos.saturating_sub(r).min(len - k);
                (start, k)
            }
        }
    }

    /// Keys seen by every query on an `h × w` grid.
    pub fn keys_per_query(self, h: usize, w: usize) -> usize {
        self.window(0, h).1 * self.window(0, w).1
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub span: AttnSpan,
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Add(Var, Var),
    Lerp { a: Var, b: Var, raw: Var, alpha: T },
    Gather { x: Var, idx: Rc<Vec<u32>> },
    Concat { a: Var, b: Var, outer: usize, ia: usize, ib: usize },
    Slice { x: Var, start: usize, len: usize, width: usize },
    RmsNorm { x: Var, scale: Var, group: usize, inv_rms: Vec<T> },
    Rope { x: Var, head_dim: usize, tables: Rc<RopeTables<T>> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Geglu { x: Var, hidden: usize },
    Gelu { x: Var },
    Mse { pred: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Precomputed cos/sin for axial rotary embeddings on one grid.
pub(crate) struct RopeTables<T> {
    /// Per token, `head_dim / 2` rotation pairs.
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub pairs: usize,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    counter: OpCounter,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }

    /// Per-parameter gradients indexed like the store; unused parameters get `None`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        for (id, v) in self.params.iter() {
            out[id.index()] = self.grads[v.0].take();
        }
        out
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu<T: Real>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64_lossy(0.797_884_560_802_865_4);
    let a = T::from_f64_lossy(0.044_715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(0.797_884_560_802_865_4);
    let a = T::from_f64_lossy(0.044_715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true, counter: OpCounter::default() }
    }

    /// A graph that records no backward state.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is wanted.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// `x (…, din) · w (din, dout) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Shape(format!("linear: input {xs:?} with weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).len() / din;
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&shape);
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != dout {
                return Err(Error::Shape(format!("linear bias {} vs {dout}", bias.len())));
            }
            for row in out.data_mut().chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(rows, din, dout, self.value(x).data(), Layout::N, self.value(w).data(), Layout::N, beta, out.data_mut());
        self.counter.flops += 2 * (rows * din * dout) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b, rows, din, dout }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `(1 − α)·a + α·b` with `α = sigmoid(raw)`, `raw` a one-element tensor.
    pub fn lerp(&mut self, a: Var, b: Var, raw: Var) -> Result<Var> {
        let alpha = sigmoid(self.value(raw).data()[0]);
        let out = self.value(a).zip_map(self.value(b), |x, y| x + alpha * (y - x))?;
        Ok(self.push(out, Op::Lerp { a, b, raw, alpha }, &[a, b, raw]))
    }

    /// `out[i] = x[idx[i]]`; `idx` must be injective.
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(Error::Shape(format!("gather: {} indices for shape {shape:?}", idx.len())));
        }
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i as usize]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Gather { x, idx }, &[x]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || axis >= sa.len() || (0..sa.len()).any(|i| i != axis && sa[i] != sb[i]) {
            return Err(Error::Shape(format!("concat axis {axis}: {sa:?} vs {sb:?}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let ia: usize = sa[axis..].iter().product();
        let ib: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * (ia + ib));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for o in 0..outer {
            data.extend_from_slice(&da[o * ia..(o + 1) * ia]);
            data.extend_from_slice(&db[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat { a, b, outer, ia, ib }, &[a, b]))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let width = *shape.last().unwrap();
        if start + len > width {
            return Err(Error::Shape(format!("slice {start}+{len} of width {width}")));
        }
        let mut data = Vec::with_capacity(self.value(x).len() / width * len);
        for row in self.value(x).data().chunks(width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&oshape, data)?;
        Ok(self.push(out, Op::Slice { x, start, len, width }, &[x]))
    }

    /// RMS normalization over the last axis followed by a `(1 + scale)` gain.
    ///
    /// `x` is `(batch, tokens, channels)`; `scale` is either `(channels)`,
    /// shared by every row, or `(batch, channels)`, one gain per batch element.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().unwrap();
        let rows = self.value(x).len() / c;
        let ss = self.value(scale).shape().to_vec();
        let group = match ss[..] {
            [sc] if sc == c => rows,
            [b, sc] if sc == c && xs.len() >= 2 && xs[0] == b => rows / b,
            _ => return Err(Error::Shape(format!("rms_norm: x {xs:?} with scale {ss:?}"))),
        };
        let eps = T::from_f64_lossy(eps);
        let cf = T::from_usize(c).unwrap();
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / cf;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            let s = &sv[(r / group) * c..(r / group + 1) * c];
            for ((o, &v), &g) in out[r * c..(r + 1) * c].iter_mut().zip(row).zip(s) {
                *o = v * inv * (T::one() + g);
            }
        }
        self.counter.flops += NORM_FLOPS_PER_ELEM * xv.len() as u64;
        let out = Tensor::from_vec(&xs, out)?;
        Ok(self.push(out, Op::RmsNorm { x, scale, group, inv_rms }, &[x, scale]))
    }

    /// Axial rotary embedding of `x (batch, h·w, heads·head_dim)`.
    pub(crate) fn rope(&mut self, x: Var, head_dim: usize, tables: Rc<RopeTables<T>>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().unwrap();
        if c % head_dim != 0 || tables.pairs * 2 != head_dim {
            return Err(Error::Shape(format!("rope: width {c} with head_dim {head_dim}")));
        }
        let tokens = tables.cos.len() / tables.pairs;
        let mut out = self.value(x).clone();
        apply_rope(out.data_mut(), c, head_dim, tokens, &tables, false);
        Ok(self.push(out, Op::Rope { x, head_dim, tables }, &[x]))
    }

    /// Scaled dot-product attention over `(batch, h·w, heads·head_dim)` tensors.
    pub(crate) fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom) -> Result<Var> {
        let c = geom.heads * geom.head_dim;
        let n = geom.grid_h * geom.grid_w;
        let want = [geom.batch, n, c];
        for t in [q, k, v] {
            if self.value(t).shape() != want {
                return Err(Error::Shape(format!("attention: {:?} vs {want:?}", self.value(t).shape())));
            }
        }
        let keep = self.grad_enabled
            && [q, k, v].iter().any(|t| self.nodes[t.0].needs_grad);
        let (out, probs, comparisons) =
            attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), geom, keep);
        self.counter.key_comparisons += comparisons;
        self.counter.flops += comparisons * (4 * geom.head_dim as u64 + SOFTMAX_FLOPS_PER_ELEM);
        let out = Tensor::from_vec(&want, out)?;
        Ok(self.push(out, Op::Attention { q, k, v, geom, probs }, &[q, k, v]))
    }

    /// Gated GELU: the last axis `[a | g]` maps to `a · gelu(g)`.
    pub fn geglu(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let w = *xs.last().unwrap();
        if w % 2 != 0 {
            return Err(Error::Shape(format!("geglu needs an even width, got {w}")));
        }
        let h = w / 2;
        let mut data = Vec::with_capacity(self.value(x).len() / 2);
        for row in self.value(x).data().chunks(w) {
            data.extend(row[..h].iter().zip(&row[h..]).map(|(&a, &g)| a * gelu(g)));
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = h;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Geglu { x, hidden: h }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Mean squared error against a constant target; a one-element result.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(&target)?;
        let n = T::from_usize(p.len()).unwrap();
        let loss = p.data().iter().zip(target.data()).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b)) / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred]))
    }

    /// Back-propagates from a one-element output.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    gemm(rows, dout, din, gd, Layout::N, self.value(*w).data(), Layout::T, T::zero(), dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(&[din, dout]);
                    gemm(din, rows, dout, self.value(*x).data(), Layout::T, gd, Layout::N, T::zero(), dw.data_mut());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in gd.chunks(dout) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[dout], db).unwrap());
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Lerp { a, b, raw, alpha } => {
                let alpha = *alpha;
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * (T::one() - alpha)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| x * alpha));
                }
                if self.wants(*raw) {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let s = gd
                        .iter()
                        .zip(av.iter().zip(bv))
                        .fold(T::zero(), |acc, (&gg, (&x, &y))| acc + gg * (y - x));
                    let d = s * alpha * (T::one() - alpha);
                    self.accumulate(grads, *raw, Tensor::full(self.value(*raw).shape(), d));
                }
            }
            Op::Gather { x, idx } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&j, &gg) in idx.iter().zip(gd) {
                    d[j as usize] += gg;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b, outer, ia, ib } => {
                let (outer, ia, ib) = (*outer, *ia, *ib);
                let mut da = Vec::with_capacity(outer * ia);
                let mut db = Vec::with_capacity(outer * ib);
                for o in 0..outer {
                    let base = o * (ia + ib);
                    da.extend_from_slice(&gd[base..base + ia]);
                    db.extend_from_slice(&gd[base + ia..base + ia + ib]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(self.value(*a).shape(), da).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db).unwrap());
            }
            Op::Slice { x, start, len, width } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (drow, grow) in dx.data_mut().chunks_mut(*width).zip(gd.chunks(*len)) {
                    drow[*start..*start + *len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RmsNorm { x, scale, group, inv_rms } => {
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                let c = *self.value(*x).shape().last().unwrap();
                let cf = T::from_usize(c).unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                let mut ds = vec![T::zero(); sv.len()];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = &xv[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let soff = (r / group) * c;
                    let s = &sv[soff..soff + c];
                    let mut dot = T::zero();
                    for j in 0..c {
                        let gs = gr[j] * (T::one() + s[j]);
                        dot += gs * row[j];
                        ds[soff + j] += gr[j] * row[j] * inv;
                    }
                    let k = inv * inv * inv * dot / cf;
                    for j in 0..c {
                        dx[r * c + j] = gr[j] * (T::one() + s[j]) * inv - row[j] * k;
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx).unwrap());
                }
                if self.wants(*scale) {
                    self.accumulate(grads, *scale, Tensor::from_vec(self.value(*scale).shape(), ds).unwrap());
                }
            }
            Op::Rope { x, head_dim, tables } => {
                let mut dx = g.clone();
                let c = *g.shape().last().unwrap();
                let tokens = tables.cos.len() / tables.pairs;
                apply_rope(dx.data_mut(), c, *head_dim, tokens, tables, true);
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    gd,
                    probs,
                    *geom,
                );
                let shape = self.value(*q).shape().to_vec();
                self.accumulate(grads, *q, Tensor::from_vec(&shape, dq).unwrap());
                self.accumulate(grads, *k, Tensor::from_vec(&shape, dk).unwrap());
                self.accumulate(grads, *v, Tensor::from_vec(&shape, dv).unwrap());
            }
            Op::Geglu { x, hidden } => {
                let h = *hidden;
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                for ((drow, row), grow) in dx.chunks_mut(2 * h).zip(xv.chunks(2 * h)).zip(gd.chunks(h)) {
                    for j in 0..h {
                        let (a, gate) = (row[j], row[h + j]);
                        drow[j] = grow[j] * gelu(gate);
                        drow[h + j] = grow[j] * a * gelu_grad(gate);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx).unwrap());
            }
            Op::Gelu { x } => {
                let dx = self.value(*x).zip_map(g, |xv, gg| gg * gelu_grad(xv)).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = T::from_usize(p.len()).unwrap();
                let two = T::from_f64_lossy(2.0) * gd[0] / n;
                let dp = p.zip_map(target, |a, b| two * (a - b)).unwrap();
                self.accumulate(grads, *pred, dp);
            }
        }
    }
}

fn apply_rope<T: Real>(
    data: &mut [T],
    width: usize,
    head_dim: usize,
    tokens: usize,
    tables: &RopeTables<T>,
    inverse: bool,
) {
    let pairs = tables.pairs;
    for (row_idx, row) in data.chunks_mut(width).enumerate() {
        let tok = row_idx % tokens;
        let cos = &tables.cos[tok * pairs..(tok + 1) * pairs];
        let sin = &tables.sin[tok * pairs..(tok + 1) * pairs];
        for head in row.chunks_mut(head_dim) {
            for p in 0..pairs {
                let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                let (a, b) = (head[2 * p], head[2 * p + 1]);
                head[2 * p] = a * c - b * s;
                head[2 * p + 1] = a * s + b * c;
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // independent partial sums so the loop vectorizes
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Returns `(output, probabilities if kept, key comparisons)`.
fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    geom: AttnGeom,
    keep_probs: bool,
) -> (Vec<T>, Vec<T>, u64) {
    let AttnGeom { batch, heads, head_dim: hd, grid_h, grid_w, span } = geom;
    let c = heads * hd;
    let n = grid_h * grid_w;
    let kpq = span.keys_per_query(grid_h, grid_w);
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut out = vec![T::zero(); batch * n * c];
    let mut probs = if keep_probs { vec![T::zero(); batch * heads * n * kpq] } else { Vec::new() };
    let mut scores = vec![T::zero(); kpq];
    let mut keys = Vec::with_capacity(kpq);
    for b in 0..batch {
        let base = b * n * c;
        for qi in 0..grid_h {
            let (r0, rl) = span.window(qi, grid_h);
            for qj in 0..grid_w {
                let (c0, cl) = span.window(qj, grid_w);
                keys.clear();
                for r in r0..r0 + rl {
                    keys.extend((c0..c0 + cl).map(|cc| r * grid_w + cc));
                }
                let qn = qi * grid_w + qj;
                for h in 0..heads {
                    let qoff = base + qn * c + h * hd;
                    let qv = &q[qoff..qoff + hd];
                    let mut mx = T::neg_infinity();
                    for (s, &kn) in scores.iter_mut().zip(&keys) {
                        let koff = base + kn * c + h * hd;
                        *s = dot(qv, &k[koff..koff + hd]) * scale;
                        mx = mx.max(*s);
                    }
                    let mut sum = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let o = &mut out[qoff..qoff + hd];
                    for (s, &kn) in scores.iter_mut().zip(&keys) {
                        *s = *s / sum;
                        let voff = base + kn * c + h * hd;
                        for (oo, &vv) in o.iter_mut().zip(&v[voff..voff + hd]) {
                            *oo += *s * vv;
                        }
                    }
                    if keep_probs {
                        let poff = ((b * heads + h) * n + qn) * kpq;
                        probs[poff..poff + kpq].copy_from_slice(&scores);
                    }
                }
            }
        }
    }
    (out, probs, (batch * heads * n * kpq) as u64)
}

fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    probs: &[T],
    geom: AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnGeom { batch, heads, head_dim: hd, grid_h, grid_w, span } = geom;
    let c = heads * hd;
    let n = grid_h * grid_w;
    let kpq = span.keys_per_query(grid_h, grid_w);
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); kpq];
    let mut keys = Vec::with_capacity(kpq);
    for b in 0..batch {
        let base = b * n * c;
        for qi in 0..grid_h {
            let (r0, rl) = span.window(qi, grid_h);
            for qj in 0..grid_w {
                let (c0, cl) = span.window(qj, grid_w);
                keys.clear();
                for r in r0..r0 + rl {
                    keys.extend((c0..c0 + cl).map(|cc| r * grid_w + cc));
                }
                let qn = qi * grid_w + qj;
                for h in 0..heads {
                    let qoff = base + qn * c + h * hd;
                    let poff = ((b * heads + h) * n + qn) * kpq;
                    let p = &probs[poff..poff + kpq];
                    let go = &dout[qoff..qoff + hd];
                    let mut weighted = T::zero();
                    for ((d, &kn), &pp) in dp.iter_mut().zip(&keys).zip(p) {
                        let voff = base + kn * c + h * hd;
                        *d = dot(go, &v[voff..voff + hd]);
                        weighted += pp * *d;
                        for (dvv, &gg) in dv[voff..voff + hd].iter_mut().zip(go) {
                            *dvv += pp * gg;
                        }
                    }
                    for ((&d, &kn), &pp) in dp.iter().zip(&keys).zip(p) {
                        let ds = pp * (d - weighted) * scale;
                        let koff = base + kn * c + h * hd;
                        for (d, &kk) in dq[qoff..qoff + hd].iter_mut().zip(&k[koff..koff + hd]) {
                            *d += ds * kk;
                        }
                        for (d, &qq) in dk[koff..koff + hd].iter_mut().zip(&q[qoff..qoff + hd]) {
                            *d += ds * qq;
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
pub(crate) fn attention_probs_for_test<T: Real>(q: &[T], k: &[T], geom: AttnGeom) -> (Vec<T>, usize) {
    let v = vec![T::zero(); k.len()];
    let (_, probs, _) = attention_forward(q, k, &v, geom, true);
    (probs, geom.span.keys_per_query(geom.grid_h, geom.grid_w))
}
