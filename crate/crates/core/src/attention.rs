//! Self-attention for the hourglass levels.
//!
//! High-resolution levels use neighborhood attention: each query scores the
//! `k × k` tokens around it, with the window shifted inward at the borders
//! so every query sees the same number of keys. The bottleneck uses global
//! attention over all tokens. Queries and keys carry 2D axial rotary
//! embeddings: the first half of each head rotates with the row index, the
//! second half with the column index.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AttnGeom, AttnSpan, Graph, RopeTables, Var};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Base of the geometric frequency ladder used by the rotary embedding.
pub const ROPE_BASE: f64 = 100.0;

/// Rotation tables for an `h × w` grid and `head_dim`-wide heads.
pub(crate) fn rope_tables<T: Real>(grid_h: usize, grid_w: usize, head_dim: usize) -> Result<Rc<RopeTables<T>>> {
    if head_dim % 4 != 0 || head_dim == 0 {
        return Err(Error::InvalidArgument(format!("axial rope needs head_dim divisible by 4, got {head_dim}")));
    }
    let quarter = head_dim / 4;
    let pairs = head_dim / 2;
    let freqs: Vec<f64> = (0..quarter).map(|f| ROPE_BASE.powf(-(f as f64) / quarter as f64)).collect();
    let n = grid_h * grid_w;
    let mut cos = Vec::with_capacity(n * pairs);
    let mut sin = Vec::with_capacity(n * pairs);
    for i in 0..grid_h {
        for j in 0..grid_w {
            for pos in [i, j] {
                for &f in &freqs {
                    let angle = pos as f64 * f;
                    cos.push(T::from_f64_lossy(angle.cos()));
                    sin.push(T::from_f64_lossy(angle.sin()));
                }
            }
        }
    }
    Ok(Rc::new(RopeTables { cos, sin, pairs }))
}

/// Applies the axial rotary embedding to `x (batch, h·w, heads·head_dim)`.
pub fn axial_rope<T: Real>(x: &Tensor<T>, grid_h: usize, grid_w: usize, head_dim: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != grid_h * grid_w || shape[2] % head_dim.max(1) != 0 {
        return Err(Error::Shape(format!("axial_rope: {shape:?} on a {grid_h}x{grid_w} grid")));
    }
    let tables = rope_tables(grid_h, grid_w, head_dim)?;
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let out = g.rope(v, head_dim, tables)?;
    Ok(g.take_value(out))
}

/// Multi-head self-attention with query/key/value and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub span: AttnSpan,
    pub rope: bool,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        span: AttnSpan,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {width} not divisible by {heads} heads")));
        }
        if let AttnSpan::Neighborhood(k) = span {
            if k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("neighborhood kernel must be odd, got {k}")));
            }
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, false, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, false, rng),
            heads,
            head_dim: width / heads,
            span,
            rope: true,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `x` is `(batch, h·w, width)`; returns the same shape.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let c = self.width();
        let batch = g.value(x).shape()[0];
        let qkv = self.qkv.forward(g, store, x)?;
        let mut q = g.slice_last(qkv, 0, c)?;
        let mut k = g.slice_last(qkv, c, c)?;
        let v = g.slice_last(qkv, 2 * c, c)?;
        if self.rope {
            let tables = rope_tables::<T>(grid.0, grid.1, self.head_dim)?;
            q = g.rope(q, self.head_dim, tables.clone())?;
            k = g.rope(k, self.head_dim, tables)?;
        }
        let geom = AttnGeom {
            batch,
            heads: self.heads,
            head_dim: self.head_dim,
            grid_h: grid.0,
            grid_w: grid.1,
            span: self.span,
        };
        let a = g.attention(q, k, v, geom)?;
        self.out.forward(g, store, a)
    }

    /// Stand-alone evaluation on `x (batch, h·w, width)`.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, store, xv, grid)?;
        Ok(g.take_value(out))
    }
}

/// Converts `(batch, C, H, W)` to token layout `(batch, H·W, C)`.
pub fn to_tokens<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..h * w {
                out[(bi * h * w + p) * c + ci] = src[(bi * c + ci) * h * w + p];
            }
        }
    }
    Tensor::from_vec(&[b, h * w, c], out)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [b, n, c] = x.shape()[..] else {
        return Err(Error::Shape(format!("expected tokens, got {:?}", x.shape())));
    };
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens for a {h}x{w} grid")));
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for p in 0..n {
            for ci in 0..c {
                out[(bi * c + ci) * n + p] = src[(bi * n + p) * c + ci];
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

/// Neighborhood attention on a feature map `(batch, C, H, W)`.
pub fn neighborhood_attention<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    params: &Attention,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("neighborhood kernel must be odd, got {kernel}")));
    }
    let (_, _, h, w) = x.dims4()?;
    let layer = Attention { span: AttnSpan::Neighborhood(kernel), ..params.clone() };
    from_tokens(&layer.apply(store, &to_tokens(x)?, (h, w))?, h, w)
}

/// Global attention on a feature map `(batch, C, H, W)`.
pub fn global_attention<T: Real>(x: &Tensor<T>, params: &Attention, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let layer = Attention { span: AttnSpan::Global, ..params.clone() };
    from_tokens(&layer.apply(store, &to_tokens(x)?, (h, w))?, h, w)
}
