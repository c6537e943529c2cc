//! The hourglass flow model (HFM): the velocity network.
//!
//! ```text
//! [xt ‖ image] → patchify → encoder levels (neighborhood attention, fuse HFE, merge)
//!              → bottleneck (global attention)
//!              → decoder levels (split, skip lerp, neighborhood attention)
//!              → norm → linear head → unpatchify → velocity
//! ```
//!
//! Tokens travel as `(batch, h·w, width)`; the public entry points take and
//! return `(batch, C, H, W)` maps.

use std::rc::Rc;

use rand::Rng;

use crate::attention::{from_tokens, to_tokens, Attention};
use crate::config::{FusionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{AttnSpan, Graph, Var};
use crate::layers::{Linear, Norm};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Squashes a raw lerp parameter into `(0, 1)`.
pub fn mix_coefficient(raw: f64) -> f64 {
    1.0 / (1.0 + (-raw).exp())
}

/// Gather indices taking `(B, C, H, W)` to patch tokens `(B, h·w, C·ph·pw)`.
pub(crate) fn patchify_index(b: usize, c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<u32> {
    let (gh, gw) = (h / ph, w / pw);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for i in 0..gh {
            for j in 0..gw {
                for ci in 0..c {
                    for py in 0..ph {
                        for px in 0..pw {
                            idx.push((((bi * c + ci) * h + i * ph + py) * w + j * pw + px) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Gather indices taking patch tokens `(B, h·w, C·ph·pw)` back to `(B, C, H, W)`.
pub(crate) fn unpatchify_index(b: usize, c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<u32> {
    let (gh, gw) = (h / ph, w / pw);
    let f = c * ph * pw;
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let tok = bi * gh * gw + (y / ph) * gw + x / pw;
                    idx.push((tok * f + (ci * ph + y % ph) * pw + x % pw) as u32);
                }
            }
        }
    }
    idx
}

/// `(B, h·w, C)` → `(B, h/2·w/2, 4C)`, concatenating each 2×2 block.
pub(crate) fn merge_index(b: usize, h: usize, w: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let tok = bi * h * w + (2 * i + dy) * w + 2 * j + dx;
                        idx.extend((0..c).map(|ci| (tok * c + ci) as u32));
                    }
                }
            }
        }
    }
    idx
}

/// `(B, h·w, 4C)` → `(B, 2h·2w, C)`; inverse rearrangement of [`merge_index`].
pub(crate) fn split_index(b: usize, h: usize, w: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(b * h * w * 4 * c);
    for bi in 0..b {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let tok = bi * h * w + (y / 2) * w + x / 2;
                let sub = (y % 2) * 2 + x % 2;
                idx.extend((0..c).map(|ci| (tok * 4 * c + sub * c + ci) as u32));
            }
        }
    }
    idx
}

/// Non-overlapping patches linearly projected to the level-0 width.
#[derive(Clone, Debug)]
pub struct Patchify {
    pub proj: Linear,
    pub in_channels: usize,
    pub patch: [usize; 2],
}

impl Patchify {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        patch: [usize; 2],
        width: usize,
        rng: &mut R,
    ) -> Self {
        let din = in_channels * patch[0] * patch[1];
        Self { proj: Linear::new(store, name, din, width, true, rng), in_channels, patch }
    }

    /// `(B, C, H, W)` map → `(B, h·w, width)` tokens.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (b, c, h, w) = g.value(x).dims4()?;
        let [ph, pw] = self.patch;
        if c != self.in_channels {
            return Err(Error::Shape(format!("patchify expects {} channels, got {c}", self.in_channels)));
        }
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by patch {ph}x{pw}")));
        }
        let idx = Rc::new(patchify_index(b, c, h, w, ph, pw));
        let patches = g.gather(x, idx, &[b, (h / ph) * (w / pw), c * ph * pw])?;
        self.proj.forward(g, store, patches)
    }

    /// Value-level form returning a `(B, width, h, w)` map.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, store, xv)?;
        from_tokens(&g.take_value(out), h / self.patch[0], w / self.patch[1])
    }
}

/// Linear head from tokens back to `C_out` channels of `patch` pixels each.
#[derive(Clone, Debug)]
pub struct Unpatchify {
    pub proj: Linear,
    pub out_channels: usize,
    pub patch: [usize; 2],
}

impl Unpatchify {
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let b = g.value(x).shape()[0];
        let [ph, pw] = self.patch;
        let y = self.proj.forward(g, store, x)?;
        let (h, w) = (grid.0 * ph, grid.1 * pw);
        let idx = Rc::new(unpatchify_index(b, self.out_channels, h, w, ph, pw));
        g.gather(y, idx, &[b, self.out_channels, h, w])
    }
}

/// 2×2 token merge: concatenate neighborhoods, project to the next width.
pub fn token_merge<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    proj: &Linear,
    x: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (b, c) = (shape[0], shape[2]);
    let (h, w) = grid;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("token merge needs an even grid, got {h}x{w}")));
    }
    if proj.din != 4 * c {
        return Err(Error::Shape(format!("merge projection expects {} inputs, tokens have {c}", proj.din)));
    }
    let idx = Rc::new(merge_index(b, h, w, c));
    let cat = g.gather(x, idx, &[b, (h / 2) * (w / 2), 4 * c])?;
    proj.forward(g, store, cat)
}

/// Token split: project to `4·width_prev` channels, then unfold into a 2× larger grid.
pub fn token_split<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    proj: &Linear,
    x: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let b = g.value(x).shape()[0];
    let (h, w) = grid;
    if proj.dout % 4 != 0 {
        return Err(Error::Shape(format!("split projection width {} not divisible by 4", proj.dout)));
    }
    let c = proj.dout / 4;
    let y = proj.forward(g, store, x)?;
    let idx = Rc::new(split_index(b, h, w, c));
    g.gather(y, idx, &[b, 4 * h * w, c])
}

/// `(1 − α)·decoder + α·skip` with `α = sigmoid(raw)`.
pub fn skip_lerp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, decoder: Var, skip: Var, raw: ParamId) -> Result<Var> {
    let r = g.param(store, raw);
    g.lerp(decoder, skip, r)
}

/// Pre-norm transformer block with AdaRMSNorm (or constant-gain) conditioning.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ff: Norm,
    pub ff_up: Linear,
    pub ff_down: Linear,
}

impl Block {
    /// `cond_width = None` builds constant-gain norms (no timestep conditioning).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        span: AttnSpan,
        expansion: usize,
        cond_width: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let norm = |store: &mut ParamStore<T>, n: &str, rng: &mut R| match cond_width {
            Some(cw) => Norm::ada(store, n, cw, width, rng),
            None => Norm::constant(store, n, width, rng),
        };
        let norm_attn = norm(store, &format!("{name}.norm_attn"), rng);
        let attn = Attention::new(store, &format!("{name}.attn"), width, heads, span, rng)?;
        let norm_ff = norm(store, &format!("{name}.norm_ff"), rng);
        let hidden = expansion * width;
        let ff_up = Linear::new(store, &format!("{name}.ff_up"), width, 2 * hidden, false, rng);
        let ff_down = Linear::new(store, &format!("{name}.ff_down"), hidden, width, false, rng);
        Ok(Self { norm_attn, attn, norm_ff, ff_up, ff_down })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Option<Var>,
        grid: (usize, usize),
    ) -> Result<Var> {
        let h = self.norm_attn.forward(g, store, x, cond)?;
        let a = self.attn.forward(g, store, h, grid)?;
        let x = g.add(x, a)?;
        let h = self.norm_ff.forward(g, store, x, cond)?;
        let up = self.ff_up.forward(g, store, h)?;
        let gated = g.geglu(up)?;
        let down = self.ff_down.forward(g, store, gated)?;
        g.add(x, down)
    }
}

/// Fourier features of `t`: `[cos(2π f_i t) …, sin(2π f_i t) …]` with
/// geometrically spaced `f_i` on `[0.5, 200]`.
pub fn fourier_features<T: Real>(t: &[T], width: usize) -> Tensor<T> {
    let half = width / 2;
    let (lo, hi) = (0.5f64.ln(), 200f64.ln());
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            (lo + frac * (hi - lo)).exp()
        })
        .collect();
    let mut data = Vec::with_capacity(t.len() * width);
    for &tv in t {
        let tv = tv.as_f64();
        data.extend(freqs.iter().map(|f| T::from_f64_lossy((std::f64::consts::TAU * f * tv).cos())));
        data.extend(freqs.iter().map(|f| T::from_f64_lossy((std::f64::consts::TAU * f * tv).sin())));
    }
    Tensor::from_vec(&[t.len(), width], data).expect("fourier feature shape")
}

/// Timestep embedding: Fourier features followed by `depth` MLP layers.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub layers: Vec<(Linear, Linear)>,
    pub width: usize,
}

impl MappingNetwork {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                (
                    Linear::new(store, &format!("{name}.{i}.up"), width, hidden, true, rng),
                    Linear::new(store, &format!("{name}.{i}.down"), hidden, width, true, rng),
                )
            })
            .collect();
        Self { layers, width }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, t: &[T]) -> Result<Var> {
        let mut h = g.constant(fourier_features(t, self.width));
        for (up, down) in &self.layers {
            let u = up.forward(g, store, h)?;
            let a = g.gelu(u);
            h = down.forward(g, store, a)?;
        }
        Ok(h)
    }

    /// Conditioning embeddings `(batch, width)` for the given times.
    pub fn embed<T: Real>(&self, store: &ParamStore<T>, t: &[T]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let v = self.forward(&mut g, store, t)?;
        Ok(g.take_value(v))
    }
}

/// Per-level token features, level 0 first.
pub type LevelTokens = Vec<Var>;

/// The flow model proper.
#[derive(Clone, Debug)]
pub struct Hfm {
    pub config: ModelConfig,
    pub patchify: Patchify,
    pub mapping: MappingNetwork,
    pub encoder: Vec<Vec<Block>>,
    pub merges: Vec<Linear>,
    pub bottleneck: Vec<Block>,
    pub splits: Vec<Linear>,
    pub skip_alpha: Vec<ParamId>,
    pub decoder: Vec<Vec<Block>>,
    pub final_norm: Norm,
    pub head: Unpatchify,
}

impl Hfm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.ensure_valid()?;
        let levels = cfg.levels();
        let cw = Some(cfg.mapping_width);
        let in_ch = cfg.seg_channels + cfg.image_channels;
        let patchify = Patchify::new(store, "hfm.patchify", in_ch, cfg.patch_size, cfg.widths[0], rng);
        let mapping =
            MappingNetwork::new(store, "hfm.mapping", cfg.mapping_depth, cfg.mapping_width, cfg.mapping_hidden, rng);
        let stack = |store: &mut ParamStore<T>, prefix: &str, l: usize, span: AttnSpan, rng: &mut R| {
            (0..cfg.depths[l])
                .map(|i| {
                    Block::new(
                        store,
                        &format!("{prefix}.{i}"),
                        cfg.widths[l],
                        cfg.num_heads_per_level[l],
                        span,
                        cfg.ffn_expansion,
                        cw,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for l in 0..levels - 1 {
            let span = AttnSpan::Neighborhood(cfg.neighborhood_kernels[l]);
            encoder.push(stack(store, &format!("hfm.enc{l}"), l, span, rng)?);
            merges.push(Linear::new(store, &format!("hfm.merge{l}"), 4 * cfg.widths[l], cfg.widths[l + 1], false, rng));
        }
        let bottleneck = stack(store, "hfm.mid", levels - 1, AttnSpan::Global, rng)?;
        let mut splits = Vec::new();
        let mut skip_alpha = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..levels - 1).rev() {
            splits.push(Linear::new(store, &format!("hfm.split{l}"), cfg.widths[l + 1], 4 * cfg.widths[l], false, rng));
            skip_alpha.push(store.add_init(format!("hfm.skip{l}.alpha"), &[1], Init::Zeros, ParamKind::Lerp, rng));
            let span = AttnSpan::Neighborhood(cfg.neighborhood_kernels[l]);
            decoder.push(stack(store, &format!("hfm.dec{l}"), l, span, rng)?);
        }
        let final_norm = Norm::constant(store, "hfm.final_norm", cfg.widths[0], rng);
        let [ph, pw] = cfg.patch_size;
        let head = Unpatchify {
            proj: Linear::with_init(
                store,
                "hfm.head",
                cfg.widths[0],
                cfg.seg_channels * ph * pw,
                true,
                Init::Zeros,
                ParamKind::Weight,
                rng,
            ),
            out_channels: cfg.seg_channels,
            patch: cfg.patch_size,
        };
        Ok(Self {
            config: cfg.clone(),
            patchify,
            mapping,
            encoder,
            merges,
            bottleneck,
            splits,
            skip_alpha,
            decoder,
            final_norm,
            head,
        })
    }

    /// Velocity for `xt (B, C_seg, H, W)` at per-element times `t`, conditioned
    /// on `image (B, C_I, H, W)` and, when given, HFE features fused by `fusion`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xt: Var,
        t: &[T],
        image: Var,
        fusion: Option<(&[Var], &Fusion)>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, cs, h, w) = g.value(xt).dims4()?;
        let (ib, ci, ih, iw) = g.value(image).dims4()?;
        if cs != cfg.seg_channels || ci != cfg.image_channels || (ib, ih, iw) != (b, h, w) {
            return Err(Error::Shape(format!(
                "xt {:?} / image {:?} do not match config ({} seg, {} image channels)",
                g.value(xt).shape(),
                g.value(image).shape(),
                cfg.seg_channels,
                cfg.image_channels
            )));
        }
        if [h, w] != cfg.input_size {
            return Err(Error::Shape(format!("input {h}x{w}, config expects {:?}", cfg.input_size)));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} times for batch {b}", t.len())));
        }
        let levels = cfg.levels();
        let x = g.concat(xt, image, 1)?;
        let mut x = self.patchify.forward(g, store, x)?;
        let cond = Some(self.mapping.forward(g, store, t)?);

        let mut skips = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            let grid = cfg.grid(l);
            for block in &self.encoder[l] {
                x = block.forward(g, store, x, cond, grid)?;
            }
            if let Some((feats, fusion)) = fusion {
                x = fusion.apply(g, store, l, x, feats[l])?;
            }
            skips.push(x);
            x = token_merge(g, store, &self.merges[l], x, grid)?;
        }
        let grid = cfg.grid(levels - 1);
        if let Some((feats, fusion)) = fusion {
            if cfg.fuse_bottleneck {
                x = fusion.apply(g, store, levels - 1, x, feats[levels - 1])?;
            }
        }
        for block in &self.bottleneck {
            x = block.forward(g, store, x, cond, grid)?;
        }
        for (i, l) in (0..levels - 1).rev().enumerate() {
            x = token_split(g, store, &self.splits[i], x, cfg.grid(l + 1))?;
            x = skip_lerp(g, store, x, skips[l], self.skip_alpha[i])?;
            for block in &self.decoder[i] {
                x = block.forward(g, store, x, cond, cfg.grid(l))?;
            }
        }
        let x = self.final_norm.forward(g, store, x, None)?;
        self.head.forward(g, store, x, cfg.grid(0))
    }
}

/// How HFE features are merged into the HFM encoder.
#[derive(Clone, Debug)]
pub enum Fusion {
    /// One raw interpolation scalar per fused level.
    Lerp(Vec<ParamId>),
    Add,
}

impl Fusion {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let fused = cfg.levels() - 1 + usize::from(cfg.fuse_bottleneck);
        match cfg.fusion {
            FusionKind::Lerp => Fusion::Lerp(
                (0..fused)
                    .map(|l| store.add_init(format!("hfe.fuse{l}.alpha"), &[1], Init::Zeros, ParamKind::Lerp, rng))
                    .collect(),
            ),
            FusionKind::Add => Fusion::Add,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, level: usize, f: Var, c: Var) -> Result<Var> {
        match self {
            Fusion::Lerp(alphas) => {
                let raw = g.param(store, alphas[level]);
                g.lerp(f, c, raw)
            }
            Fusion::Add => g.add(f, c),
        }
    }
}

/// Convenience: value-level token merge on a `(B, C, H, W)` map.
pub fn apply_merge<T: Real>(store: &ParamStore<T>, proj: &Linear, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let mut g = Graph::inference();
    let xv = g.constant(to_tokens(x)?);
    let y = token_merge(&mut g, store, proj, xv, (h, w))?;
    from_tokens(&g.take_value(y), h / 2, w / 2)
}

/// Convenience: value-level token split on a `(B, C, H, W)` map.
pub fn apply_split<T: Real>(store: &ParamStore<T>, proj: &Linear, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let mut g = Graph::inference();
    let xv = g.constant(to_tokens(x)?);
    let y = token_split(&mut g, store, proj, xv, (h, w))?;
    from_tokens(&g.take_value(y), 2 * h, 2 * w)
}
