//! Hierarchical feature encoder (HFE): image-only multi-scale features that
//! are fused into the flow model's encoder, one feature map per level.
//!
//! The encoder does not see the timestep, so a trajectory evaluates it once.

use rand::Rng;

use crate::attention::from_tokens;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{AttnSpan, Graph, Var};
use crate::hourglass::{token_merge, Block, Patchify};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Hfe {
    pub patchify: Patchify,
    pub levels: Vec<Vec<Block>>,
    pub merges: Vec<Linear>,
    /// One output projection per fused level.
    pub projections: Vec<Linear>,
    pub config: ModelConfig,
}

impl Hfe {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.ensure_valid()?;
        let fused = cfg.levels() - 1 + usize::from(cfg.fuse_bottleneck);
        let patchify = Patchify::new(store, "hfe.patchify", cfg.image_channels, cfg.patch_size, cfg.widths[0], rng);
        let mut levels = Vec::new();
        let mut merges = Vec::new();
        let mut projections = Vec::new();
        for l in 0..fused {
            if l > 0 {
                merges.push(Linear::new(
                    store,
                    &format!("hfe.merge{}", l - 1),
                    4 * cfg.widths[l - 1],
                    cfg.widths[l],
                    false,
                    rng,
                ));
            }
            let blocks = if l < cfg.levels() - 1 {
                let span = AttnSpan::Neighborhood(cfg.neighborhood_kernels[l]);
                (0..cfg.depths[l])
                    .map(|i| {
                        Block::new(
                            store,
                            &format!("hfe.level{l}.{i}"),
                            cfg.widths[l],
                            cfg.num_heads_per_level[l],
                            span,
                            cfg.ffn_expansion,
                            None,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            levels.push(blocks);
            let w = cfg.widths[l];
            projections.push(Linear::new(store, &format!("hfe.proj{l}"), w, w, false, rng));
        }
        Ok(Self { patchify, levels, merges, projections, config: cfg.clone() })
    }

    /// Token features `(B, h_l·w_l, width_l)` for each fused level.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != cfg.image_channels || [h, w] != cfg.input_size {
            return Err(Error::Shape(format!(
                "HFE expects ({}, {:?}) images, got {:?}",
                cfg.image_channels,
                cfg.input_size,
                g.value(image).shape()
            )));
        }
        let mut x = self.patchify.forward(g, store, image)?;
        let mut out = Vec::with_capacity(self.projections.len());
        for (l, blocks) in self.levels.iter().enumerate() {
            if l > 0 {
                x = token_merge(g, store, &self.merges[l - 1], x, cfg.grid(l - 1))?;
            }
            for block in blocks {
                x = block.forward(g, store, x, None, cfg.grid(l))?;
            }
            out.push(self.projections[l].forward(g, store, x)?);
        }
        Ok(out)
    }

    /// Value-level features as `(B, width_l, h_l, w_l)` maps.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let iv = g.constant(image.clone());
        let feats = self.forward(&mut g, store, iv)?;
        feats
            .into_iter()
            .enumerate()
            .map(|(l, f)| {
                let (gh, gw) = self.config.grid(l);
                from_tokens(&g.take_value(f), gh, gw)
            })
            .collect()
    }
}

/// `(1 − α)·f + α·c` on equally shaped maps.
pub fn fuse<T: Real>(f: &Tensor<T>, c: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let a = T::from_f64_lossy(alpha);
    f.zip_map(c, |x, y| x + a * (y - x))
}

/// Additive fusion `f + c`.
pub fn fuse_add<T: Real>(f: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    f.zip_map(c, |x, y| x + y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_examples() {
        let f = Tensor::<f64>::full(&[1, 4, 2, 2], 1.0);
        let c = Tensor::<f64>::full(&[1, 4, 2, 2], 3.0);
        assert!(fuse(&f, &c, 0.5).unwrap().data().iter().all(|&v| v == 2.0));
        assert_eq!(fuse(&f, &c, 0.0).unwrap(), f);
        assert_eq!(fuse(&f, &c, 1.0).unwrap(), c);
        assert!(fuse_add(&f, &c).unwrap().data().iter().all(|&v| v == 4.0));
        assert!(fuse(&f, &Tensor::zeros(&[1, 4, 2, 3]), 0.5).is_err());
    }

    #[test]
    fn feature_shapes_follow_the_hierarchy() {
        let cfg = preset("unit").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let hfe = Hfe::new(&mut store, &cfg, &mut rng).unwrap();
        let img = Tensor::<f64>::randn(&[2, 1, 8, 8], &mut rng);
        let feats = hfe.apply(&store, &img).unwrap();
        assert_eq!(feats.len(), cfg.levels() - 1);
        for (l, f) in feats.iter().enumerate() {
            let (h, w) = cfg.grid(l);
            assert_eq!(f.shape(), &[2, cfg.widths[l], h, w]);
        }
        let mut cfg = cfg;
        cfg.fuse_bottleneck = true;
        let mut store = ParamStore::<f64>::new();
        let hfe = Hfe::new(&mut store, &cfg, &mut rng).unwrap();
        assert_eq!(hfe.apply(&store, &img).unwrap().len(), cfg.levels());
    }
}
