//! The full segmentation model: flow network plus optional feature encoder,
//! sharing one parameter store (`hfm.*` and `hfe.*` names).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, VelocityField};
use crate::graph::{Graph, Var};
use crate::hfe::Hfe;
use crate::hourglass::{Fusion, Hfm};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct RfHit<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub hfm: Hfm,
    pub hfe: Option<(Hfe, Fusion)>,
}

/// HFE outputs for one batch of images, reusable across timesteps.
#[derive(Clone, Debug)]
pub struct ImageFeatures<T> {
    tokens: Vec<Tensor<T>>,
}

impl<T: Real> RfHit<T> {
    /// Builds the model with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.ensure_valid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hfm = Hfm::new(&mut store, config, &mut rng)?;
        let hfe = if config.use_hfe {
            let hfe = Hfe::new(&mut store, config, &mut rng)?;
            let fusion = Fusion::new(&mut store, config, &mut rng);
            Some((hfe, fusion))
        } else {
            None
        };
        Ok(Self { config: config.clone(), store, hfm, hfe })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn hfm_param_count(&self) -> usize {
        self.store.numel_with_prefix("hfm.")
    }

    pub fn hfe_param_count(&self) -> usize {
        self.store.numel_with_prefix("hfe.")
    }

    /// Velocity prediction inside `g`; the HFE runs on `image` as part of the graph.
    pub fn forward(&self, g: &mut Graph<T>, xt: Var, t: &[T], image: Var) -> Result<Var> {
        self.forward_with_store(g, &self.store, xt, t, image)
    }

    /// [`Self::forward`] reading parameters from another store of the same layout.
    pub(crate) fn forward_with_store(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xt: Var,
        t: &[T],
        image: Var,
    ) -> Result<Var> {
        match &self.hfe {
            Some((hfe, fusion)) => {
                let feats = hfe.forward(g, store, image)?;
                self.hfm.forward(g, store, xt, t, image, Some((&feats, fusion)))
            }
            None => self.hfm.forward(g, store, xt, t, image, None),
        }
    }

    /// Runs the HFE once; `None` when the model has no encoder.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Option<ImageFeatures<T>>> {
        let Some((hfe, _)) = &self.hfe else {
            return Ok(None);
        };
        let mut g = Graph::inference();
        let iv = g.constant(image.clone());
        let feats = hfe.forward(&mut g, &self.store, iv)?;
        let tokens = feats.into_iter().map(|f| g.take_value(f)).collect();
        Ok(Some(ImageFeatures { tokens }))
    }

    /// Velocity using precomputed image features.
    pub fn velocity_with(
        &self,
        features: Option<&ImageFeatures<T>>,
        xt: &Tensor<T>,
        t: &[T],
        image: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(xt.clone());
        let iv = g.constant(image.clone());
        let out = match (&self.hfe, features) {
            (Some((_, fusion)), Some(f)) => {
                let feats: Vec<Var> = f.tokens.iter().map(|t| g.constant(t.clone())).collect();
                self.hfm.forward(&mut g, &self.store, xv, t, iv, Some((&feats, fusion)))?
            }
            (None, None) => self.hfm.forward(&mut g, &self.store, xv, t, iv, None)?,
            _ => return Err(Error::InvalidArgument("image features do not match the HFE setting".into())),
        };
        Ok(g.take_value(out))
    }

    /// Velocity for `(xt, t)` given the conditioning image.
    pub fn velocity(&self, xt: &Tensor<T>, t: &[T], image: &Tensor<T>) -> Result<Tensor<T>> {
        let feats = self.encode(image)?;
        self.velocity_with(feats.as_ref(), xt, t, image)
    }

    /// Euler integration from `x0` to `t = 1`; the HFE runs once per call.
    pub fn sample(&self, image: &Tensor<T>, x0: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
        let feats = self.encode(image)?;
        let mut field = ConditionedField { model: self, image, features: feats.as_ref() };
        euler_sample(&mut field, x0, steps)
    }
}

/// The model with the image (and its features) fixed, as a function of `(x, t)`.
pub struct ConditionedField<'a, T> {
    pub model: &'a RfHit<T>,
    pub image: &'a Tensor<T>,
    pub features: Option<&'a ImageFeatures<T>>,
}

impl<T: Real> VelocityField<T> for ConditionedField<'_, T> {
    fn velocity(&mut self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        let b = x.shape()[0];
        self.model.velocity_with(self.features, x, &vec![t; b], self.image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn zero_head_gives_zero_velocity() {
        let cfg = preset("unit").unwrap();
        let model = RfHit::<f64>::new(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = Tensor::randn(&[2, 2, 8, 8], &mut rng);
        let img = Tensor::randn(&[2, 1, 8, 8], &mut rng);
        let v = model.velocity(&xt, &[0.2, 0.7], &img).unwrap();
        assert_eq!(v.shape(), &[2, 2, 8, 8]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cached_features_match_fresh_evaluation() {
        let cfg = preset("unit").unwrap();
        let mut model = RfHit::<f64>::new(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for e in model.store.entries_mut() {
            e.value = Tensor::randn(e.value.shape(), &mut rng).map(|v| 0.3 * v);
        }
        let xt = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let img = Tensor::randn(&[1, 1, 8, 8], &mut rng);
        let feats = model.encode(&img).unwrap();
        let a = model.velocity_with(feats.as_ref(), &xt, &[0.4], &img).unwrap();
        let b = model.velocity(&xt, &[0.4], &img).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn disabling_hfe_removes_exactly_its_parameters() {
        let mut cfg = preset("tiny").unwrap();
        let with = RfHit::<f32>::new(&cfg, 0).unwrap();
        cfg.use_hfe = false;
        let without = RfHit::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(with.hfm_param_count(), without.hfm_param_count());
        assert_eq!(with.param_count() - without.param_count(), with.hfe_param_count());
        assert_eq!(without.hfe_param_count(), 0);
        assert_eq!(with.param_count(), with.hfm_param_count() + with.hfe_param_count());
    }
}
