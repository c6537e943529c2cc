//! Training: warm-up + cosine schedule, AdamW with decoupled weight decay,
//! deterministic batching and a progress log.
//!
//! Everything random in step `s` (batch order, augmentation, `t`, `x0`) is
//! derived from the seed and `s`, so resuming needs only parameters,
//! optimizer moments and the step counter.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{augment, collate, derived_rng, id_tag, Dataset, SliceSample};
use crate::error::{Error, Result};
use crate::flow::{interpolate, sample_time, velocity_target};
use crate::graph::Graph;
use crate::model::RfHit;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const TAG_ORDER: u64 = 1;
const TAG_NOISE: u64 = 2;

/// Learning-rate schedule: linear ramp over `warmup_steps`, then half-cosine to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    /// Warm-up spans `round(fraction · total)` steps, at least one when the
    /// fraction is positive.
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = if warmup_fraction > 0.0 {
            ((warmup_fraction * total_steps as f64).round() as usize).max(1).min(total_steps)
        } else {
            0
        };
        Self { base_lr, total_steps, warmup_steps }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!("step {step} beyond schedule of {} steps", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// AdamW state: first and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    /// One update; parameters without a gradient are treated as having zero gradient.
    /// Decay is applied to the weights directly and only to decaying kinds.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let decay = if entry.kind.decays() { self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = entry.value.data_mut();
            let g = grads.get(i).and_then(|g| g.as_ref()).map(|g| g.data());
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + self.eps) + decay * p[j] as f64;
                p[j] = (p[j] as f64 - lr * update) as f32;
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor<f32>>], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = (max / norm) as f32;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the update just applied.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model, optimizer and schedule advancing over a fixed dataset.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: RfHit<f32>,
    pub opt: AdamW,
    pub schedule: Schedule,
    pub config: TrainConfig,
    /// Updates applied so far.
    pub step: usize,
    order_cache: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, config: &TrainConfig, total_steps: usize) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let model = RfHit::new(model_cfg, config.seed)?;
        Ok(Self::from_parts(model, config, total_steps, None, 0))
    }

    /// Reassembles a trainer, e.g. from a checkpoint.
    pub fn from_parts(model: RfHit<f32>, config: &TrainConfig, total_steps: usize, opt: Option<AdamW>, step: usize) -> Self {
        let opt = opt.unwrap_or_else(|| AdamW::new(&model.store, config));
        let schedule = Schedule::new(config.learning_rate, total_steps, config.warmup_fraction);
        Self { model, opt, schedule, config: config.clone(), step, order_cache: None }
    }

    pub fn done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    fn epoch_order(&mut self, epoch: usize, n: usize) -> &[usize] {
        if self.order_cache.as_ref().is_none_or(|(e, o)| *e != epoch || o.len() != n) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut derived_rng(self.config.seed, &[TAG_ORDER, epoch as u64]));
            self.order_cache = Some((epoch, order));
        }
        &self.order_cache.as_ref().unwrap().1
    }

    /// Indices and epochs of the samples used by update `step`.
    fn batch_indices(&mut self, step: usize, n: usize) -> Vec<(usize, usize)> {
        let b = self.config.batch_size;
        (0..b)
            .map(|i| {
                let pos = step * b + i;
                let epoch = pos / n;
                (self.epoch_order(epoch, n)[pos % n], epoch)
            })
            .collect()
    }

    /// Loss of the current parameters on the batch of update `self.step`,
    /// with per-parameter gradients.
    fn loss_and_grads(&mut self, data: &Dataset) -> Result<(f64, Vec<Option<Tensor<f32>>>, Vec<String>)> {
        let n = data.len();
        if n == 0 {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let picks = self.batch_indices(self.step, n);
        let augmented: Vec<SliceSample> = picks
            .iter()
            .map(|&(i, epoch)| {
                let s = &data.samples[i];
                let mut rng = derived_rng(self.config.seed, &[id_tag(&s.volume_id), s.slice_index as u64, epoch as u64]);
                augment(s, &self.config.augment, &mut rng)
            })
            .collect();
        let ids = augmented.iter().map(|s| format!("{}_{}", s.volume_id, s.slice_index)).collect();
        let refs: Vec<&SliceSample> = augmented.iter().collect();
        let (image, x1) = collate::<f32>(&refs, self.model.config.seg_channels)?;
        let mut rng = derived_rng(self.config.seed, &[TAG_NOISE, self.step as u64]);
        let t = sample_time::<f32, _>(refs.len(), &mut rng);
        let x0 = Tensor::<f32>::randn(x1.shape(), &mut rng);
        let xt = interpolate(&x0, &x1, &t)?;
        let target = velocity_target(&x0, &x1)?;
        let mut g = Graph::new();
        let xv = g.constant(xt);
        let iv = g.constant(image);
        let v = self.model.forward(&mut g, xv, &t, iv)?;
        let loss = g.mse(v, target)?;
        let loss_value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?.into_param_grads(self.model.store.len());
        Ok((loss_value, grads, ids))
    }

    /// Loss on the next batch without updating anything.
    pub fn peek_loss(&mut self, data: &Dataset) -> Result<f64> {
        Ok(self.loss_and_grads(data)?.0)
    }

    /// Loss and per-parameter gradients on the next batch without updating anything.
    pub fn peek_gradients(&mut self, data: &Dataset) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
        let (loss, grads, _) = self.loss_and_grads(data)?;
        Ok((loss, grads))
    }

    /// One optimizer update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        if self.done() {
            return Err(Error::InvalidArgument(format!("schedule of {} steps already complete", self.schedule.total_steps)));
        }
        let lr = self.schedule.lr_at(self.step + 1)?;
        let (loss, mut grads, ids) = self.loss_and_grads(data)?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                lr,
                batch: ids,
                message: format!("loss {loss}, gradient norm {grad_norm}"),
            });
        }
        self.opt.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(StepStats { step: self.step, lr, loss, grad_norm })
    }

    /// Runs until the schedule completes, calling `on_step` after each update.
    pub fn fit(&mut self, data: &Dataset, mut on_step: impl FnMut(&StepStats) -> Result<()>) -> Result<()> {
        while !self.done() {
            let stats = self.train_step(data)?;
            on_step(&stats)?;
        }
        Ok(())
    }
}

/// Append-only text log: one `step=… lr=… loss=… wall_s=…` record per line.
pub struct ProgressLog {
    file: File,
    path: PathBuf,
    start: Instant,
}

impl ProgressLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf(), start: Instant::now() })
    }

    pub fn record(&mut self, s: &StepStats) -> Result<()> {
        writeln!(
            self.file,
            "step={} lr={:.6e} loss={:.6} grad_norm={:.4} wall_s={:.2}",
            s.step,
            s.lr,
            s.loss,
            s.grad_norm,
            self.start.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, preset_train, AugmentToggles};
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::params::ParamKind;

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(1e-4, 1000, 0.01);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 1e-4);
        assert!(s.lr_at(1000).unwrap().abs() < 1e-20);
        assert!(s.lr_at(1001).is_err());
        let before = s.lr_at(9).unwrap();
        assert!((s.lr_at(10).unwrap() - before - 1e-5).abs() < 1e-12);
        let after = s.lr_at(11).unwrap();
        assert!((s.lr_at(10).unwrap() - after).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled_and_limited_to_weights() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full(&[3], 2.0), ParamKind::Weight);
        store.add("b", Tensor::full(&[3], 2.0), ParamKind::Bias);
        store.add("a", Tensor::full(&[1], 2.0), ParamKind::Lerp);
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[None, None, None], 0.5);
        assert_eq!(store.entries()[0].value.data(), &[2.0 * (1.0 - 0.5 * 0.1); 3]);
        assert_eq!(store.entries()[1].value.data(), &[2.0; 3]);
        assert_eq!(store.entries()[2].value.data(), &[2.0]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full(&[2], 1.0), ParamKind::Weight);
        let mut opt = AdamW::new(&store, &TrainConfig::default());
        opt.step(&mut store, &[Some(Tensor::full(&[2], 3.0))], 0.0);
        assert_eq!(store.entries()[0].value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, Some(1.0)), 5.0);
        let n = g[0].as_ref().unwrap().sum_sq().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let data = synthetic_dataset(&SyntheticSpec { size: 16, volumes: 2, slices_per_volume: 3, ..Default::default() }).unwrap();
        let mut cfg = preset("unit").unwrap();
        cfg.input_size = [16, 16];
        cfg.seg_channels = 4;
        let train = TrainConfig { batch_size: 4, augment: AugmentToggles::all(), ..preset_train("unit") };
        let run = || {
            let mut t = Trainer::new(&cfg, &train, 5).unwrap();
            (0..5).map(|_| t.train_step(&data).unwrap().loss).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|l| l.is_finite()));
    }
}
