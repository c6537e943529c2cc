//! Central finite differences against the tape's backward pass.
//!
//! The loss is rebuilt from scratch for every probe, so the check covers the
//! forward code as well as the recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{to_tokens, Attention};
use crate::config::preset;
use crate::error::{Error, Result};
use crate::graph::{AttnSpan, Graph, Var};
use crate::layers::Norm;
use crate::model::RfHit;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probe settings.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    /// Coordinates sampled per tensor.
    pub coords: usize,
    /// Finite-difference half step.
    pub step: f64,
    pub seed: u64,
}

impl Default for Probe {
    fn default() -> Self {
        Self { coords: 3, step: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Largest `|fd − analytic| / max(|fd|, |analytic|, 1e-7)`.
    pub worst: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst_at: String,
    pub checked: usize,
    /// Names of the tensors probed.
    pub tensors: Vec<String>,
}

impl GradReport {
    fn record(&mut self, name: &str, j: usize, fd: f64, an: f64) {
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        if rel > self.worst || self.checked == 0 {
            self.worst = rel;
            self.worst_at = format!("{name}[{j}] fd {fd:e} analytic {an:e}");
        }
        self.checked += 1;
    }
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    match g.value(v).data() {
        [x] => Ok(*x),
        d => Err(Error::Shape(format!("loss must be a scalar, got {} elements", d.len()))),
    }
}

/// Checks the gradient of a scalar `loss` with respect to the parameters
/// whose names pass `filter` and, if `with_inputs`, every input tensor.
/// Inputs reach `loss` as graph leaves in the order given.
pub fn check(
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    probe: Probe,
    filter: impl Fn(&str) -> bool,
    with_inputs: bool,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let value = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss(&mut g, store, &vars)?;
        scalar(&g, l)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = loss(&mut g, store, &vars)?;
    scalar(&g, l)?;
    let grads = g.backward(l)?;
    let input_grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.of(v).cloned()).collect();
    let param_grads = grads.into_param_grads(store.len());

    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let h = probe.step;
    let mut report = GradReport::default();
    for pi in 0..store.len() {
        let name = store.entries()[pi].name.clone();
        if !filter(&name) {
            continue;
        }
        report.tensors.push(name.clone());
        let n = store.entries()[pi].value.len();
        for _ in 0..probe.coords.min(n) {
            let j = rng.random_range(0..n);
            let orig = store.entries()[pi].value.data()[j];
            store.entries_mut()[pi].value.data_mut()[j] = orig + h;
            let lp = value(store, inputs)?;
            store.entries_mut()[pi].value.data_mut()[j] = orig - h;
            let lm = value(store, inputs)?;
            store.entries_mut()[pi].value.data_mut()[j] = orig;
            let an = param_grads[pi].as_ref().map_or(0.0, |g| g.data()[j]);
            report.record(&name, j, (lp - lm) / (2.0 * h), an);
        }
    }
    if with_inputs {
        for i in 0..inputs.len() {
            let name = format!("input{i}");
            report.tensors.push(name.clone());
            let n = inputs[i].len();
            for _ in 0..probe.coords.min(n) {
                let j = rng.random_range(0..n);
                let orig = inputs[i].data()[j];
                inputs[i].data_mut()[j] = orig + h;
                let lp = value(store, inputs)?;
                inputs[i].data_mut()[j] = orig - h;
                let lm = value(store, inputs)?;
                inputs[i].data_mut()[j] = orig;
                let an = input_grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                report.record(&name, j, (lp - lm) / (2.0 * h), an);
            }
        }
    }
    Ok(report)
}

/// Gaussian values scaled by 0.4: zero-initialized gains and heads would
/// otherwise hide most gradients.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for e in store.entries_mut() {
        e.value = Tensor::randn(e.value.shape(), rng).map(|v| 0.4 * v);
    }
}

/// Adaptive RMS norm on `(2, 5, 6)` tokens with a 4-wide conditioning vector:
/// projection weights, tokens and conditioning.
pub fn ada_rms_norm_suite() -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let norm = Norm::ada(&mut store, "norm", 4, 6, &mut rng);
    randomize(&mut store, &mut rng);
    let mut inputs = vec![Tensor::randn(&[2, 5, 6], &mut rng), Tensor::randn(&[2, 4], &mut rng)];
    let target = Tensor::randn(&[2, 5, 6], &mut rng);
    check(&mut store, &mut inputs, Probe { coords: 6, ..Probe::default() }, |_| true, true, |g, s, x| {
        let y = norm.forward(g, s, x[0], Some(x[1]))?;
        g.mse(y, target.clone())
    })
}

/// Neighborhood attention, kernel 3, on a `1×8×6×6` map with two heads:
/// projections and the input map.
pub fn neighborhood_attention_suite() -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "attn", 8, 2, AttnSpan::Neighborhood(3), &mut rng)?;
    randomize(&mut store, &mut rng);
    let mut inputs = vec![to_tokens(&Tensor::randn(&[1, 8, 6, 6], &mut rng))?];
    let target = Tensor::randn(&[1, 36, 8], &mut rng);
    check(&mut store, &mut inputs, Probe { coords: 8, ..Probe::default() }, |_| true, true, |g, s, x| {
        let y = attn.forward(g, s, x[0], (6, 6))?;
        g.mse(y, target.clone())
    })
}

/// The full model on the `unit` preset, velocity loss on a random batch of
/// two, probing the parameters whose names pass `filter`.
pub fn end_to_end_suite(filter: impl Fn(&str) -> bool) -> Result<GradReport> {
    let cfg = preset("unit")?;
    let mut model = RfHit::<f64>::new(&cfg, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    randomize(&mut model.store, &mut rng);
    let mut inputs = vec![Tensor::randn(&[2, 2, 8, 8], &mut rng), Tensor::randn(&[2, 1, 8, 8], &mut rng)];
    let t = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let target = Tensor::randn(&[2, 2, 8, 8], &mut rng);
    // the store moves out so it can be perturbed while the closure borrows the model
    let mut store = std::mem::take(&mut model.store);
    check(&mut store, &mut inputs, Probe { seed: 3, ..Probe::default() }, filter, true, |g, s, x| {
        let v = model.forward_with_store(g, s, x[0], &t, x[1])?;
        g.mse(v, target.clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn exact_on_a_linear_layer_and_catches_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(&[3, 4], &mut rng), ParamKind::Weight);
        let mut inputs = vec![Tensor::randn(&[2, 3], &mut rng)];
        let target = Tensor::randn(&[2, 4], &mut rng);
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
            let wv = g.param(s, w);
            let y = g.linear(x[0], wv, None)?;
            g.mse(y, target.clone())
        };
        let r = check(&mut store, &mut inputs, Probe::default(), |_| true, true, loss).unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.worst < 1e-8, "{}", r.worst_at);

        // a loss that is not differentiated by the tape: gradient appears as zero
        let hidden = |g: &mut Graph<f64>, s: &ParamStore<f64>, _: &[Var]| {
            let c = g.constant(s.get(w).clone());
            g.mse(c, Tensor::zeros(&[3, 4]))
        };
        let r = check(&mut store, &mut [], Probe::default(), |_| true, false, hidden).unwrap();
        assert!(r.worst > 0.99);
    }
}
