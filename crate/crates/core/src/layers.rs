//! Small parameterized building blocks shared by the flow model and the encoder.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Real;

/// Epsilon inside every RMS denominator.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, din, dout, bias, Init::FanIn(din), ParamKind::Weight, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
        kind: ParamKind,
        rng: &mut R,
    ) -> Self {
        let w = store.add_init(format!("{name}.weight"), &[din, dout], init, kind, rng);
        let b = bias.then(|| store.add_init(format!("{name}.bias"), &[dout], Init::Zeros, ParamKind::Bias, rng));
        Self { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + if self.b.is_some() { self.dout } else { 0 }
    }
}

/// RMS normalization with a `(1 + s)` channel gain.
#[derive(Clone, Debug)]
pub enum Norm {
    /// `s` predicted from the conditioning embedding by a zero-initialized projection.
    Ada(Linear),
    /// `s` is a learned per-channel constant, zero-initialized.
    Const(ParamId),
}

impl Norm {
    pub fn ada<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cond_width: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Norm::Ada(Linear::with_init(store, name, cond_width, width, false, Init::Zeros, ParamKind::NormScale, rng))
    }

    pub fn constant<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        Norm::Const(store.add_init(format!("{name}.gain"), &[width], Init::Zeros, ParamKind::NormScale, rng))
    }

    /// `x` is `(batch, tokens, width)`; `cond` is `(batch, cond_width)` and
    /// only consulted by the adaptive variant.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, cond: Option<Var>) -> Result<Var> {
        let scale = match self {
            Norm::Ada(proj) => {
                let cond = cond.expect("adaptive norm needs a conditioning embedding");
                proj.forward(g, store, cond)?
            }
            Norm::Const(gain) => g.param(store, *gain),
        };
        g.rms_norm(x, scale, NORM_EPS)
    }
}
