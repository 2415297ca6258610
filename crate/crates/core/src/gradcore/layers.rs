//! Parameterised layers registered in a [`ParamStore`].

use rand::Rng;

use super::{uniform, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x @ w + b` with `w: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform weights in `[-bound, bound]` and zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform(&[fan_in, fan_out], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Self { w, b }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            w: find(store, &format!("{name}.w"))?,
            b: find(store, &format!("{name}.b"))?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        g.linear(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Per-token standardisation with learned scale and shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![width]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![width]));
        Self { gamma, beta }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: find(store, &format!("{name}.gamma"))?,
            beta: find(store, &format!("{name}.beta"))?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta, Self::EPS)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

pub(crate) fn find<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
}
