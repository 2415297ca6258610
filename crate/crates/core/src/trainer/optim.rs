use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction and default hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    /// Zeroes both moments and the bias-correction counter.
    pub fn reset(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(T::zero());
        }
        self.step = 0;
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adam", format!("{} grads for {} params", grads.len(), store.len())));
        }
        for id in store.ids() {
            if !grads[id.index()].is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let c1 = T::one() - b1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = T::one() - b2.powi(self.step.min(i32::MAX as u64) as i32);
        let (lr, eps) = (T::of(lr), T::of(EPSILON));
        for id in store.ids() {
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup restarted at `stage_start`, times a cosine decay to zero
/// over the whole run.
pub fn learning_rate(peak: f64, warmup: usize, total: usize, step: usize, stage_start: usize) -> f64 {
    let progress = (step as f64 / total.max(1) as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    let since = step.saturating_sub(stage_start) + 1;
    let warm = if warmup == 0 { 1.0 } else { (since as f64 / warmup as f64).min(1.0) };
    peak * cosine * warm
}
