//! Central finite-difference checks used to verify analytic gradients.
//!
//! These only evaluate forward passes, so they stay independent of the
//! reverse pass they are checking.

use super::{ParamStore, Tensor};
use crate::error::Result;

/// Step used for central differences in 64-bit mode.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for analytic-vs-numeric agreement.
pub const REL_TOL: f64 = 1e-4;
/// Absolute tolerance applied when the gradient magnitude is below [`SMALL_GRAD`].
pub const ABS_TOL: f64 = 1e-7;
pub const SMALL_GRAD: f64 = 1e-3;

/// Agreement rule: relative error below [`REL_TOL`], or absolute error below
/// [`ABS_TOL`] when both values are smaller than [`SMALL_GRAD`].
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < SMALL_GRAD {
        diff < ABS_TOL
    } else {
        diff / scale < REL_TOL
    }
}

pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest relative error among coordinates with magnitude ≥ [`SMALL_GRAD`].
    pub worst_rel: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        if scale >= SMALL_GRAD {
            self.worst_rel = self.worst_rel.max((analytic - numeric).abs() / scale);
        }
        if !grad_close(analytic, numeric) {
            self.mismatches.push(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// Compares `analytic` (aligned with the store) against central differences
/// of `loss` for every coordinate, or every `stride`-th coordinate of each tensor.
pub fn check_store(
    store: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    stride: usize,
    loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradReport> {
    check_store_where(store, analytic, stride, |_| true, loss)
}

/// [`check_store`] restricted to parameters whose name satisfies `keep`.
pub fn check_store_where(
    store: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    stride: usize,
    keep: impl Fn(&str) -> bool,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradReport> {
    let mut report = GradReport::default();
    let mut probe = store.clone();
    for id in store.ids().filter(|&id| keep(store.name(id))) {
        let n = store.get(id).len();
        let name = store.name(id).to_string();
        for i in (0..n).step_by(stride.max(1)) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(&name, i, analytic[id.index()].data()[i], numeric);
        }
    }
    Ok(report)
}

/// Compares a flat analytic gradient against central differences of `f`.
pub fn check_flat(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradReport> {
    let numeric = central_difference(f, x, FD_STEP)?;
    let mut report = GradReport::default();
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        report.record(name, i, a, n);
    }
    Ok(report)
}
