//! Differentiable building blocks assembled from tape primitives.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    /// `x @ w + b` with `b` a bias over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let pos = self.relu(x)?;
        let neg = self.scale(x, -1.0)?;
        let neg = self.relu(neg)?;
        self.add(pos, neg)
    }

    /// Elementwise binary cross-entropy of `logits` against constant `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let sp = self.softplus(logits)?;
        let y = self.constant(targets.clone())?;
        let yz = self.mul(y, logits)?;
        self.sub(sp, yz)
    }

    /// Repeats a `[m, 1]` column across `width` columns.
    pub fn broadcast_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let ones = self.constant(Tensor::ones(vec![1, width]))?;
        self.matmul(x, ones)
    }

    /// Repeats a rank-1 `[d]` row across `rows` rows.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let d = self.shape(x).iter().product::<usize>();
        let row = self.reshape(x, &[1, d])?;
        let ones = self.constant(Tensor::ones(vec![rows, 1]))?;
        self.matmul(ones, row)
    }

    /// Per-token standardisation over the last axis followed by a learned
    /// scale `gamma` and shift `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / d.max(1);
        let x2 = self.reshape(x, &[rows, d])?;
        let avg = self.constant(Tensor::full(vec![d, 1], T::of(1.0 / d as f64)))?;
        let mu = self.matmul(x2, avg)?;
        let mu = self.broadcast_cols(mu, d)?;
        let xc = self.sub(x2, mu)?;
        let sq = self.square(xc)?;
        let var = self.matmul(sq, avg)?;
        let var = self.add_scalar(var, eps)?;
        let inv = self.log(var)?;
        let inv = self.scale(inv, -0.5)?;
        let inv = self.exp(inv)?;
        let inv = self.broadcast_cols(inv, d)?;
        let xn = self.mul(xc, inv)?;
        let g = self.broadcast_rows(gamma, rows)?;
        let y = self.mul(xn, g)?;
        let y = self.add(y, beta)?;
        self.reshape(y, &shape)
    }
}
