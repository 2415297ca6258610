//! Minimal reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records primitive operations as they execute (define-by-run).
//! [`Tape::backward`] replays the record in reverse to produce gradients for
//! every trainable leaf. Every primitive checks its output for NaN/Inf and
//! reports the offending op instead of propagating garbage.
//!
//! Broadcasting is limited to a rank-1 bias over the last axis; wider
//! broadcasts are expressed as products with constant ones-matrices.

pub mod check;
mod composite;
mod layers;
mod params;
mod real;
mod tape;
mod tensor;

pub use layers::{LayerNorm, Linear};
pub use params::{uniform, Graph, ParamId, ParamStore};
pub use real::Real;
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
