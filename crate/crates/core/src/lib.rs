//! Differentiable coarse-to-fine volume rendering with learnt sample proposers.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod field;
pub mod gradcore;
pub mod metrics;
pub mod proposer;
pub mod render;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/rendering.md")]
    struct Rendering;
    #[doc = include_str!("../../../book/src/fields.md")]
    struct Fields;
    #[doc = include_str!("../../../book/src/proposers.md")]
    struct Proposers;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/scenes.md")]
    struct Scenes;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    struct Reproducibility;
    #[doc = include_str!("../../../book/src/quickstart.md")]
    struct Quickstart;
    #[doc = include_str!("../../../book/src/pruning.md")]
    struct Pruning;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
