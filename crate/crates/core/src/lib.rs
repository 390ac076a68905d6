//! Robustness-regularized model-agnostic meta-learning.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithm:
//! a higher-order reverse-mode autodiff tape, small dense classifiers,
//! ℓ∞ attacks, AT/TRADES regularizers, the contrastive auxiliary loss, the
//! episodic data pipeline and the bi-level meta-learning engine. File
//! formats, configuration and the CLI live in the `rmaml` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attack;
pub mod autodiff;
pub mod contrastive;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod metalearn;
pub mod model;
pub mod regularizer;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
