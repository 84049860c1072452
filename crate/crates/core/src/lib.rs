//! Differentiable multi-head self-attention models for explainable
//! driving decisions, built on a small reverse-mode autodiff tape.
//!
//! The crate covers the full loop: synthetic scene generation and
//! on-disk formats ([`data`]), dense tensors ([`tensor`]) and the
//! autodiff tape ([`autodiff`]), multi-head self-attention
//! ([`attention`]), the four model architectures and their losses
//! ([`network`]), SGD training with reproducible checkpoints
//! ([`train`]), F1-based evaluation ([`metrics`]), and self-contained
//! verification suites ([`verify`]).
//!
//! Everything is deterministic given a seed: dataset bytes, training
//! curves, checkpoints, and evaluation reports reproduce bit-identically
//! across runs on the same platform.

pub mod error;
pub mod tensor;
pub mod autodiff;
pub mod attention;
pub mod network;
pub mod data;
pub mod metrics;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

/// The guide chapters under `book/src` double as doc-tests: every
/// runnable snippet in the book compiles and passes against the current
/// API, so the prose cannot drift from the code.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
    mod tensors_and_autodiff {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
