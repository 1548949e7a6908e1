//! Variational option discovery: a context-conditioned policy is trained so
//! that a decoder can recover the context from the trajectory it produced.
//!
//! Three decoders share one training loop: VALOR (bidirectional LSTM over
//! subsampled state deltas), VIC (final state only) and DIAYN (sum of
//! per-state terms). Everything runs on a small reverse-mode autodiff
//! engine in `f64`.

#![allow(clippy::needless_range_loop)]

pub mod adam;
pub mod decoders;
pub mod envs;
pub mod error;
pub mod eval;
pub mod grad_suite;
pub mod gradcheck;
pub mod nn;
pub mod par;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
