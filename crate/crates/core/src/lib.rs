//! Multi-scale video-token pyramids, cross-scale sequence orderings,
//! gated-residual bidirectional selective state-space learners and a
//! contrastive retrieval head, all on a small reverse-mode `f64` engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`ops`], [`gradcheck`]: dense tensors, the
//!   tape and its differentiable ops, and a finite-difference oracle.
//! * [`pyramid`]: per-scale token grids from one base grid.
//! * [`aggregate`]: scale-, frame- and spatial-wise flattening.
//! * [`ssm`]: selective scan, Mamba / MambaOut / attention blocks and the
//!   residual stack.
//! * [`retrieval`] and [`metrics`]: embedding pooling, InfoNCE, R@K / MdR / MnR.
//! * [`bench`]: cost models and instrumented sweeps.
//! * [`config`], [`data`], [`model`], [`train`], [`reproduce`]: the experiment harness.

pub mod aggregate;
pub mod autograd;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod instrument;
mod kernels;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod reproduce;
pub mod retrieval;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, PoolKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
