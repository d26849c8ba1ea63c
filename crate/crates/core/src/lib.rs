//! Binary vision transformer toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`bitcore`]: bit-packed ±1 matrices and XNOR/popcount products.
//! - [`binarize`]: activation, attention and weight binarizers with their
//!   straight-through backward rules.
//! - [`diba`]: differential binary attention updates and the frozen 3×3
//!   negative-attention neighbourhood sum.
//! - [`hfsc`]: non-subsampled Haar split and frequency-enhanced Q/K.
//! - [`activations`]: PReLU, RPReLU and the per-token-shift RPReLU.
//! - [`autograd`]: define-by-run tape, parameters, AdamW, cosine schedule.
//! - [`model`]: the transformer, its ablation switches, losses, checkpoints.
//! - [`data`], [`train`], [`report`], [`gradcheck`], [`bench`]: the pieces
//!   driven by the `didb` command line.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod autograd;
pub mod bench;
pub mod binarize;
pub mod bitcore;
pub mod data;
pub mod diba;
mod error;
pub mod gradcheck;
pub mod grid;
pub mod hfsc;
pub mod model;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
