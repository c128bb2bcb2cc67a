//! Conditional stochastic networks for multimodal forecasting.
//!
//! The crate implements, at desk scale and entirely on CPU:
//!
//! * an f64 tensor type with reverse-mode automatic differentiation
//!   ([`tensor`]), including convolutions, transposed convolutions and a
//!   differentiable bilinear warp;
//! * Gaussian stochastic layers with reparameterized sampling and
//!   closed-form diagonal KL ([`nn`]);
//! * the MCML, conditional-VAE and K-best-sample training objectives
//!   plus a regression baseline ([`losses`]);
//! * glimpse encoders and the three task decoders: fully connected,
//!   conv-indexed, and dense-flow with frame warping ([`models`]);
//! * seeded synthetic multimodal worlds with a binary on-disk format
//!   ([`synthdata`]);
//! * density-ordered top-k evaluation ([`eval`]) and a deterministic
//!   Adam training loop ([`train`]).
//!
//! The `csnet` binary in the companion CLI crate drives dataset
//! generation, training, evaluation and report plotting.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod nn;
pub mod parallel;
pub mod report;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
