//! Blind image watermarking with spatial message spreading.
//!
//! The toolkit embeds an L-bit message into a cover image by splitting it
//! into indexed tuples, spreading the tuples over block positions of the
//! image, and training an encoder/decoder/critic triple against a suite of
//! differentiable attacks (including a stochastic JPEG approximation).
//! Recovery is blind: a nearest-neighbour translator reassembles the
//! message from the decoder's raw grid output.
//!
//! Modules:
//! - [`spread_codec`]: message <-> spatial grid conversion and recovery
//! - [`attacks`]: parameterized differentiable image distortions
//! - [`jpeg`]: differentiable JPEG approximation and the real codec
//! - [`models`]: encoder / decoder / critic networks and checkpoints
//! - [`training`]: losses, adversarial schedule and the optimization loop
//! - [`eval`]: bit accuracy, PSNR and the robustness evaluation grid
//! - [`data`]: dataset preparation and image I/O
//! - [`nn`]: the small tape-based autodiff engine backing the networks

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod jpeg;
pub mod models;
pub mod nn;
pub mod spread_codec;
pub mod training;

pub use error::{Error, Result};
