//! Dot-matrix expiry-date reading: a convolutional-recurrent VAE that turns
//! dotted Arabic-Indic date images into solid renderings, and a compact
//! CRNN + CTC recognizer that reads the translated image.
//!
//! Everything numeric is built here from scratch on a small reverse-mode
//! autodiff engine ([`tensor`]).

pub mod crnn;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::{Element, Gradients, Rng, Tape, Tensor, Var};
