//! Decoder-free variational self-supervised learning.
//!
//! A student network produces a diagonal-Gaussian posterior for each of two
//! augmented views; a momentum (EMA) copy of the student supplies the prior.
//! Twin denoisers map sampled latents back to distribution parameters, which
//! replaces the reconstruction term of a VAE. Losses come in a Gaussian form
//! and a cosine/softplus form.

pub mod data;
pub mod diffcore;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod networks;
pub mod objectives;
pub mod rng;
pub mod suite;
pub mod training;

pub use error::{Error, Result};
