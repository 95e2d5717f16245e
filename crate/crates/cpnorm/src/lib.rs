//! Neural network layers parameterized by CP (canonical polyadic) tensor
//! decompositions, with a norm-based reparametrization that keeps factor
//! columns on the unit sphere and trains magnitudes separately.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors, unfoldings, Khatri-Rao products and the
//!   small dense linear algebra everything else sits on,
//! * [`cp`] — CP decomposition (ALS, power iteration) and rank estimation,
//! * [`nn`] — layers and models whose weights live in decomposed form,
//! * [`optim`] — optimizers plus the post-step renormalization hook,
//! * [`data`] — MNIST / CIFAR-10 loaders and batching,
//! * [`compress`] — magnitude-based rank truncation and fine-tuning,
//! * [`train`] — the shared training loop.

pub mod compress;
pub mod cp;
pub mod data;
mod error;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
